//! Hierarchy-aware active learning for 3D point cloud segmentation.
//!
//! The pipeline: an LLM-generated multi-level label tree ([`hierarchy`],
//! [`taxonomy`]), recursive coarse-to-fine uncertainty propagation with
//! global alignment ([`uncertainty`]), voxel-based spatially diverse point
//! selection under a budget ([`selection`]), cross-level prediction fusion
//! ([`fusion`]), and a desk-scale teacher–student simulator that drives the
//! whole loop end to end ([`simulator`]).

pub mod fusion;
pub mod hierarchy;
pub mod presets;
pub mod records;
pub mod selection;
pub mod simulator;
pub mod taxonomy;
pub mod uncertainty;
