//! Desk-scale end-to-end active learning: synthetic scenes, a toy
//! teacher–student classifier with EMA and pseudo-labels, round
//! orchestration, acquisition baselines, and the benchmark harness.

pub mod bench;
pub mod classifier;
pub mod metrics;
pub mod run;
pub mod scene;

pub use classifier::{level_targets, train, train_step, ToyClassifier, TrainScene};
pub use metrics::{compute_miou, MiouReport};
pub use run::{
    run_active_learning, AblationSwitches, Acquisition, ProfileScope, RunConfig, RunInputs,
    RunReport, SceneSettings, SelectionSettings, TrainingSettings,
};
pub use scene::{bootstrap_labels, generate_scene, generate_scene_detailed, PointCloudScene};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input arrays disagree in length")]
    LengthMismatch,
    #[error("empty input")]
    EmptyInput,
    #[error("class index {0} out of range")]
    InvalidClass(usize),
    #[error("training requires at least one labeled point")]
    NoLabeledPoints,
    #[error("training diverged at step {step} (non-finite loss)")]
    Divergence { step: usize },
    #[error("the run disables LLHC but no alternative hierarchy was provided")]
    AltHierarchyMissing,
    #[error("hierarchies do not share a leaf label set")]
    LeafSetMismatch,
    #[error(transparent)]
    Uncertainty(#[from] crate::uncertainty::UncertaintyError),
    #[error(transparent)]
    Selection(#[from] crate::selection::SelectionError),
    #[error(transparent)]
    Hierarchy(#[from] crate::hierarchy::HierarchyError),
}
