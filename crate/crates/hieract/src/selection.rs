//! Spatially diverse annotation-candidate selection: voxel aggregation of
//! per-point scores, ranked per-voxel sampling under a quota, and feature
//! distance suppression (FDS) of near-duplicate neighbors.
//!
//! Every ordering here is total, so identical inputs produce identical
//! rounds byte for byte.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("voxel size must be strictly positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("no unlabeled points to select from")]
    EmptyUnlabeledPool,
    #[error("point {0} has no score")]
    MissingScore(u64),
    #[error("point {0} has a non-finite score")]
    NonFiniteScore(u64),
    #[error("scene arrays disagree in length")]
    LengthMismatch,
}

pub type CellCoord = [i64; 3];

/// Axis-aligned voxel partition at one scale. Cell = floor(coord / size).
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    voxel_size: f64,
    cells: HashMap<CellCoord, Vec<usize>>,
}

pub fn cell_of(position: &[f64; 3], voxel_size: f64) -> CellCoord {
    [
        (position[0] / voxel_size).floor() as i64,
        (position[1] / voxel_size).floor() as i64,
        (position[2] / voxel_size).floor() as i64,
    ]
}

pub fn voxelize(positions: &[[f64; 3]], voxel_size: f64) -> Result<VoxelGrid, SelectionError> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(SelectionError::InvalidVoxelSize(voxel_size));
    }
    let mut cells: HashMap<CellCoord, Vec<usize>> = HashMap::new();
    for (idx, pos) in positions.iter().enumerate() {
        cells.entry(cell_of(pos, voxel_size)).or_default().push(idx);
    }
    Ok(VoxelGrid { voxel_size, cells })
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn members(&self, cell: &CellCoord) -> Option<&[usize]> {
        self.cells.get(cell).map(|v| v.as_slice())
    }

    /// Cells in ascending lexicographic coordinate order.
    pub fn sorted_cells(&self) -> Vec<(CellCoord, &[usize])> {
        let mut out: Vec<_> = self
            .cells
            .iter()
            .map(|(c, m)| (*c, m.as_slice()))
            .collect();
        out.sort_unstable_by_key(|(c, _)| *c);
        out
    }
}

/// Mean of member point scores per cell.
pub fn voxel_scores(grid: &VoxelGrid, scores: &[f64]) -> HashMap<CellCoord, f64> {
    let mut out = HashMap::with_capacity(grid.num_cells());
    for (cell, members) in &grid.cells {
        let sum: f64 = members.iter().map(|&i| scores[i]).sum();
        out.insert(*cell, sum / members.len() as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget_points: usize,
    pub points_per_voxel: usize,
    /// Cosine-similarity cutoff: candidates more similar than this to a
    /// nearby chosen point are suppressed.
    pub fds_threshold: f64,
    /// Neighborhood radius in meters for the FDS check.
    pub fds_radius: f64,
    /// Voxel edge lengths in meters, one entry per scale.
    pub voxel_sizes: Vec<f64>,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.budget_points < 1 {
            return Err(SelectionError::InvalidConfig("budget_points must be >= 1".into()));
        }
        if self.points_per_voxel < 1 {
            return Err(SelectionError::InvalidConfig(
                "points_per_voxel must be >= 1".into(),
            ));
        }
        if self.voxel_sizes.is_empty() {
            return Err(SelectionError::InvalidConfig("voxel_sizes must be non-empty".into()));
        }
        for &s in &self.voxel_sizes {
            if !(s > 0.0) || !s.is_finite() {
                return Err(SelectionError::InvalidVoxelSize(s));
            }
        }
        if !(-1.0..=1.0).contains(&self.fds_threshold) {
            return Err(SelectionError::InvalidConfig(
                "fds_threshold must be in [-1, 1]".into(),
            ));
        }
        if !(self.fds_radius >= 0.0) {
            return Err(SelectionError::InvalidConfig("fds_radius must be >= 0".into()));
        }
        Ok(())
    }
}

/// Budget for a round: a fraction of the total point count, floored, never
/// less than one point.
pub fn budget_from_fraction(fraction: f64, total_points: usize) -> usize {
    ((fraction * total_points as f64).floor() as usize).max(1)
}

/// One scene's selection inputs. `ids` are the external point ids used for
/// tie-breaking and reporting; positions/features/ids are index-aligned.
#[derive(Debug, Clone)]
pub struct SelectionScene {
    pub ids: Vec<u64>,
    pub positions: Vec<[f64; 3]>,
    pub features: Vec<Vec<f64>>,
}

impl SelectionScene {
    fn check(&self, scores: &[f64], labeled: &[bool]) -> Result<(), SelectionError> {
        let n = self.ids.len();
        if self.positions.len() != n || self.features.len() != n || labeled.len() != n {
            return Err(SelectionError::LengthMismatch);
        }
        if scores.len() != n {
            return Err(SelectionError::LengthMismatch);
        }
        for (i, &s) in scores.iter().enumerate() {
            if !labeled[i] && !s.is_finite() {
                return Err(SelectionError::NonFiniteScore(self.ids[i]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPoint {
    pub id: u64,
    pub score: f64,
    pub cell: CellCoord,
    pub scale_index: usize,
    pub voxel_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub round_index: usize,
    pub selected: Vec<SelectedPoint>,
    pub rejected_by_fds: Vec<u64>,
    /// True when the candidate stream ran out before the budget was met.
    pub budget_exhausted_early: bool,
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A voxel visit: one (cell, scale) with its unlabeled members already in
/// candidate order.
struct Visit {
    scale_index: usize,
    cell: CellCoord,
    score: f64,
    members: Vec<usize>,
}

/// Build the full visit list across every configured scale, ordered by
/// descending voxel score, then ascending cell coordinate, then scale.
fn build_visits(
    scene: &SelectionScene,
    scores: &[f64],
    labeled: &[bool],
    config: &SelectionConfig,
) -> Result<Vec<Visit>, SelectionError> {
    let unlabeled: Vec<usize> = (0..scene.ids.len()).filter(|&i| !labeled[i]).collect();
    if unlabeled.is_empty() {
        return Err(SelectionError::EmptyUnlabeledPool);
    }
    let positions: Vec<[f64; 3]> = unlabeled.iter().map(|&i| scene.positions[i]).collect();

    let mut visits = Vec::new();
    for (scale_index, &size) in config.voxel_sizes.iter().enumerate() {
        let grid = voxelize(&positions, size)?;
        for (cell, members) in grid.sorted_cells() {
            let mut members: Vec<usize> = members.iter().map(|&u| unlabeled[u]).collect();
            members.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then(scene.ids[a].cmp(&scene.ids[b]))
            });
            let sum: f64 = members.iter().map(|&i| scores[i]).sum();
            visits.push(Visit {
                scale_index,
                cell,
                score: sum / members.len() as f64,
                members,
            });
        }
    }
    visits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.cell.cmp(&b.cell))
            .then(a.scale_index.cmp(&b.scale_index))
    });
    Ok(visits)
}

struct FdsState<'a> {
    scene: &'a SelectionScene,
    threshold: f64,
    radius2: f64,
    /// Indices a candidate must stay dissimilar from: previously labeled
    /// points plus everything accepted this round.
    blockers: Vec<usize>,
}

impl<'a> FdsState<'a> {
    fn new(scene: &'a SelectionScene, labeled: &[bool], config: &SelectionConfig) -> Self {
        FdsState {
            scene,
            threshold: config.fds_threshold,
            radius2: config.fds_radius * config.fds_radius,
            blockers: (0..scene.ids.len()).filter(|&i| labeled[i]).collect(),
        }
    }

    fn is_redundant(&self, candidate: usize) -> bool {
        let pos = &self.scene.positions[candidate];
        let feat = &self.scene.features[candidate];
        self.blockers.iter().any(|&b| {
            dist2(pos, &self.scene.positions[b]) <= self.radius2
                && cosine_similarity(feat, &self.scene.features[b]) > self.threshold
        })
    }

    fn accept(&mut self, candidate: usize) {
        self.blockers.push(candidate);
    }
}

/// Greedy budgeted selection over the ranked voxel visit list.
///
/// Voxels from every configured scale are visited in one descending-score
/// order; within a voxel, unlabeled points are taken by descending score
/// (ties by ascending id) until the per-voxel quota is filled. Candidates
/// whose features are near-duplicates of an already chosen point within
/// `fds_radius` are suppressed and do not consume quota.
pub fn select_round(
    scene: &SelectionScene,
    scores: &[f64],
    config: &SelectionConfig,
    labeled: &[bool],
    round_index: usize,
) -> Result<SelectionRound, SelectionError> {
    config.validate()?;
    scene.check(scores, labeled)?;
    let visits = build_visits(scene, scores, labeled, config)?;

    let mut fds = FdsState::new(scene, labeled, config);
    let mut taken = vec![false; scene.ids.len()];
    let mut rejected = vec![false; scene.ids.len()];
    let mut selected = Vec::with_capacity(config.budget_points);
    let mut rejected_ids = Vec::new();

    'outer: for visit in &visits {
        let mut accepted_here = 0usize;
        for &p in &visit.members {
            if selected.len() >= config.budget_points {
                break 'outer;
            }
            if accepted_here >= config.points_per_voxel {
                break;
            }
            if taken[p] || rejected[p] {
                continue;
            }
            if fds.is_redundant(p) {
                rejected[p] = true;
                rejected_ids.push(scene.ids[p]);
                continue;
            }
            fds.accept(p);
            taken[p] = true;
            accepted_here += 1;
            selected.push(SelectedPoint {
                id: scene.ids[p],
                score: scores[p],
                cell: visit.cell,
                scale_index: visit.scale_index,
                voxel_size: config.voxel_sizes[visit.scale_index],
            });
        }
    }

    Ok(SelectionRound {
        round_index,
        budget_exhausted_early: selected.len() < config.budget_points,
        selected,
        rejected_by_fds: rejected_ids,
    })
}

/// Multi-scale variant: each point is considered once, at the best
/// (minimum) rank its voxels achieve across scales; ties between equal
/// combined ranks fall back to descending point score, then ascending id.
/// With a single scale this reduces exactly to [`select_round`].
pub fn multi_scale_select(
    scene: &SelectionScene,
    scores: &[f64],
    config: &SelectionConfig,
    labeled: &[bool],
    round_index: usize,
) -> Result<SelectionRound, SelectionError> {
    multi_scale_select_pooled(
        &[PooledScene {
            scene,
            scores,
            labeled,
        }],
        config,
        round_index,
    )
}

/// One scene's slice of a pooled selection round.
pub struct PooledScene<'a> {
    pub scene: &'a SelectionScene,
    pub scores: &'a [f64],
    pub labeled: &'a [bool],
}

/// Pooled multi-scale selection across several scenes under one budget.
///
/// Voxel grids are built per scene; the visit ordering merges all scenes
/// by descending voxel score (ties by scene order, cell, scale). The FDS
/// neighborhood never crosses scene boundaries. Ids must be globally
/// unique across the pool.
pub fn multi_scale_select_pooled(
    scenes: &[PooledScene],
    config: &SelectionConfig,
    round_index: usize,
) -> Result<SelectionRound, SelectionError> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(SelectionError::EmptyUnlabeledPool);
    }
    struct PooledVisit {
        scene_index: usize,
        scale_index: usize,
        cell: CellCoord,
        score: f64,
    }
    let mut visits: Vec<PooledVisit> = Vec::new();
    let mut any_unlabeled = false;
    for (scene_index, p) in scenes.iter().enumerate() {
        p.scene.check(p.scores, p.labeled)?;
        let unlabeled: Vec<usize> = (0..p.scene.ids.len()).filter(|&i| !p.labeled[i]).collect();
        if unlabeled.is_empty() {
            continue;
        }
        any_unlabeled = true;
        let positions: Vec<[f64; 3]> = unlabeled.iter().map(|&i| p.scene.positions[i]).collect();
        for (scale_index, &size) in config.voxel_sizes.iter().enumerate() {
            let grid = voxelize(&positions, size)?;
            for (cell, members) in grid.sorted_cells() {
                let sum: f64 = members.iter().map(|&u| p.scores[unlabeled[u]]).sum();
                visits.push(PooledVisit {
                    scene_index,
                    scale_index,
                    cell,
                    score: sum / members.len() as f64,
                });
            }
        }
    }
    if !any_unlabeled {
        return Err(SelectionError::EmptyUnlabeledPool);
    }
    visits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.scene_index.cmp(&b.scene_index))
            .then(a.cell.cmp(&b.cell))
            .then(a.scale_index.cmp(&b.scale_index))
    });
    let mut visit_rank: HashMap<(usize, usize, CellCoord), usize> = HashMap::new();
    for (rank, v) in visits.iter().enumerate() {
        visit_rank.insert((v.scene_index, v.scale_index, v.cell), rank);
    }

    struct Candidate {
        scene_index: usize,
        point: usize,
        rank: usize,
    }
    let mut candidates = Vec::new();
    for (scene_index, p) in scenes.iter().enumerate() {
        for i in 0..p.scene.ids.len() {
            if p.labeled[i] {
                continue;
            }
            let rank = config
                .voxel_sizes
                .iter()
                .enumerate()
                .map(|(s, &size)| {
                    visit_rank[&(scene_index, s, cell_of(&p.scene.positions[i], size))]
                })
                .min()
                .expect("at least one scale");
            candidates.push(Candidate {
                scene_index,
                point: i,
                rank,
            });
        }
    }
    candidates.sort_by(|a, b| {
        a.rank.cmp(&b.rank).then_with(|| {
            let sa = scenes[a.scene_index].scores[a.point];
            let sb = scenes[b.scene_index].scores[b.point];
            sb.partial_cmp(&sa).unwrap().then(
                scenes[a.scene_index].scene.ids[a.point]
                    .cmp(&scenes[b.scene_index].scene.ids[b.point]),
            )
        })
    });

    let mut fds: Vec<FdsState> = scenes
        .iter()
        .map(|p| FdsState::new(p.scene, p.labeled, config))
        .collect();
    let mut quota: HashMap<usize, usize> = HashMap::new();
    let mut selected = Vec::with_capacity(config.budget_points);
    let mut rejected_ids = Vec::new();

    for c in &candidates {
        if selected.len() >= config.budget_points {
            break;
        }
        let visit = &visits[c.rank];
        let used = quota.entry(c.rank).or_insert(0);
        if *used >= config.points_per_voxel {
            continue;
        }
        let p = &scenes[c.scene_index];
        if fds[c.scene_index].is_redundant(c.point) {
            rejected_ids.push(p.scene.ids[c.point]);
            continue;
        }
        fds[c.scene_index].accept(c.point);
        *used += 1;
        selected.push(SelectedPoint {
            id: p.scene.ids[c.point],
            score: p.scores[c.point],
            cell: visit.cell,
            scale_index: visit.scale_index,
            voxel_size: config.voxel_sizes[visit.scale_index],
        });
    }

    Ok(SelectionRound {
        round_index,
        budget_exhausted_early: selected.len() < config.budget_points,
        selected,
        rejected_by_fds: rejected_ids,
    })
}
