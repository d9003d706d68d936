//! Round orchestration: train → predict → score → select → label, with
//! ablation switches and acquisition baselines.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hierarchy::LabelHierarchy;
use crate::selection::{
    budget_from_fraction, multi_scale_select_pooled, PooledScene, SelectionConfig, SelectionScene,
};
use crate::uncertainty::{
    global_profile, propagate_with, score, LabelUncertainty, Omega, PropagatedUncertainty,
};

use super::classifier::{
    count_pseudo_candidates, level_targets, train, ToyClassifier, TrainScene, TrainSettings,
};
use super::metrics::compute_miou;
use super::scene::PointCloudScene;
use super::SimulatorError;

/// Training knobs for one run, including the teacher–student parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub steps_per_round: usize,
    pub learning_rate: f64,
    pub ema_rate: f64,
    pub pseudo_threshold: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            steps_per_round: 500,
            learning_rate: 0.05,
            ema_rate: 0.955,
            pseudo_threshold: 0.75,
            batch_labeled: 64,
            batch_unlabeled: 64,
        }
    }
}

impl TrainingSettings {
    fn step_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.steps_per_round,
            learning_rate: self.learning_rate,
            batch_labeled: self.batch_labeled,
            batch_unlabeled: self.batch_unlabeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub llhc: bool,
    pub lup: bool,
    pub rup: bool,
    pub gaui: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            llhc: true,
            lup: true,
            rup: true,
            gaui: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    /// The full pipeline: propagated uncertainty, global alignment,
    /// voxel-diverse selection.
    Hierarchical,
    Random,
    FlatEntropy,
    FlatMargin,
}

impl Default for Acquisition {
    fn default() -> Self {
        Acquisition::Hierarchical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileScope {
    /// One mean uncertainty vector over the whole unlabeled pool per round.
    Dataset,
    /// One profile per scene.
    Scene,
}

impl Default for ProfileScope {
    fn default() -> Self {
        ProfileScope::Dataset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub points_per_voxel: usize,
    pub fds_threshold: f64,
    pub fds_radius: f64,
    pub voxel_sizes: Vec<f64>,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            points_per_voxel: 2,
            fds_threshold: 0.95,
            fds_radius: 0.3,
            voxel_sizes: vec![0.2, 0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSettings {
    pub count: usize,
    pub points_per_scene: usize,
    pub blobs_per_scene: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub initial_labeled_per_scene: usize,
}

impl Default for SceneSettings {
    fn default() -> Self {
        SceneSettings {
            count: 5,
            points_per_scene: 10_000,
            blobs_per_scene: 26,
            feature_dim: 16,
            noise: 0.45,
            initial_labeled_per_scene: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub rounds: usize,
    pub budget_fraction: f64,
    pub omega: Omega,
    pub seed: u64,
    pub acquisition: Acquisition,
    pub profile_scope: ProfileScope,
    pub ablation: AblationSwitches,
    pub selection: SelectionSettings,
    pub training: TrainingSettings,
    pub scenes: SceneSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "full".into(),
            rounds: 5,
            budget_fraction: 0.0002,
            omega: Omega::Uniform(0.1),
            seed: 1,
            acquisition: Acquisition::Hierarchical,
            profile_scope: ProfileScope::Dataset,
            ablation: AblationSwitches::default(),
            selection: SelectionSettings::default(),
            training: TrainingSettings::default(),
            scenes: SceneSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.rounds < 1 {
            return Err(SimulatorError::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(SimulatorError::InvalidConfig(
                "budget_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// The scene set plus the label trees a run may use. Scenes are generated
/// once per seed and shared by every config under comparison.
pub struct RunInputs {
    pub scenes: Vec<PointCloudScene>,
    pub hierarchy: LabelHierarchy,
    /// Stand-in tree used when the LLHC switch is off.
    pub alt_hierarchy: Option<LabelHierarchy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub selected_points: usize,
    pub rejected_by_fds: usize,
    pub cumulative_labeled: usize,
    pub pseudo_label_count: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    /// Fine class names in the reporting order used by every IoU vector.
    pub class_names: Vec<String>,
    pub rounds: Vec<RoundReport>,
    pub final_miou: f64,
    pub final_per_class_iou: Vec<Option<f64>>,
    pub total_labeled: usize,
    /// Measured, not reproducible; excluded from serialized reports so
    /// identical (config, seed) runs stay byte-identical.
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Map leaf indices of `from` into leaf indices of `to` by name.
fn leaf_mapping(from: &LabelHierarchy, to: &LabelHierarchy) -> Result<Vec<usize>, SimulatorError> {
    let to_names: HashMap<&str, usize> = to
        .leaf_names()
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n, i))
        .collect();
    let from_names = from.leaf_names();
    if from_names.len() != to_names.len() {
        return Err(SimulatorError::LeafSetMismatch);
    }
    from_names
        .into_iter()
        .map(|n| to_names.get(n).copied().ok_or(SimulatorError::LeafSetMismatch))
        .collect()
}

fn shannon_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

fn margin_uncertainty(probs: &[f64]) -> f64 {
    let mut top1 = f64::NEG_INFINITY;
    let mut top2 = f64::NEG_INFINITY;
    for &p in probs {
        if p > top1 {
            top2 = top1;
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    if top2.is_finite() {
        1.0 - (top1 - top2)
    } else {
        1.0
    }
}

/// Run the full loop: each round trains on the current labels, evaluates,
/// then spends the round budget on new annotations; one final training
/// pass follows the last selection.
pub fn run_active_learning(
    config: &RunConfig,
    inputs: &RunInputs,
) -> Result<RunReport, SimulatorError> {
    let start = Instant::now();
    config.validate()?;
    if inputs.scenes.is_empty() {
        return Err(SimulatorError::EmptyInput);
    }
    let active_h = if config.ablation.llhc {
        &inputs.hierarchy
    } else {
        inputs
            .alt_hierarchy
            .as_ref()
            .ok_or(SimulatorError::AltHierarchyMissing)?
    };
    config.omega.validate(active_h.num_levels())?;

    let feature_dim = inputs.scenes[0]
        .features
        .first()
        .map(|f| f.len())
        .ok_or(SimulatorError::EmptyInput)?;
    for scene in &inputs.scenes {
        if scene.features.iter().any(|f| f.len() != feature_dim) {
            return Err(SimulatorError::LengthMismatch);
        }
    }

    // scene labels live in the primary hierarchy's leaf order; training and
    // scoring run in the active tree's order, evaluation maps back
    let to_active = leaf_mapping(&inputs.hierarchy, active_h)?;
    let to_primary = leaf_mapping(active_h, &inputs.hierarchy)?;
    let active_fine: Vec<Vec<usize>> = inputs
        .scenes
        .iter()
        .map(|s| s.fine_labels.iter().map(|&l| to_active[l]).collect())
        .collect();

    let targets = level_targets(active_h);
    let mut clf = ToyClassifier::new(
        &active_h.level_sizes(),
        feature_dim,
        config.training.ema_rate,
        config.training.pseudo_threshold,
    );
    let mut labeled: Vec<Vec<bool>> = inputs
        .scenes
        .iter()
        .map(|s| s.labeled_mask.clone())
        .collect();
    if labeled.iter().flatten().filter(|&&l| l).count() == 0 {
        return Err(SimulatorError::NoLabeledPoints);
    }

    let total_points: usize = inputs.scenes.iter().map(|s| s.len()).sum();
    let mut id_offsets = Vec::with_capacity(inputs.scenes.len());
    let mut offset = 0u64;
    for scene in &inputs.scenes {
        id_offsets.push(offset);
        offset += scene.len() as u64;
    }
    let selection_scenes: Vec<SelectionScene> = inputs
        .scenes
        .iter()
        .enumerate()
        .map(|(si, s)| SelectionScene {
            ids: (0..s.len() as u64).map(|i| id_offsets[si] + i).collect(),
            positions: s.positions.clone(),
            features: s.features.clone(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut last_eval = None;

    for round in 1..=config.rounds + 1 {
        let train_views: Vec<TrainScene> = inputs
            .scenes
            .iter()
            .enumerate()
            .map(|(si, s)| TrainScene {
                features: &s.features,
                fine_labels: &active_fine[si],
                labeled_mask: &labeled[si],
            })
            .collect();
        let train_seed = rng.gen::<u64>();
        let stats = train(
            &mut clf,
            &train_views,
            &targets,
            &config.training.step_settings(),
            train_seed,
        )?;

        // evaluate the teacher at the fine level, mapped back to the
        // primary label order so every run reports comparable columns
        let mut predictions = Vec::with_capacity(total_points);
        let mut truth = Vec::with_capacity(total_points);
        for (si, scene) in inputs.scenes.iter().enumerate() {
            for i in 0..scene.len() {
                let fine = clf.teacher.predict_fine(&scene.features[i]);
                predictions.push(to_primary[crate::fusion::argmax(&fine)]);
                truth.push(inputs.scenes[si].fine_labels[i]);
            }
        }
        let eval = compute_miou(&predictions, &truth, inputs.hierarchy.num_leaves())?;
        let pseudo = count_pseudo_candidates(&clf, &train_views);
        let cumulative: usize = labeled.iter().flatten().filter(|&&l| l).count();

        if round > config.rounds {
            // final pass: train + evaluate only, the budget is spent
            last_eval = Some((eval, cumulative, pseudo, stats.final_loss));
            break;
        }

        // spend this round's budget
        let budget = budget_from_fraction(config.budget_fraction, total_points);
        let selection_seed = rng.gen::<u64>();
        let (new_labels, rejected) = match config.acquisition {
            Acquisition::Random => {
                let mut pool: Vec<(usize, usize)> = Vec::new();
                for (si, mask) in labeled.iter().enumerate() {
                    for (i, &l) in mask.iter().enumerate() {
                        if !l {
                            pool.push((si, i));
                        }
                    }
                }
                if pool.is_empty() {
                    return Err(SimulatorError::Selection(
                        crate::selection::SelectionError::EmptyUnlabeledPool,
                    ));
                }
                let mut pick_rng = ChaCha8Rng::seed_from_u64(selection_seed);
                pool.shuffle(&mut pick_rng);
                (pool.into_iter().take(budget).collect::<Vec<_>>(), 0)
            }
            _ => {
                let scores = score_round(config, active_h, inputs, &labeled, &clf)?;
                let pooled: Vec<PooledScene> = selection_scenes
                    .iter()
                    .enumerate()
                    .map(|(si, sc)| PooledScene {
                        scene: sc,
                        scores: &scores[si],
                        labeled: &labeled[si],
                    })
                    .collect();
                let sel_config = SelectionConfig {
                    budget_points: budget,
                    points_per_voxel: config.selection.points_per_voxel,
                    fds_threshold: config.selection.fds_threshold,
                    fds_radius: config.selection.fds_radius,
                    voxel_sizes: config.selection.voxel_sizes.clone(),
                };
                let round_sel = multi_scale_select_pooled(&pooled, &sel_config, round)?;
                if round_sel.budget_exhausted_early {
                    log::warn!(
                        "round {round}: budget exhausted early ({} of {budget} selected)",
                        round_sel.selected.len()
                    );
                }
                let picks = round_sel
                    .selected
                    .iter()
                    .map(|p| {
                        let si = match id_offsets.binary_search(&p.id) {
                            Ok(exact) => exact,
                            Err(insert) => insert - 1,
                        };
                        (si, (p.id - id_offsets[si]) as usize)
                    })
                    .collect::<Vec<_>>();
                (picks, round_sel.rejected_by_fds.len())
            }
        };
        let selected_count = new_labels.len();
        for (si, i) in new_labels {
            debug_assert!(!labeled[si][i], "selected an already labeled point");
            labeled[si][i] = true;
        }
        let cumulative_after: usize = labeled.iter().flatten().filter(|&&l| l).count();

        rounds.push(RoundReport {
            round,
            miou: eval.miou,
            per_class_iou: eval.per_class,
            selected_points: selected_count,
            rejected_by_fds: rejected,
            cumulative_labeled: cumulative_after,
            pseudo_label_count: pseudo,
            train_loss: stats.final_loss,
        });
    }

    let (final_eval, total_labeled, final_pseudo, final_loss) =
        last_eval.expect("final pass always runs");
    rounds.push(RoundReport {
        round: config.rounds + 1,
        miou: final_eval.miou,
        per_class_iou: final_eval.per_class.clone(),
        selected_points: 0,
        rejected_by_fds: 0,
        cumulative_labeled: total_labeled,
        pseudo_label_count: final_pseudo,
        train_loss: final_loss,
    });

    Ok(RunReport {
        run_id: config.run_id.clone(),
        seed: config.seed,
        class_names: inputs
            .hierarchy
            .leaf_names()
            .into_iter()
            .map(String::from)
            .collect(),
        final_miou: final_eval.miou,
        final_per_class_iou: final_eval.per_class,
        rounds,
        total_labeled,
        wall_clock: start.elapsed(),
    })
}

/// Per-scene score vectors for every point (labeled entries score 0 and
/// are ignored by selection).
fn score_round(
    config: &RunConfig,
    active_h: &LabelHierarchy,
    inputs: &RunInputs,
    labeled: &[Vec<bool>],
    clf: &ToyClassifier,
) -> Result<Vec<Vec<f64>>, SimulatorError> {
    let mut scores: Vec<Vec<f64>> = inputs
        .scenes
        .iter()
        .map(|s| vec![0.0; s.len()])
        .collect();

    match config.acquisition {
        Acquisition::Random => unreachable!("random acquisition never scores"),
        Acquisition::FlatEntropy | Acquisition::FlatMargin => {
            for (si, scene) in inputs.scenes.iter().enumerate() {
                for i in 0..scene.len() {
                    if labeled[si][i] {
                        continue;
                    }
                    let fine = clf.teacher.predict_fine(&scene.features[i]);
                    scores[si][i] = match config.acquisition {
                        Acquisition::FlatEntropy => shannon_entropy(&fine),
                        _ => margin_uncertainty(&fine),
                    };
                }
            }
        }
        Acquisition::Hierarchical => {
            let u_fn = if config.ablation.lup {
                LabelUncertainty::FlipDistance
            } else {
                LabelUncertainty::Entropy
            };
            let omega = if config.ablation.rup {
                config.omega.clone()
            } else {
                Omega::Uniform(0.0)
            };
            // propagate every unlabeled point, keeping (scene, index)
            let mut propagated: Vec<Vec<(usize, PropagatedUncertainty)>> =
                Vec::with_capacity(inputs.scenes.len());
            for (si, scene) in inputs.scenes.iter().enumerate() {
                let mut per_scene = Vec::new();
                for i in 0..scene.len() {
                    if labeled[si][i] {
                        continue;
                    }
                    let d = clf.teacher.predict(&scene.features[i]);
                    per_scene.push((i, propagate_with(active_h, &d, &omega, u_fn)?));
                }
                propagated.push(per_scene);
            }
            if config.ablation.gaui {
                match config.profile_scope {
                    ProfileScope::Dataset => {
                        let all: Vec<PropagatedUncertainty> = propagated
                            .iter()
                            .flat_map(|s| s.iter().map(|(_, p)| p.clone()))
                            .collect();
                        let profile = global_profile(&all)?;
                        for (si, per_scene) in propagated.iter().enumerate() {
                            for (i, p) in per_scene {
                                scores[si][*i] = score(p, &profile)?;
                            }
                        }
                    }
                    ProfileScope::Scene => {
                        for (si, per_scene) in propagated.iter().enumerate() {
                            if per_scene.is_empty() {
                                continue;
                            }
                            let only: Vec<PropagatedUncertainty> =
                                per_scene.iter().map(|(_, p)| p.clone()).collect();
                            let profile = global_profile(&only)?;
                            for (i, p) in per_scene {
                                scores[si][*i] = score(p, &profile)?;
                            }
                        }
                    }
                }
            } else {
                for (si, per_scene) in propagated.iter().enumerate() {
                    for (i, p) in per_scene {
                        scores[si][*i] = p.per_path.iter().sum();
                    }
                }
            }
        }
    }
    Ok(scores)
}
