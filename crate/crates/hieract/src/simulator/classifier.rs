//! The desk-scale stand-in for a segmentation backbone: independent linear
//! softmax heads per hierarchy level over shared point features, trained as
//! a teacher–student pair. The student learns from labeled and pseudo-
//! labeled points; the teacher trails it as an exponential moving average
//! and supplies the pseudo-labels.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::hierarchy::LabelHierarchy;
use crate::uncertainty::MultiLevelDistribution;

use super::SimulatorError;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub classes: usize,
    pub feature_dim: usize,
    /// Row-major `classes x feature_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    fn zeros(classes: usize, feature_dim: usize) -> Self {
        LinearHead {
            classes,
            feature_dim,
            weights: vec![0.0; classes * feature_dim],
            bias: vec![0.0; classes],
        }
    }

    fn logits(&self, features: &[f64], out: &mut [f64]) {
        for c in 0..self.classes {
            let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            out[c] = self.bias[c] + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn softmax(&self, features: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        self.logits(features, &mut out);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
        out
    }
}

/// One head per hierarchy level, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStack {
    pub heads: Vec<LinearHead>,
}

impl HeadStack {
    pub fn zeros(level_sizes: &[usize], feature_dim: usize) -> Self {
        HeadStack {
            heads: level_sizes
                .iter()
                .map(|&n| LinearHead::zeros(n, feature_dim))
                .collect(),
        }
    }

    /// Per-level softmax for one point.
    pub fn predict(&self, features: &[f64]) -> MultiLevelDistribution {
        MultiLevelDistribution::new(self.heads.iter().map(|h| h.softmax(features)).collect())
    }

    /// Fine-level softmax only; cheaper when only pseudo-labels are needed.
    pub fn predict_fine(&self, features: &[f64]) -> Vec<f64> {
        self.heads.last().expect("at least one level").softmax(features)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    pub student: HeadStack,
    pub teacher: HeadStack,
    pub ema_rate: f64,
    pub pseudo_threshold: f64,
}

impl ToyClassifier {
    /// Zero-initialized heads; the teacher starts equal to the student.
    pub fn new(
        level_sizes: &[usize],
        feature_dim: usize,
        ema_rate: f64,
        pseudo_threshold: f64,
    ) -> Self {
        let student = HeadStack::zeros(level_sizes, feature_dim);
        ToyClassifier {
            teacher: student.clone(),
            student,
            ema_rate,
            pseudo_threshold,
        }
    }

    fn ema_update(&mut self) {
        let r = self.ema_rate;
        for (t, s) in self.teacher.heads.iter_mut().zip(&self.student.heads) {
            for (tw, sw) in t.weights.iter_mut().zip(&s.weights) {
                *tw = r * *tw + (1.0 - r) * sw;
            }
            for (tb, sb) in t.bias.iter_mut().zip(&s.bias) {
                *tb = r * *tb + (1.0 - r) * sb;
            }
        }
    }
}

/// Per-leaf training targets: `targets[leaf][level]` is the class index at
/// that level along the leaf's path.
pub fn level_targets(h: &LabelHierarchy) -> Vec<Vec<usize>> {
    h.leaf_paths()
        .iter()
        .map(|p| {
            p.node_ids
                .iter()
                .map(|&node| h.index_in_level(node))
                .collect()
        })
        .collect()
}

/// A scene as the trainer sees it: fine labels already in the active
/// hierarchy's leaf order.
pub struct TrainScene<'a> {
    pub features: &'a [Vec<f64>],
    pub fine_labels: &'a [usize],
    pub labeled_mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 500,
            learning_rate: 0.05,
            batch_labeled: 64,
            batch_unlabeled: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub final_loss: f64,
    pub pseudo_contributions: usize,
}

/// Mini-batch training over the pooled labeled set plus teacher pseudo-
/// labels above the confidence threshold (strict `>`). The teacher is
/// EMA-updated after every step.
///
/// Labeled batches are class-balanced (a class with labels is drawn, then
/// one of its points): rare classes would otherwise be drowned out by the
/// pseudo-label stream reinforcing the majority prediction.
pub fn train(
    clf: &mut ToyClassifier,
    scenes: &[TrainScene],
    targets: &[Vec<usize>],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainStats, SimulatorError> {
    let num_leaves = targets.len();
    let mut labeled_by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_leaves];
    let mut labeled_total = 0usize;
    let mut unlabeled_pool: Vec<(usize, usize)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let n = scene.features.len();
        if scene.fine_labels.len() != n || scene.labeled_mask.len() != n {
            return Err(SimulatorError::LengthMismatch);
        }
        for i in 0..n {
            if scene.labeled_mask[i] {
                let label = scene.fine_labels[i];
                if label >= num_leaves {
                    return Err(SimulatorError::InvalidClass(label));
                }
                labeled_by_class[label].push((si, i));
                labeled_total += 1;
            } else {
                unlabeled_pool.push((si, i));
            }
        }
    }
    if labeled_total == 0 {
        return Err(SimulatorError::NoLabeledPoints);
    }
    let classes_with_labels: Vec<usize> = (0..num_leaves)
        .filter(|&c| !labeled_by_class[c].is_empty())
        .collect();

    let num_levels = clf.student.heads.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = TrainStats::default();

    // gradient buffers reused across steps
    let mut grad_w: Vec<Vec<f64>> = clf
        .student
        .heads
        .iter()
        .map(|h| vec![0.0; h.weights.len()])
        .collect();
    let mut grad_b: Vec<Vec<f64>> = clf
        .student
        .heads
        .iter()
        .map(|h| vec![0.0; h.bias.len()])
        .collect();

    for step in 0..settings.steps {
        for g in grad_w.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for g in grad_b.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }

        // (scene, point, fine target in active leaf space)
        let mut batch: Vec<(usize, usize, usize)> = Vec::new();
        for _ in 0..settings.batch_labeled {
            let class = classes_with_labels[rng.gen_range(0..classes_with_labels.len())];
            let members = &labeled_by_class[class];
            let (si, pi) = members[rng.gen_range(0..members.len())];
            batch.push((si, pi, class));
        }
        if !unlabeled_pool.is_empty() {
            for _ in 0..settings.batch_unlabeled {
                let &(si, pi) = &unlabeled_pool[rng.gen_range(0..unlabeled_pool.len())];
                let fine = clf.teacher.predict_fine(&scenes[si].features[pi]);
                let best = crate::fusion::argmax(&fine);
                if fine[best] > clf.pseudo_threshold {
                    batch.push((si, pi, best));
                    stats.pseudo_contributions += 1;
                }
            }
        }

        let batch_len = batch.len() as f64;
        let mut loss = 0.0;
        for &(si, pi, fine_target) in &batch {
            let features = &scenes[si].features[pi];
            let path = &targets[fine_target];
            for (level, head) in clf.student.heads.iter().enumerate() {
                let probs = head.softmax(features);
                let target = path[level];
                loss -= probs[target].max(f64::MIN_POSITIVE).ln();
                for (c, &p) in probs.iter().enumerate() {
                    let delta = (p - if c == target { 1.0 } else { 0.0 }) / batch_len;
                    grad_b[level][c] += delta;
                    let row =
                        &mut grad_w[level][c * head.feature_dim..(c + 1) * head.feature_dim];
                    for (g, x) in row.iter_mut().zip(features) {
                        *g += delta * x;
                    }
                }
            }
        }
        loss /= batch_len.max(1.0) * num_levels as f64;
        if !loss.is_finite() {
            return Err(SimulatorError::Divergence { step });
        }
        stats.final_loss = loss;

        for (head, (gw, gb)) in clf
            .student
            .heads
            .iter_mut()
            .zip(grad_w.iter().zip(grad_b.iter()))
        {
            for (w, g) in head.weights.iter_mut().zip(gw) {
                *w -= settings.learning_rate * g;
            }
            for (b, g) in head.bias.iter_mut().zip(gb) {
                *b -= settings.learning_rate * g;
            }
        }
        clf.ema_update();
    }
    Ok(stats)
}

/// Convenience wrapper for a single scene.
pub fn train_step(
    clf: &mut ToyClassifier,
    scene: &TrainScene,
    targets: &[Vec<usize>],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainStats, SimulatorError> {
    train(
        clf,
        std::slice::from_ref(scene),
        targets,
        settings,
        seed,
    )
}

/// Count unlabeled points whose teacher fine-level confidence clears the
/// pseudo-label threshold.
pub fn count_pseudo_candidates(clf: &ToyClassifier, scenes: &[TrainScene]) -> usize {
    let mut count = 0;
    for scene in scenes {
        for i in 0..scene.features.len() {
            if scene.labeled_mask[i] {
                continue;
            }
            let fine = clf.teacher.predict_fine(&scene.features[i]);
            if fine[crate::fusion::argmax(&fine)] > clf.pseudo_threshold {
                count += 1;
            }
        }
    }
    count
}
