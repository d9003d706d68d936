//! Cross-level distribution fusion: per-level linear encoders with ReLU,
//! attention weights over the encoded levels, a fusion MLP, and a fine-level
//! classifier. Training is hand-rolled gradient descent; the backward pass
//! is exact and verified against finite differences in the test suite.

use std::io::{Read, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;
use crate::uncertainty::MultiLevelDistribution;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("level {level}: expected {expected} inputs, got {got}")]
    ShapeMismatch {
        level: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} levels, got {got}")]
    LevelCountMismatch { expected: usize, got: usize },
    #[error("target label {got} out of range (fine level has {classes} classes)")]
    BadTarget { got: usize, classes: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("baseline weights: expected {expected}, got {got}")]
    BadWeights { expected: usize, got: usize },
    #[error("distributions sum to zero after expansion")]
    DegenerateCombination,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint written for hierarchy {expected}, got {got}")]
    HierarchyHashMismatch { expected: String, got: String },
}

/// Dense row-major matrix, just big enough for this module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// y = self * x
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }

    /// y = self^T * x
    fn matvec_t(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        for v in y.iter_mut() {
            *v = 0.0;
        }
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let xr = x[r];
            for (c, w) in row.iter().enumerate() {
                y[c] += w * xr;
            }
        }
    }

    /// self += scale * (a outer b)
    fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += scale * ar * bc;
            }
        }
    }
}

/// All trainable tensors for the fusion head of one hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub level_sizes: Vec<usize>,
    pub hidden_dim: usize,
    /// One encoder per level: hidden_dim x |L_i| plus a hidden_dim bias.
    pub enc_w: Vec<Matrix>,
    pub enc_b: Vec<Vec<f64>>,
    /// Attention row vector: one logit per encoded level.
    pub attn_w: Vec<f64>,
    pub mlp_w: Matrix,
    pub mlp_b: Vec<f64>,
    pub cls_w: Matrix,
    pub cls_b: Vec<f64>,
}

impl FusionParams {
    /// Fan-scaled uniform init, zero biases.
    pub fn new_seeded(level_sizes: &[usize], hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let enc_w = level_sizes
            .iter()
            .map(|&n| Matrix::uniform(hidden_dim, n, bound(n, hidden_dim), &mut rng))
            .collect();
        let enc_b = level_sizes.iter().map(|_| vec![0.0; hidden_dim]).collect();
        let attn_w = {
            let b = bound(hidden_dim, 1);
            (0..hidden_dim).map(|_| rng.gen_range(-b..=b)).collect()
        };
        let mlp_w = Matrix::uniform(hidden_dim, hidden_dim, bound(hidden_dim, hidden_dim), &mut rng);
        let classes = *level_sizes.last().expect("at least one level");
        let cls_w = Matrix::uniform(classes, hidden_dim, bound(hidden_dim, classes), &mut rng);
        FusionParams {
            level_sizes: level_sizes.to_vec(),
            hidden_dim,
            enc_w,
            enc_b,
            attn_w,
            mlp_w,
            mlp_b: vec![0.0; hidden_dim],
            cls_w,
            cls_b: vec![0.0; classes],
        }
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn num_classes(&self) -> usize {
        *self.level_sizes.last().unwrap()
    }

    fn check_input(&self, d: &MultiLevelDistribution) -> Result<(), FusionError> {
        if d.per_level.len() != self.num_levels() {
            return Err(FusionError::LevelCountMismatch {
                expected: self.num_levels(),
                got: d.per_level.len(),
            });
        }
        for (level, (probs, &expected)) in
            d.per_level.iter().zip(&self.level_sizes).enumerate()
        {
            if probs.len() != expected {
                return Err(FusionError::ShapeMismatch {
                    level,
                    expected,
                    got: probs.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub per_level_weights: Vec<f64>,
    pub fused_hidden: Vec<f64>,
    pub fine_distribution: Vec<f64>,
}

/// Intermediate activations kept around for the backward pass.
struct ForwardTrace {
    enc_pre: Vec<Vec<f64>>,
    enc_post: Vec<Vec<f64>>,
    attn_logits: Vec<f64>,
    alpha: Vec<f64>,
    fused: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_post: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn run_forward(params: &FusionParams, d: &MultiLevelDistribution) -> ForwardTrace {
    let h = params.hidden_dim;
    let levels = params.num_levels();
    let mut enc_pre = Vec::with_capacity(levels);
    let mut enc_post = Vec::with_capacity(levels);
    let mut attn_logits = Vec::with_capacity(levels);
    for i in 0..levels {
        let mut pre = vec![0.0; h];
        params.enc_w[i].matvec(&d.per_level[i], &mut pre);
        for (p, b) in pre.iter_mut().zip(&params.enc_b[i]) {
            *p += b;
        }
        let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        attn_logits.push(params.attn_w.iter().zip(&post).map(|(w, v)| w * v).sum());
        enc_pre.push(pre);
        enc_post.push(post);
    }
    let mut alpha = vec![0.0; levels];
    softmax_into(&attn_logits, &mut alpha);

    let mut fused = vec![0.0; h];
    for (a, post) in alpha.iter().zip(&enc_post) {
        for (f, v) in fused.iter_mut().zip(post) {
            *f += a * v;
        }
    }

    let mut mlp_pre = vec![0.0; h];
    params.mlp_w.matvec(&fused, &mut mlp_pre);
    for (p, b) in mlp_pre.iter_mut().zip(&params.mlp_b) {
        *p += b;
    }
    let mlp_post: Vec<f64> = mlp_pre.iter().map(|&v| v.max(0.0)).collect();

    let classes = params.num_classes();
    let mut logits = vec![0.0; classes];
    params.cls_w.matvec(&mlp_post, &mut logits);
    for (l, b) in logits.iter_mut().zip(&params.cls_b) {
        *l += b;
    }
    let mut probs = vec![0.0; classes];
    softmax_into(&logits, &mut probs);

    ForwardTrace {
        enc_pre,
        enc_post,
        attn_logits,
        alpha,
        fused,
        mlp_pre,
        mlp_post,
        logits,
        probs,
    }
}

/// Encode each level, attention-weight the encodings, fuse, classify.
pub fn fusion_forward(
    params: &FusionParams,
    d: &MultiLevelDistribution,
) -> Result<FusionOutput, FusionError> {
    params.check_input(d)?;
    let trace = run_forward(params, d);
    Ok(FusionOutput {
        per_level_weights: trace.alpha,
        fused_hidden: trace.fused,
        fine_distribution: trace.probs,
    })
}

/// Gradients with the same shapes as [`FusionParams`].
#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub enc_w: Vec<Matrix>,
    pub enc_b: Vec<Vec<f64>>,
    pub attn_w: Vec<f64>,
    pub mlp_w: Matrix,
    pub mlp_b: Vec<f64>,
    pub cls_w: Matrix,
    pub cls_b: Vec<f64>,
}

impl FusionGradients {
    fn zeros(params: &FusionParams) -> Self {
        FusionGradients {
            enc_w: params
                .level_sizes
                .iter()
                .map(|&n| Matrix::zeros(params.hidden_dim, n))
                .collect(),
            enc_b: params
                .level_sizes
                .iter()
                .map(|_| vec![0.0; params.hidden_dim])
                .collect(),
            attn_w: vec![0.0; params.hidden_dim],
            mlp_w: Matrix::zeros(params.hidden_dim, params.hidden_dim),
            mlp_b: vec![0.0; params.hidden_dim],
            cls_w: Matrix::zeros(params.num_classes(), params.hidden_dim),
            cls_b: vec![0.0; params.num_classes()],
        }
    }

    fn add_scaled(&mut self, other: &FusionGradients, scale: f64) {
        for (a, b) in self.enc_w.iter_mut().zip(&other.enc_w) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        for (a, b) in self.enc_b.iter_mut().zip(&other.enc_b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (x, y) in self.attn_w.iter_mut().zip(&other.attn_w) {
            *x += scale * y;
        }
        for (x, y) in self.mlp_w.data.iter_mut().zip(&other.mlp_w.data) {
            *x += scale * y;
        }
        for (x, y) in self.mlp_b.iter_mut().zip(&other.mlp_b) {
            *x += scale * y;
        }
        for (x, y) in self.cls_w.data.iter_mut().zip(&other.cls_w.data) {
            *x += scale * y;
        }
        for (x, y) in self.cls_b.iter_mut().zip(&other.cls_b) {
            *x += scale * y;
        }
    }
}

/// Exact cross-entropy gradients for one sample.
pub fn fusion_backward(
    params: &FusionParams,
    d: &MultiLevelDistribution,
    target: usize,
) -> Result<(FusionGradients, f64), FusionError> {
    params.check_input(d)?;
    let classes = params.num_classes();
    if target >= classes {
        return Err(FusionError::BadTarget {
            got: target,
            classes,
        });
    }
    let h = params.hidden_dim;
    let levels = params.num_levels();
    let trace = run_forward(params, d);
    let loss = -trace.probs[target].max(f64::MIN_POSITIVE).ln();

    let mut g = FusionGradients::zeros(params);

    // softmax + cross entropy
    let mut dlogits = trace.probs.clone();
    dlogits[target] -= 1.0;

    // classifier
    g.cls_w.add_outer(&dlogits, &trace.mlp_post, 1.0);
    g.cls_b.copy_from_slice(&dlogits);
    let mut dmlp_post = vec![0.0; h];
    params.cls_w.matvec_t(&dlogits, &mut dmlp_post);

    // fusion MLP
    let dmlp_pre: Vec<f64> = dmlp_post
        .iter()
        .zip(&trace.mlp_pre)
        .map(|(&grad, &pre)| if pre > 0.0 { grad } else { 0.0 })
        .collect();
    g.mlp_w.add_outer(&dmlp_pre, &trace.fused, 1.0);
    g.mlp_b.copy_from_slice(&dmlp_pre);
    let mut dfused = vec![0.0; h];
    params.mlp_w.matvec_t(&dmlp_pre, &mut dfused);

    // fused = sum_i alpha_i h_i
    let dalpha: Vec<f64> = trace
        .enc_post
        .iter()
        .map(|post| post.iter().zip(&dfused).map(|(v, dg)| v * dg).sum())
        .collect();
    let mut dh: Vec<Vec<f64>> = (0..levels)
        .map(|i| dfused.iter().map(|&dg| trace.alpha[i] * dg).collect())
        .collect();

    // alpha = softmax(attention logits)
    let inner: f64 = trace.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
    let dlogit: Vec<f64> = trace
        .alpha
        .iter()
        .zip(&dalpha)
        .map(|(a, da)| a * (da - inner))
        .collect();

    // logit_i = attn_w . h_i
    for i in 0..levels {
        for (gw, hv) in g.attn_w.iter_mut().zip(&trace.enc_post[i]) {
            *gw += dlogit[i] * hv;
        }
        for (dhv, wv) in dh[i].iter_mut().zip(&params.attn_w) {
            *dhv += dlogit[i] * wv;
        }
    }

    // encoders
    for i in 0..levels {
        let dpre: Vec<f64> = dh[i]
            .iter()
            .zip(&trace.enc_pre[i])
            .map(|(&grad, &pre)| if pre > 0.0 { grad } else { 0.0 })
            .collect();
        g.enc_w[i].add_outer(&dpre, &d.per_level[i], 1.0);
        g.enc_b[i].copy_from_slice(&dpre);
    }

    // keep the attention logits around for debug builds only
    debug_assert_eq!(trace.attn_logits.len(), levels);
    debug_assert_eq!(trace.logits.len(), classes);

    Ok((g, loss))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.5,
            seed: 0,
            batch_size: 32,
        }
    }
}

fn apply_update(params: &mut FusionParams, g: &FusionGradients, lr: f64) {
    for (w, gw) in params.enc_w.iter_mut().zip(&g.enc_w) {
        for (x, y) in w.data.iter_mut().zip(&gw.data) {
            *x -= lr * y;
        }
    }
    for (b, gb) in params.enc_b.iter_mut().zip(&g.enc_b) {
        for (x, y) in b.iter_mut().zip(gb) {
            *x -= lr * y;
        }
    }
    for (x, y) in params.attn_w.iter_mut().zip(&g.attn_w) {
        *x -= lr * y;
    }
    for (x, y) in params.mlp_w.data.iter_mut().zip(&g.mlp_w.data) {
        *x -= lr * y;
    }
    for (x, y) in params.mlp_b.iter_mut().zip(&g.mlp_b) {
        *x -= lr * y;
    }
    for (x, y) in params.cls_w.data.iter_mut().zip(&g.cls_w.data) {
        *x -= lr * y;
    }
    for (x, y) in params.cls_b.iter_mut().zip(&g.cls_b) {
        *x -= lr * y;
    }
}

/// Mini-batch gradient descent on cross entropy. Deterministic under a
/// fixed seed; returns the updated parameters and per-epoch mean loss.
pub fn fusion_train(
    mut params: FusionParams,
    dataset: &[(MultiLevelDistribution, usize)],
    config: &TrainConfig,
) -> Result<(FusionParams, Vec<f64>), FusionError> {
    if dataset.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    for (d, label) in dataset {
        params.check_input(d)?;
        if *label >= params.num_classes() {
            return Err(FusionError::BadTarget {
                got: *label,
                classes: params.num_classes(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut acc = FusionGradients::zeros(&params);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (d, label) = &dataset[idx];
                let (g, loss) = fusion_backward(&params, d, *label)?;
                acc.add_scaled(&g, 1.0 / batch.len() as f64);
                batch_loss += loss;
            }
            epoch_loss += batch_loss;
            apply_update(&mut params, &acc, config.learning_rate);
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(FusionError::Divergence { epoch });
        }
        curve.push(mean);
    }
    Ok((params, curve))
}

/// Untrained fusion baselines compared against the attention module.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineFusion {
    SimpleAdd,
    /// Fixed per-level weights, coarse to fine.
    WeightedAdd(Vec<f64>),
}

/// Expand every level to the fine dimension by copying each ancestor's
/// probability to all of its leaves, combine, and renormalize.
pub fn fuse_baseline(
    h: &LabelHierarchy,
    d: &MultiLevelDistribution,
    mode: &BaselineFusion,
) -> Result<Vec<f64>, FusionError> {
    let levels = h.num_levels();
    if d.per_level.len() != levels {
        return Err(FusionError::LevelCountMismatch {
            expected: levels,
            got: d.per_level.len(),
        });
    }
    for (level, probs) in d.per_level.iter().enumerate() {
        if probs.len() != h.level(level).len() {
            return Err(FusionError::ShapeMismatch {
                level,
                expected: h.level(level).len(),
                got: probs.len(),
            });
        }
    }
    let weights = match mode {
        BaselineFusion::SimpleAdd => vec![1.0; levels],
        BaselineFusion::WeightedAdd(w) => {
            if w.len() != levels {
                return Err(FusionError::BadWeights {
                    expected: levels,
                    got: w.len(),
                });
            }
            w.clone()
        }
    };
    let m = h.num_leaves();
    let mut combined = vec![0.0; m];
    for (leaf_pos, path) in h.leaf_paths().iter().enumerate() {
        for (level, &node) in path.node_ids.iter().enumerate() {
            let p = d.per_level[level][h.index_in_level(node)];
            combined[leaf_pos] += weights[level] * p;
        }
    }
    let total: f64 = combined.iter().sum();
    if !(total > 0.0) {
        return Err(FusionError::DegenerateCombination);
    }
    for v in combined.iter_mut() {
        *v /= total;
    }
    Ok(combined)
}

const CHECKPOINT_FORMAT: &str = "hieract-fusion-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    hidden_dim: usize,
    level_sizes: Vec<usize>,
    hierarchy_hash: String,
    value_count: usize,
}

fn tensor_order(params: &FusionParams) -> Vec<(&'static str, Vec<f64>)> {
    let mut out: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for w in &params.enc_w {
        out.push(("enc_w", w.data.clone()));
    }
    for b in &params.enc_b {
        out.push(("enc_b", b.clone()));
    }
    out.push(("attn_w", params.attn_w.clone()));
    out.push(("mlp_w", params.mlp_w.data.clone()));
    out.push(("mlp_b", params.mlp_b.clone()));
    out.push(("cls_w", params.cls_w.data.clone()));
    out.push(("cls_b", params.cls_b.clone()));
    out
}

/// Checkpoint: one JSON header line, then the tensors as little-endian f64
/// in a fixed order (encoders coarse→fine, weights before biases, then
/// attention, MLP, classifier).
pub fn save_checkpoint<W: Write>(
    writer: &mut W,
    params: &FusionParams,
    hierarchy_hash: &str,
) -> Result<(), FusionError> {
    let tensors = tensor_order(params);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        hidden_dim: params.hidden_dim,
        level_sizes: params.level_sizes.clone(),
        hierarchy_hash: hierarchy_hash.into(),
        value_count: tensors.iter().map(|(_, t)| t.len()).sum(),
    };
    let mut line = serde_json::to_string(&header).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
    line.push('\n');
    writer
        .write_all(line.as_bytes())
        .map_err(|e| FusionError::Checkpoint(e.to_string()))?;
    for (_, tensor) in &tensors {
        for v in tensor {
            writer
                .write_all(&v.to_le_bytes())
                .map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(
    reader: &mut R,
    expected_hash: Option<&str>,
) -> Result<FusionParams, FusionError> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| FusionError::Checkpoint(e.to_string()))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FusionError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| FusionError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(FusionError::Checkpoint(format!(
            "unknown format '{}'",
            header.format
        )));
    }
    if let Some(expected) = expected_hash {
        if header.hierarchy_hash != expected {
            return Err(FusionError::HierarchyHashMismatch {
                expected: expected.into(),
                got: header.hierarchy_hash,
            });
        }
    }
    let body = &bytes[newline + 1..];
    if body.len() != header.value_count * 8 {
        return Err(FusionError::Checkpoint(format!(
            "expected {} values, file holds {} bytes",
            header.value_count,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Result<Vec<f64>, FusionError> {
        let out: Vec<f64> = values.by_ref().take(n).collect();
        if out.len() != n {
            return Err(FusionError::Checkpoint("truncated tensor data".into()));
        }
        Ok(out)
    };
    let h = header.hidden_dim;
    let mut enc_w = Vec::new();
    for &n in &header.level_sizes {
        enc_w.push(Matrix {
            rows: h,
            cols: n,
            data: take(h * n)?,
        });
    }
    let mut enc_b = Vec::new();
    for _ in &header.level_sizes {
        enc_b.push(take(h)?);
    }
    let attn_w = take(h)?;
    let mlp_w = Matrix { rows: h, cols: h, data: take(h * h)? };
    let mlp_b = take(h)?;
    let classes = *header
        .level_sizes
        .last()
        .ok_or_else(|| FusionError::Checkpoint("empty level sizes".into()))?;
    let cls_w = Matrix { rows: classes, cols: h, data: take(classes * h)? };
    let cls_b = take(classes)?;
    Ok(FusionParams {
        level_sizes: header.level_sizes,
        hidden_dim: h,
        enc_w,
        enc_b,
        attn_w,
        mlp_w,
        mlp_b,
        cls_w,
        cls_b,
    })
}

/// Fine-level argmax accuracy of the attention module on a labeled set.
pub fn evaluate_accuracy(
    params: &FusionParams,
    dataset: &[(MultiLevelDistribution, usize)],
) -> Result<f64, FusionError> {
    if dataset.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let mut hits = 0usize;
    for (d, label) in dataset {
        let out = fusion_forward(params, d)?;
        let pred = argmax(&out.fine_distribution);
        if pred == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_hierarchy, LabelNode};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dist(rng: &mut ChaCha8Rng, sizes: &[usize]) -> MultiLevelDistribution {
        let per_level = sizes
            .iter()
            .map(|&n| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        MultiLevelDistribution::new(per_level)
    }

    #[test]
    fn zero_attention_weights_give_uniform_alpha() {
        let sizes = [2usize, 3, 5];
        let mut params = FusionParams::new_seeded(&sizes, 8, 1);
        params.attn_w.iter_mut().for_each(|w| *w = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = tiny_dist(&mut rng, &sizes);
        let out = fusion_forward(&params, &d).unwrap();
        for a in &out.per_level_weights {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_level_degenerates_to_plain_classifier_path() {
        let sizes = [4usize];
        let params = FusionParams::new_seeded(&sizes, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = tiny_dist(&mut rng, &sizes);
        let out = fusion_forward(&params, &d).unwrap();
        assert_eq!(out.per_level_weights, vec![1.0]);
        let sum: f64 = out.fine_distribution.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let params = FusionParams::new_seeded(&[2, 3], 4, 0);
        let d = MultiLevelDistribution::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            fusion_forward(&params, &d),
            Err(FusionError::ShapeMismatch { level: 1, .. })
        ));
    }

    #[test]
    fn dead_relu_kills_encoder_gradients() {
        let sizes = [2usize, 3];
        let mut params = FusionParams::new_seeded(&sizes, 4, 5);
        // zero inputs and zero biases: every encoder pre-activation is 0,
        // relu'(0) = 0, so encoder weight gradients vanish.
        params.enc_b.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
        let d = MultiLevelDistribution::new(vec![vec![0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let (g, _) = fusion_backward(&params, &d, 1).unwrap();
        for gw in &g.enc_w {
            assert!(gw.data.iter().all(|&v| v == 0.0));
        }
        for gb in &g.enc_b {
            assert!(gb.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uniform_output_loss_is_log_classes() {
        let sizes = [2usize, 5];
        let mut params = FusionParams::new_seeded(&sizes, 4, 6);
        // zero classifier -> uniform output regardless of the trunk
        params.cls_w.data.iter_mut().for_each(|v| *v = 0.0);
        params.cls_b.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = tiny_dist(&mut rng, &sizes);
        let (_, loss) = fusion_backward(&params, &d, 3).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_flat_curve() {
        let sizes = [2usize, 3];
        let params = FusionParams::new_seeded(&sizes, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<_> = (0..6)
            .map(|i| (tiny_dist(&mut rng, &sizes), i % 3))
            .collect();
        let cfg = TrainConfig { epochs: 5, learning_rate: 0.0, seed: 1, batch_size: 2 };
        let (trained, curve) = fusion_train(params.clone(), &data, &cfg).unwrap();
        assert_eq!(trained, params);
        for w in curve.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let sizes = [2usize, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<_> = (0..20)
            .map(|i| (tiny_dist(&mut rng, &sizes), i % 4))
            .collect();
        let cfg = TrainConfig { epochs: 8, learning_rate: 0.3, seed: 42, batch_size: 4 };
        let run = |seed| {
            let params = FusionParams::new_seeded(&sizes, 8, seed);
            fusion_train(params, &data, &cfg).unwrap()
        };
        let (p1, c1) = run(77);
        let (p2, c2) = run(77);
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
    }

    fn two_level_hierarchy() -> LabelHierarchy {
        build_hierarchy(vec![
            LabelNode { id: 0, name: "A".into(), level: 0, parent: None },
            LabelNode { id: 1, name: "B".into(), level: 0, parent: None },
            LabelNode { id: 2, name: "A1".into(), level: 1, parent: Some(0) },
            LabelNode { id: 3, name: "A2".into(), level: 1, parent: Some(0) },
            LabelNode { id: 4, name: "B1".into(), level: 1, parent: Some(1) },
        ])
        .unwrap()
    }

    #[test]
    fn baseline_identical_distributions_come_back_unchanged() {
        // pass-through chain: every level has one node, all levels "equal"
        let h = build_hierarchy(vec![
            LabelNode { id: 0, name: "a".into(), level: 0, parent: None },
            LabelNode { id: 1, name: "b".into(), level: 1, parent: Some(0) },
            LabelNode { id: 2, name: "c".into(), level: 2, parent: Some(1) },
        ])
        .unwrap();
        let d = MultiLevelDistribution::new(vec![vec![1.0], vec![1.0], vec![1.0]]);
        let fused = fuse_baseline(&h, &d, &BaselineFusion::SimpleAdd).unwrap();
        assert_eq!(fused, vec![1.0]);
    }

    #[test]
    fn baseline_selector_weights_pick_the_coarse_expansion() {
        let h = two_level_hierarchy();
        let d = MultiLevelDistribution::new(vec![vec![0.6, 0.4], vec![0.2, 0.3, 0.5]]);
        let fused =
            fuse_baseline(&h, &d, &BaselineFusion::WeightedAdd(vec![1.0, 0.0])).unwrap();
        // coarse expanded by copying: (0.6, 0.6, 0.4), renormalized
        let want = [0.6 / 1.6, 0.6 / 1.6, 0.4 / 1.6];
        for (g, w) in fused.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_simple_add_hand_example() {
        let h = two_level_hierarchy();
        let d = MultiLevelDistribution::new(vec![vec![0.6, 0.4], vec![0.2, 0.3, 0.5]]);
        let fused = fuse_baseline(&h, &d, &BaselineFusion::SimpleAdd).unwrap();
        // combined = (0.6+0.2, 0.6+0.3, 0.4+0.5) = (0.8, 0.9, 0.9), total 2.6
        let want = [0.8 / 2.6, 0.9 / 2.6, 0.9 / 2.6];
        for (g, w) in fused.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_leaves_and_classifier_rows_permutes_output() {
        let sizes = [2usize, 4];
        let params = FusionParams::new_seeded(&sizes, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = tiny_dist(&mut rng, &sizes);
        let out = fusion_forward(&params, &d).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut permuted = params.clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..params.hidden_dim {
                *permuted.cls_w.at_mut(new_row, c) = params.cls_w.at(old_row, c);
            }
            permuted.cls_b[new_row] = params.cls_b[old_row];
        }
        let out_perm = fusion_forward(&permuted, &d).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert!(
                (out_perm.fine_distribution[new_row] - out.fine_distribution[old_row]).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = FusionParams::new_seeded(&[3, 6, 13], 16, 99);
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &params, "abc123").unwrap();
        let loaded = load_checkpoint(&mut std::io::Cursor::new(&buf), Some("abc123")).unwrap();
        assert_eq!(loaded, params);
        let err = load_checkpoint(&mut std::io::Cursor::new(&buf), Some("zzz")).unwrap_err();
        assert!(matches!(err, FusionError::HierarchyHashMismatch { .. }));
    }

    #[test]
    fn linearly_separable_task_reaches_high_accuracy() {
        // fine distribution alone determines the label
        let sizes = [2usize, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut data = Vec::new();
        for _ in 0..120 {
            let label = rng.gen_range(0..4usize);
            let mut fine = vec![0.05; 4];
            fine[label] = 0.85;
            let coarse = vec![0.5, 0.5];
            data.push((MultiLevelDistribution::new(vec![coarse, fine]), label));
        }
        let params = FusionParams::new_seeded(&sizes, 16, 21);
        let cfg = TrainConfig { epochs: 200, learning_rate: 0.5, seed: 5, batch_size: 16 };
        let (trained, curve) = fusion_train(params, &data, &cfg).unwrap();
        assert!(curve.last().unwrap() < &0.2, "final loss {}", curve.last().unwrap());
        let acc = evaluate_accuracy(&trained, &data).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }
}
