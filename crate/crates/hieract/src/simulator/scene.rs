//! Synthetic desk-scale scenes: axis-aligned blobs of points, one fine
//! label per blob, features drawn around hierarchy-consistent class
//! prototypes with Gaussian noise and a small position leak.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::hierarchy::LabelHierarchy;

/// Positions in meters, features dimensionless, fine labels as indices
/// into the generating hierarchy's leaf level.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudScene {
    pub positions: Vec<[f64; 3]>,
    pub features: Vec<Vec<f64>>,
    pub fine_labels: Vec<usize>,
    pub labeled_mask: Vec<bool>,
}

impl PointCloudScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_mask.iter().filter(|&&l| l).count()
    }
}

#[derive(Debug, Clone)]
pub struct Blob {
    pub leaf_index: usize,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub weight: f64,
    pub count: usize,
}

/// Fixed seed for class prototype directions so every scene in a run (and
/// across runs) shares the same class geometry.
const PROTOTYPE_SEED: u64 = 0x9e3779b97f4a7c15;
/// Per-level prototype magnitudes, coarse to fine: coarse groups sit far
/// apart, siblings within a group stay close and confusable.
const LEVEL_SCALE_BASE: f64 = 3.0;
const LEVEL_SCALE_DECAY: f64 = 0.5;
/// Position leak folded into the first three feature dims, scaled by the
/// noise level so a noiseless scene reproduces the prototypes exactly.
const POSITION_LEAK: f64 = 0.05;
/// Room edge length in meters.
pub const ROOM_SIZE: f64 = 8.0;
/// Every fourth leaf is rare: its blobs carry this weight multiplier.
const RARE_WEIGHT: f64 = 0.15;

fn level_scale(level: usize) -> f64 {
    LEVEL_SCALE_BASE * LEVEL_SCALE_DECAY.powi(level as i32)
}

/// One prototype vector per leaf: the sum of scaled unit directions of
/// every node on the leaf's path, so siblings share most of their vector.
pub fn class_prototypes(h: &LabelHierarchy, feature_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED ^ feature_dim as u64);
    let mut node_dirs = Vec::with_capacity(h.num_nodes());
    for _ in 0..h.num_nodes() {
        let mut dir: Vec<f64> = (0..feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= norm);
        node_dirs.push(dir);
    }
    h.leaf_paths()
        .iter()
        .map(|path| {
            let mut proto = vec![0.0; feature_dim];
            for (level, &node) in path.node_ids.iter().enumerate() {
                let scale = level_scale(level);
                for (p, d) in proto.iter_mut().zip(&node_dirs[node]) {
                    *p += scale * d;
                }
            }
            proto
        })
        .collect()
}

pub fn is_rare_leaf(leaf_index: usize) -> bool {
    leaf_index % 4 == 3
}

/// Largest-remainder allocation of `total` points over blob weights.
fn allocate_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in rest.iter().take(total - assigned) {
        counts[*i] += 1;
    }
    counts
}

pub fn generate_scene(
    h: &LabelHierarchy,
    num_points: usize,
    num_blobs: usize,
    noise: f64,
    feature_dim: usize,
    seed: u64,
) -> PointCloudScene {
    generate_scene_detailed(h, num_points, num_blobs, noise, feature_dim, seed).0
}

pub fn generate_scene_detailed(
    h: &LabelHierarchy,
    num_points: usize,
    num_blobs: usize,
    noise: f64,
    feature_dim: usize,
    seed: u64,
) -> (PointCloudScene, Vec<Blob>) {
    assert!(num_blobs >= 1, "at least one blob");
    assert!(num_points >= 1, "at least one point");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = class_prototypes(h, feature_dim);
    let num_leaves = h.num_leaves();

    // first cycle covers every leaf once (when there are enough blobs),
    // the rest draw random leaves
    let mut blobs: Vec<Blob> = (0..num_blobs)
        .map(|i| {
            let leaf_index = if i < num_leaves {
                i
            } else {
                rng.gen_range(0..num_leaves)
            };
            let center = [
                rng.gen_range(0.0..ROOM_SIZE),
                rng.gen_range(0.0..ROOM_SIZE),
                rng.gen_range(0.0..ROOM_SIZE),
            ];
            let extent = [
                rng.gen_range(0.4..1.6),
                rng.gen_range(0.4..1.6),
                rng.gen_range(0.4..1.6),
            ];
            let mut weight = rng.gen_range(0.5..1.5);
            if is_rare_leaf(leaf_index) {
                weight *= RARE_WEIGHT;
            }
            Blob {
                leaf_index,
                center,
                extent,
                weight,
                count: 0,
            }
        })
        .collect();
    let counts = allocate_counts(
        &blobs.iter().map(|b| b.weight).collect::<Vec<_>>(),
        num_points,
    );
    for (b, c) in blobs.iter_mut().zip(&counts) {
        b.count = *c;
    }

    let mut positions = Vec::with_capacity(num_points);
    let mut features = Vec::with_capacity(num_points);
    let mut fine_labels = Vec::with_capacity(num_points);
    for blob in &blobs {
        for _ in 0..blob.count {
            let pos = [
                blob.center[0] + rng.gen_range(-0.5..0.5) * blob.extent[0],
                blob.center[1] + rng.gen_range(-0.5..0.5) * blob.extent[1],
                blob.center[2] + rng.gen_range(-0.5..0.5) * blob.extent[2],
            ];
            let mut feat: Vec<f64> = prototypes[blob.leaf_index]
                .iter()
                .map(|p| p + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for axis in 0..3.min(feature_dim) {
                feat[axis] += POSITION_LEAK * noise * pos[axis];
            }
            positions.push(pos);
            features.push(feat);
            fine_labels.push(blob.leaf_index);
        }
    }

    (
        PointCloudScene {
            labeled_mask: vec![false; positions.len()],
            positions,
            features,
            fine_labels,
        },
        blobs,
    )
}

/// Mark `count` random unlabeled points per scene as labeled, in place.
/// The bootstrap seed is independent of any acquisition strategy so every
/// config starts from the same labeled set.
pub fn bootstrap_labels(scenes: &mut [PointCloudScene], count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b007);
    for scene in scenes.iter_mut() {
        let mut candidates: Vec<usize> = (0..scene.len())
            .filter(|&i| !scene.labeled_mask[i])
            .collect();
        candidates.shuffle(&mut rng);
        for &i in candidates.iter().take(count) {
            scene.labeled_mask[i] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::s3dis_fixture;

    #[test]
    fn noiseless_features_equal_prototypes_exactly() {
        let h = s3dis_fixture();
        let scene = generate_scene(&h, 200, 13, 0.0, 16, 1);
        let prototypes = class_prototypes(&h, 16);
        for i in 0..scene.len() {
            let proto = &prototypes[scene.fine_labels[i]];
            assert_eq!(&scene.features[i], proto, "point {i}");
        }
    }

    #[test]
    fn noisy_features_carry_the_position_leak() {
        let h = s3dis_fixture();
        let noise = 0.4;
        let scene = generate_scene(&h, 500, 13, noise, 16, 2);
        let prototypes = class_prototypes(&h, 16);
        // the leak shifts the mean of (feature - prototype) along each of
        // the first three dims toward leak * mean(position)
        for axis in 0..3 {
            let mut diff = 0.0;
            let mut pos = 0.0;
            for i in 0..scene.len() {
                diff += scene.features[i][axis] - prototypes[scene.fine_labels[i]][axis];
                pos += scene.positions[i][axis];
            }
            diff /= scene.len() as f64;
            pos /= scene.len() as f64;
            let expected = POSITION_LEAK * noise * pos;
            assert!(
                (diff - expected).abs() < 0.1,
                "axis {axis}: mean residual {diff}, expected near {expected}"
            );
        }
    }

    #[test]
    fn same_seed_reproduces_scene_exactly() {
        let h = s3dis_fixture();
        let a = generate_scene(&h, 500, 20, 0.4, 8, 42);
        let b = generate_scene(&h, 500, 20, 0.4, 8, 42);
        assert_eq!(a, b);
        let c = generate_scene(&h, 500, 20, 0.4, 8, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn histogram_matches_blob_allocation() {
        let h = s3dis_fixture();
        let (scene, blobs) = generate_scene_detailed(&h, 10_000, 26, 0.3, 16, 7);
        assert_eq!(scene.len(), 10_000);
        let mut histogram = vec![0usize; h.num_leaves()];
        for &l in &scene.fine_labels {
            histogram[l] += 1;
        }
        let mut expected = vec![0usize; h.num_leaves()];
        let total_weight: f64 = blobs.iter().map(|b| b.weight).sum();
        for b in &blobs {
            expected[b.leaf_index] += b.count;
            // each blob's count is within one point of its exact share
            let share = b.weight / total_weight * 10_000.0;
            assert!(
                (b.count as f64 - share).abs() <= 1.0,
                "blob share {share}, count {}",
                b.count
            );
        }
        assert_eq!(histogram, expected);
    }

    #[test]
    fn bootstrap_marks_the_requested_count() {
        let h = s3dis_fixture();
        let mut scenes = vec![
            generate_scene(&h, 100, 13, 0.3, 8, 1),
            generate_scene(&h, 100, 13, 0.3, 8, 2),
        ];
        bootstrap_labels(&mut scenes, 5, 9);
        for s in &scenes {
            assert_eq!(s.labeled_count(), 5);
        }
        // deterministic
        let mut again = vec![
            generate_scene(&h, 100, 13, 0.3, 8, 1),
            generate_scene(&h, 100, 13, 0.3, 8, 2),
        ];
        bootstrap_labels(&mut again, 5, 9);
        assert_eq!(scenes, again);
    }
}
