//! The benchmark harness: builds the standard synthetic scene set, runs
//! config/seed grids in parallel, and emits the CSV surfaces consumed by
//! `hieract report` and by external plotting.

use rayon::prelude::*;

use crate::hierarchy::LabelHierarchy;
use crate::presets::{s3dis_fixture, s3dis_scrambled_fixture};

use super::run::{
    run_active_learning, Acquisition, RunConfig, RunInputs, RunReport, SceneSettings,
};
use super::scene::{bootstrap_labels, generate_scene, PointCloudScene};
use super::SimulatorError;

/// Build one seed's scene set: `count` scenes generated from per-scene
/// seeds derived from the run seed, with the bootstrap labels every config
/// shares.
pub fn build_scene_set(
    settings: &SceneSettings,
    h: &LabelHierarchy,
    seed: u64,
) -> Vec<PointCloudScene> {
    let mut scenes: Vec<PointCloudScene> = (0..settings.count)
        .map(|i| {
            generate_scene(
                h,
                settings.points_per_scene,
                settings.blobs_per_scene,
                settings.noise,
                settings.feature_dim,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )
        })
        .collect();
    bootstrap_labels(&mut scenes, settings.initial_labeled_per_scene, seed);
    scenes
}

pub fn standard_inputs(settings: &SceneSettings, seed: u64) -> RunInputs {
    let hierarchy = s3dis_fixture();
    RunInputs {
        scenes: build_scene_set(settings, &hierarchy, seed),
        hierarchy,
        alt_hierarchy: Some(s3dis_scrambled_fixture()),
    }
}

/// The module-comparison grid: the full config, each single-module
/// ablation, and the random-acquisition baseline.
pub fn ablation_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut grid = Vec::new();
    let mut full = base.clone();
    full.run_id = "full".into();
    grid.push(full);
    for (id, f) in [
        ("no-llhc", 0usize),
        ("no-lup", 1),
        ("no-rup", 2),
        ("no-gaui", 3),
    ] {
        let mut c = base.clone();
        c.run_id = id.into();
        match f {
            0 => c.ablation.llhc = false,
            1 => c.ablation.lup = false,
            2 => c.ablation.rup = false,
            _ => c.ablation.gaui = false,
        }
        grid.push(c);
    }
    let mut random = base.clone();
    random.run_id = "random".into();
    random.acquisition = Acquisition::Random;
    grid.push(random);
    grid
}

/// Run every (config, seed) cell, scenes shared per seed across configs.
/// Cells are independent, so they run in parallel; results come back in a
/// deterministic (run_id, seed) order.
pub fn run_matrix(
    configs: &[RunConfig],
    seeds: &[u64],
) -> Result<Vec<RunReport>, SimulatorError> {
    let cells: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| seeds.iter().map(move |&s| (ci, s)))
        .collect();
    let mut reports = cells
        .into_par_iter()
        .map(|(ci, seed)| {
            let mut config = configs[ci].clone();
            config.seed = seed;
            let inputs = standard_inputs(&config.scenes, seed);
            run_active_learning(&config, &inputs)
        })
        .collect::<Result<Vec<RunReport>, SimulatorError>>()?;
    reports.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.seed.cmp(&b.seed)));
    Ok(reports)
}

fn fmt_opt(v: &Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Long-form per-round metrics. Header carries one IoU column per class.
pub fn metrics_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("run_id,seed,round,miou");
    if let Some(first) = reports.first() {
        for name in &first.class_names {
            out.push_str(&format!(",iou_{name}"));
        }
    }
    out.push_str(",selected,cumulative_labeled,pseudo_label_count,rejected_by_fds,train_loss\n");
    for report in reports {
        for round in &report.rounds {
            out.push_str(&format!(
                "{},{},{},{:.6}",
                report.run_id, report.seed, round.round, round.miou
            ));
            for v in &round.per_class_iou {
                out.push(',');
                out.push_str(&fmt_opt(v));
            }
            out.push_str(&format!(
                ",{},{},{},{},{:.6}\n",
                round.selected_points,
                round.cumulative_labeled,
                round.pseudo_label_count,
                round.rejected_by_fds,
                round.train_loss
            ));
        }
    }
    out
}

/// Budget-vs-quality curves for external plotting.
pub fn curves_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("run_id,seed,round,cumulative_labeled,miou\n");
    for report in reports {
        for round in &report.rounds {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                report.run_id, report.seed, round.round, round.cumulative_labeled, round.miou
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub run_id: String,
    pub seeds: usize,
    pub mean_final_miou: f64,
    pub min_final_miou: f64,
    pub max_final_miou: f64,
}

/// Fold one or more metrics.csv payloads into per-config means of the
/// final-round mIoU.
pub fn aggregate_metrics(csv_texts: &[String]) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    // (run_id, seed) -> (last round seen, its miou)
    let mut finals: BTreeMap<(String, String), (u64, f64)> = BTreeMap::new();
    for text in csv_texts {
        let mut lines = text.lines();
        let header = match lines.next() {
            Some(h) => h,
            None => continue,
        };
        let columns: Vec<&str> = header.split(',').collect();
        let idx =
            |name: &str| columns.iter().position(|c| *c == name);
        let (Some(run_i), Some(seed_i), Some(round_i), Some(miou_i)) =
            (idx("run_id"), idx("seed"), idx("round"), idx("miou"))
        else {
            continue;
        };
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() <= miou_i.max(round_i).max(seed_i).max(run_i) {
                continue;
            }
            let (Ok(round), Ok(miou)) =
                (fields[round_i].parse::<u64>(), fields[miou_i].parse::<f64>())
            else {
                continue;
            };
            let key = (fields[run_i].to_string(), fields[seed_i].to_string());
            let entry = finals.entry(key).or_insert((0, 0.0));
            if round >= entry.0 {
                *entry = (round, miou);
            }
        }
    }
    let mut by_run: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((run_id, _), (_, miou)) in finals {
        by_run.entry(run_id).or_default().push(miou);
    }
    by_run
        .into_iter()
        .map(|(run_id, vals)| AggregateRow {
            run_id,
            seeds: vals.len(),
            mean_final_miou: vals.iter().sum::<f64>() / vals.len() as f64,
            min_final_miou: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            max_final_miou: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

pub fn aggregate_table(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "run_id            seeds  mean_final_miou  min_final_miou  max_final_miou\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<18}{:>5}  {:>15.4}  {:>14.4}  {:>14.4}\n",
            r.run_id, r.seeds, r.mean_final_miou, r.min_final_miou, r.max_final_miou
        ));
    }
    out
}
