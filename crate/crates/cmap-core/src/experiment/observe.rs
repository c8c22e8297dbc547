//! Distribution probes: do adversarial inputs sit measurably off the data
//! manifold, and do purified generations return to it?
//!
//! Each probe is summarized by the expected restoration displacement across
//! noise levels, then scored by its kernel discrepancy against a clean
//! reference cloud in that feature space. Three probe groups are compared:
//! clean held-out samples, their adversarial versions, and the generator
//! outputs the defense restores from them. The kernel bandwidth is fixed
//! once from the reference cloud so every probe is scored on the same
//! scale.

use serde_json::Value;

use crate::attack::attack_classifier;
use crate::error::Result;
use crate::metrics::{eps_feature, histogram, mann_whitney_greater, median_heuristic_bandwidth, mmd2};
use crate::purify::purify;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::runner::{par_map, Csv, CsvField};
use super::setup::{build_pipeline, resolved_pgd, resolved_purify, streams, Pipeline};

pub const PROBE_GROUPS: [&str; 3] = ["clean", "adversarial", "generated"];

/// Feature-lane indices within the observation stream.
mod lanes {
    pub const DEFENSE: u64 = 0;
    pub const FEATURES: u64 = 1;
}

pub struct ObserveArtifacts {
    pub probes: Csv,
    pub bins: Csv,
    pub summary: Value,
    /// Per-group discrepancy scores in `PROBE_GROUPS` order.
    pub scores: [Vec<f64>; 3],
}

fn feature_row(
    pipe: &Pipeline,
    cfg: &RunConfig,
    x: &Tensor,
    group: u64,
    index: usize,
) -> Result<Tensor> {
    let mut draws = StreamKey::new(cfg.seed, streams::OBSERVE)
        .child(lanes::FEATURES)
        .child(group)
        .child(index as u64)
        .draws();
    eps_feature(&pipe.cm, x, &cfg.observe.eps, &mut draws)
}

fn stack_features(rows: &[Tensor]) -> Result<Tensor> {
    let width = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        flat.extend_from_slice(r.data());
    }
    Tensor::from_vec(vec![rows.len(), width], flat)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the full probe study on replica 0's pipeline.
pub fn observe(cfg: &RunConfig) -> Result<ObserveArtifacts> {
    let pipe = build_pipeline(cfg, 0)?;
    let purify_cfg = resolved_purify(cfg, &pipe.dataset);
    let pgd = resolved_pgd(cfg, &pipe.dataset);
    let n_ref = cfg.observe.reference_count.min(pipe.train.len());
    let n_probe = cfg.observe.probe_count.min(pipe.test.len());

    let mut ref_rows = Vec::with_capacity(n_ref);
    for i in 0..n_ref {
        let x = pipe.train.sample(i)?;
        ref_rows.push(feature_row(&pipe, cfg, &x, 0, i)?);
    }
    let reference = stack_features(&ref_rows)?;
    let bandwidth = median_heuristic_bandwidth(&reference, &reference)?;

    let defense_root = StreamKey::new(cfg.seed, streams::OBSERVE).child(lanes::DEFENSE);
    // Probe scores are independent across samples, so the probe loop is the
    // parallel unit; every draw is keyed by (group, index).
    let per_probe = par_map(cfg.workers, n_probe, |i| {
        let x = pipe.test.sample(i)?;
        let y = pipe.test.labels[i];
        let adv = attack_classifier(&pgd, &pipe.clf, &x, y)?;
        let restore_from = if cfg.observe.gen_from_adversarial { &adv } else { &x };
        let outcome = purify(&pipe.cm, &purify_cfg, restore_from, &defense_root.child(i as u64))?;
        let d = pipe.dataset.sample_dim();
        let branch0 = Tensor::from_vec(
            pipe.dataset.sample_shape(),
            outcome.generated.data()[..d].to_vec(),
        )?;
        let mut scores = [0.0f64; 3];
        for (g, probe) in [&x, &adv, &branch0].into_iter().enumerate() {
            let feat = feature_row(&pipe, cfg, probe, 1 + g as u64, i)?;
            let row = stack_features(&[feat])?;
            scores[g] = mmd2(&row, &reference, Some(bandwidth), cfg.observe.estimator)?;
        }
        Ok(scores)
    })?;

    let mut scores: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in &per_probe {
        for g in 0..3 {
            scores[g].push(s[g]);
        }
    }

    let mut probes = Csv::new(&["group", "sample_index", "mmd2"]);
    for (g, name) in PROBE_GROUPS.iter().enumerate() {
        for (i, &v) in scores[g].iter().enumerate() {
            probes.push_row(&[(*name).into(), i.into(), v.into()]);
        }
    }

    let hist = histogram(
        &[&scores[0], &scores[1], &scores[2]],
        cfg.observe.bins,
    )?;
    let mut bins = Csv::new(&["bin_lo", "bin_hi", "count_clean", "count_adv", "count_gen"]);
    for b in 0..cfg.observe.bins {
        bins.push_row(&[
            hist.edges[b].into(),
            hist.edges[b + 1].into(),
            CsvField::Uint(hist.counts[0][b] as u64),
            CsvField::Uint(hist.counts[1][b] as u64),
            CsvField::Uint(hist.counts[2][b] as u64),
        ]);
    }

    let adv_gt_clean = mann_whitney_greater(&scores[1], &scores[0])?;
    let adv_gt_gen = mann_whitney_greater(&scores[1], &scores[2])?;
    let means: Vec<f64> = scores
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let medians: Vec<f64> = scores.iter().map(|g| median(g)).collect();
    let ordering_ok = medians[1] > medians[0] && medians[1] > medians[2];
    let summary = serde_json::json!({
        "bandwidth": bandwidth,
        "probe_count": n_probe,
        "reference_count": n_ref,
        "groups": {
            "clean": {"mean_mmd2": means[0], "median_mmd2": medians[0]},
            "adversarial": {"mean_mmd2": means[1], "median_mmd2": medians[1]},
            "generated": {"mean_mmd2": means[2], "median_mmd2": medians[2]},
        },
        "adv_exceeds_clean_p": adv_gt_clean.p_value,
        "adv_exceeds_generated_p": adv_gt_gen.p_value,
        "median_ordering_holds": ordering_ok,
    });

    Ok(ObserveArtifacts {
        probes,
        bins,
        summary,
        scores,
    })
}
