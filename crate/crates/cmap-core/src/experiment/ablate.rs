//! Parameter sweeps: rerun the evaluation grid while one defense or attack
//! knob walks a value list, and, for latent-moment sweeps, record how
//! robust accuracy evolves over the purifier's iterations at each value.

use std::collections::BTreeMap;

use crate::attack::attack_classifier;
use crate::error::Result;
use crate::purify::{classify_branches, purify_with_observer};
use crate::rng::StreamKey;

use super::config::{AblateParam, RunConfig};
use super::eval::{eval_all, mean_std};
use super::runner::{Csv, CsvField};
use super::setup::{build_pipeline, resolved_pgd, resolved_purify, streams};

/// Defense-stream context lane reserved for curve snapshots, distinct from
/// the evaluation contexts.
const CURVE_CONTEXT: u64 = 0x1000;

pub struct AblateOutputs {
    pub table: Csv,
    /// Per-iteration robust accuracy, emitted for latent-moment sweeps.
    pub curves: Option<Csv>,
}

/// Applies one sweep value to a config copy.
pub fn apply_param(cfg: &mut RunConfig, param: AblateParam, value: f64) {
    match param {
        AblateParam::Alpha => cfg.purify.alpha = value,
        AblateParam::Beta => cfg.purify.beta = value,
        AblateParam::K => cfg.purify.k = value as usize,
        AblateParam::TDiff => cfg.attack.t_diff = value,
        AblateParam::Lambda => cfg.attack.lambda = value,
    }
}

pub fn run_ablation(cfg: &RunConfig) -> Result<AblateOutputs> {
    let param = cfg.ablate.param;
    // Reject any invalid grid point before spending time on the first one.
    let mut points = Vec::with_capacity(cfg.ablate.values.len());
    for &value in &cfg.ablate.values {
        let mut patched = cfg.clone();
        apply_param(&mut patched, param, value);
        patched.validate()?;
        points.push((value, patched));
    }

    let mut table = Csv::new(&[
        "param",
        "value",
        "run",
        "defense",
        "attack",
        "norm",
        "epsilon",
        "standard_acc",
        "robust_acc",
    ]);
    for (value, patched) in &points {
        let replicas = eval_all(patched)?;
        for (r, cells) in replicas.iter().enumerate() {
            for c in cells {
                table.push_row(&[
                    param.tag().into(),
                    (*value).into(),
                    CsvField::Uint(r as u64),
                    c.defense.tag().into(),
                    c.attack.tag().into(),
                    c.norm.into(),
                    c.epsilon.into(),
                    c.standard_acc.into(),
                    c.robust_acc.into(),
                ]);
            }
        }
        for (idx, c0) in replicas[0].iter().enumerate() {
            let standard: Vec<f64> = replicas.iter().map(|r| r[idx].standard_acc).collect();
            let robust: Vec<f64> = replicas.iter().map(|r| r[idx].robust_acc).collect();
            let (sm, ss) = mean_std(&standard);
            let (rm, rs) = mean_std(&robust);
            for (tag, s, a) in [("mean", sm, rm), ("std", ss, rs)] {
                table.push_row(&[
                    param.tag().into(),
                    (*value).into(),
                    tag.into(),
                    c0.defense.tag().into(),
                    c0.attack.tag().into(),
                    c0.norm.into(),
                    c0.epsilon.into(),
                    s.into(),
                    a.into(),
                ]);
            }
        }
    }

    let curves = if param == AblateParam::Beta {
        let mut csv = Csv::new(&["param", "value", "iteration", "robust_acc"]);
        for (value, patched) in &points {
            for (iteration, acc) in robust_curve(patched)? {
                csv.push_row(&[
                    param.tag().into(),
                    (*value).into(),
                    iteration.into(),
                    acc.into(),
                ]);
            }
        }
        Some(csv)
    } else {
        None
    };

    Ok(AblateOutputs { table, curves })
}

/// Robust accuracy of the purifier at each snapshot iteration, measured on
/// classifier-PGD adversarial versions of the evaluation subset.
fn robust_curve(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let pipe = build_pipeline(cfg, 0)?;
    let mut purify_cfg = resolved_purify(cfg, &pipe.dataset);
    purify_cfg.snapshot_stride = cfg.ablate.curve_stride.min(purify_cfg.iterations.max(1));
    let pgd = resolved_pgd(cfg, &pipe.dataset);
    let n = cfg.eval.sample_count;
    let defense_root = StreamKey::new(cfg.seed, streams::DEFENSE)
        .child(0)
        .child(CURVE_CONTEXT);

    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        let x = pipe.test.sample(i)?;
        let y = pipe.test.labels[i];
        let adv = attack_classifier(&pgd, &pipe.clf, &x, y)?;
        let clf = &pipe.clf;
        let purify_ref = &purify_cfg;
        let hits_ref = &mut hits;
        let mut observer = |iteration: usize,
                            _latents: &crate::tensor::Tensor,
                            generated: &crate::tensor::Tensor|
         -> Result<()> {
            let prediction = classify_branches(clf, purify_ref, generated)?;
            if prediction.label == y {
                *hits_ref.entry(iteration).or_insert(0) += 1;
            } else {
                hits_ref.entry(iteration).or_insert(0);
            }
            Ok(())
        };
        purify_with_observer(
            &pipe.cm,
            &purify_cfg,
            &adv,
            &defense_root.child(i as u64),
            Some(&mut observer),
        )?;
    }
    Ok(hits
        .into_iter()
        .map(|(iteration, h)| (iteration, h as f64 / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClfTrainConfig;
    use crate::data::GaussianSpec;
    use crate::experiment::config::{AttackKind, ClfSource, CmSource, DataSource, DefenseKind};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.source = DataSource::Gaussian(GaussianSpec {
            count: 60,
            ..GaussianSpec::default()
        });
        cfg.data.train_count = 40;
        cfg.cm = CmSource::Analytic {
            schedule: Default::default(),
            mu: 0.0,
            sigma_x: 1.0,
        };
        cfg.clf = ClfSource::Train(ClfTrainConfig {
            hidden: vec![16],
            steps: 150,
            batch_size: 32,
            ..Default::default()
        });
        cfg.purify.k = 2;
        cfg.purify.iterations = 6;
        cfg.eval.sample_count = 3;
        cfg.eval.defenses = vec![DefenseKind::Cmap];
        cfg.eval.attacks = vec![AttackKind::PgdClassifier];
        cfg.attack.pgd.steps = 5;
        cfg.ablate.values = vec![0.0, 5e-4];
        cfg.ablate.curve_stride = 2;
        cfg
    }

    #[test]
    fn beta_sweep_emits_table_and_curves() {
        let cfg = tiny_cfg();
        let out = run_ablation(&cfg).unwrap();
        // 2 values x (1 replica row + mean + std).
        assert_eq!(out.table.row_count(), 2 * 3);
        let curves = out.curves.expect("latent-moment sweep has curves");
        // Snapshot iterations 0,2,4,6 per value.
        assert_eq!(curves.row_count(), 2 * 4);
        let text = curves.render();
        assert!(text.starts_with("param,value,iteration,robust_acc\n"));
        assert!(text.contains("beta,0,0,"));
        assert!(text.contains("beta,0.0005,6,"));
    }

    #[test]
    fn non_beta_sweeps_have_no_curves() {
        let mut cfg = tiny_cfg();
        cfg.ablate.param = AblateParam::K;
        cfg.ablate.values = vec![2.0, 3.0];
        let out = run_ablation(&cfg).unwrap();
        assert!(out.curves.is_none());
        assert_eq!(out.table.row_count(), 2 * 3);
    }

    #[test]
    fn invalid_grid_points_fail_before_any_work() {
        let mut cfg = tiny_cfg();
        cfg.ablate.param = AblateParam::K;
        // Branch count 1 conflicts with a nonzero moment weight.
        cfg.ablate.values = vec![2.0, 1.0];
        cfg.purify.beta = 5e-4;
        assert!(run_ablation(&cfg).is_err());
    }
}
