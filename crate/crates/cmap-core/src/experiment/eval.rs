//! Robustness evaluation: crafts attacks, scores defenses, and assembles
//! the CSV artifacts of the `eval`, `attack`, and `purify` subcommands.
//!
//! Input-space attacks are crafted once per sample and reused against every
//! defense; the latent disruption attack targets the purifier directly and
//! only yields rows for it. Accuracy cells are exact fractions over the
//! evaluation subset, and aggregate rows report mean and sample standard
//! deviation across replicas.

use crate::attack::{
    attack_classifier, attack_surrogate, consistency_disruption, perturbation_norm,
    surrogate_purify, DisruptionConfig, NormKind, SurrogateAttackConfig,
};
use crate::classifier::predict;
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::purify::{purify_predict, PurifyConfig, TraceRow};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

use super::config::{AttackKind, DefenseKind, RunConfig};
use super::runner::{par_map, Csv, CsvField};
use super::setup::{build_pipeline, resolved_pgd, resolved_purify, streams, Pipeline};

pub fn norm_tag(norm: NormKind) -> &'static str {
    match norm {
        NormKind::Linf => "linf",
        NormKind::L2 => "l2",
    }
}

/// Ball description stamped into result rows. The disruption attack has no
/// input-space ball; its row records the latent objective weight instead.
fn attack_ball(cfg: &RunConfig, attack: AttackKind) -> (&'static str, f64) {
    match attack {
        AttackKind::PgdClassifier | AttackKind::PgdSurrogate => {
            (norm_tag(cfg.attack.pgd.norm), cfg.attack.pgd.epsilon)
        }
        AttackKind::Disruption => ("latent", cfg.attack.lambda),
    }
}

fn surrogate_attack_cfg(cfg: &RunConfig, pipe: &Pipeline) -> SurrogateAttackConfig {
    SurrogateAttackConfig {
        pgd: resolved_pgd(cfg, &pipe.dataset),
        t_diff: cfg.attack.t_diff,
        eot_samples: cfg.attack.eot_samples,
        ..SurrogateAttackConfig::default()
    }
}

fn disruption_cfg(cfg: &RunConfig, purify_cfg: &PurifyConfig) -> DisruptionConfig {
    DisruptionConfig {
        defense_iterations: cfg
            .attack
            .disruption_defense_iterations
            .unwrap_or(purify_cfg.iterations),
        attack_iterations: cfg.attack.disruption_attack_iterations,
        lambda: cfg.attack.lambda,
        purify: purify_cfg.clone(),
    }
}

/// Classifies `x` behind the chosen defense. The key seeds every defense
/// draw, so one (replica, context, sample) triple maps to one prediction.
pub fn defended_predict(
    pipe: &Pipeline,
    cfg: &RunConfig,
    purify_cfg: &PurifyConfig,
    defense: DefenseKind,
    x: &Tensor,
    key: &StreamKey,
) -> Result<usize> {
    match defense {
        DefenseKind::None => predict(&pipe.clf, x),
        DefenseKind::Cmap => {
            let (prediction, _) = purify_predict(&pipe.cm, &pipe.clf, purify_cfg, x, key)?;
            Ok(prediction.label)
        }
        DefenseKind::Surrogate => {
            let mut draws = key.draws();
            let restored = surrogate_purify(&pipe.cm, x, cfg.attack.t_diff, &mut draws)?;
            let staged = match purify_cfg.clamp {
                Some((lo, hi)) => restored.clamp(lo, hi)?,
                None => restored,
            };
            predict(&pipe.clf, &staged)
        }
    }
}

/// Crafts one adversarial example; `None` for the disruption attack, which
/// is evaluated jointly with the defense.
fn craft(
    cfg: &RunConfig,
    pipe: &Pipeline,
    attack: AttackKind,
    x: &Tensor,
    label: usize,
    key: &StreamKey,
) -> Result<Option<Tensor>> {
    match attack {
        AttackKind::PgdClassifier => {
            let pgd = resolved_pgd(cfg, &pipe.dataset);
            attack_classifier(&pgd, &pipe.clf, x, label).map(Some)
        }
        AttackKind::PgdSurrogate => {
            let sa = surrogate_attack_cfg(cfg, pipe);
            attack_surrogate(&pipe.cm, &pipe.clf, &sa, x, label, key).map(Some)
        }
        AttackKind::Disruption => Ok(None),
    }
}

/// One accuracy cell of the evaluation grid.
#[derive(Debug, Clone)]
pub struct EvalCell {
    pub defense: DefenseKind,
    pub attack: AttackKind,
    pub norm: &'static str,
    pub epsilon: f64,
    pub standard_acc: f64,
    pub robust_acc: f64,
}

fn eval_subset(pipe: &Pipeline, n: usize) -> Result<Vec<(Tensor, usize)>> {
    (0..n)
        .map(|i| Ok((pipe.test.sample(i)?, pipe.test.labels[i])))
        .collect()
}

/// Scores every defense/attack pair for one replica. Each replica builds
/// its own pipeline, so trained models refresh their draws.
pub fn eval_replica(cfg: &RunConfig, replica: usize) -> Result<Vec<EvalCell>> {
    let pipe = build_pipeline(cfg, replica as u64)?;
    let purify_cfg = resolved_purify(cfg, &pipe.dataset);
    let n = cfg.eval.sample_count;
    let subset = eval_subset(&pipe, n)?;
    let defense_root = StreamKey::new(cfg.seed, streams::DEFENSE).child(replica as u64);
    let attack_root = StreamKey::new(cfg.seed, streams::ATTACK).child(replica as u64);

    let mut crafted: Vec<Vec<Option<Tensor>>> = Vec::with_capacity(cfg.eval.attacks.len());
    for (ai, &attack) in cfg.eval.attacks.iter().enumerate() {
        let mut per_sample = Vec::with_capacity(n);
        for (i, (x, y)) in subset.iter().enumerate() {
            let key = attack_root.child(ai as u64).child(i as u64);
            per_sample.push(craft(cfg, &pipe, attack, x, *y, &key)?);
        }
        crafted.push(per_sample);
    }

    let mut cells = Vec::new();
    for &defense in &cfg.eval.defenses {
        let mut hits = 0usize;
        for (i, (x, y)) in subset.iter().enumerate() {
            let key = defense_root.child(0).child(i as u64);
            if defended_predict(&pipe, cfg, &purify_cfg, defense, x, &key)? == *y {
                hits += 1;
            }
        }
        let standard_acc = hits as f64 / n as f64;

        for (ai, &attack) in cfg.eval.attacks.iter().enumerate() {
            if attack == AttackKind::Disruption && defense != DefenseKind::Cmap {
                continue;
            }
            let mut hits = 0usize;
            for (i, (x, y)) in subset.iter().enumerate() {
                let correct = match attack {
                    AttackKind::Disruption => {
                        let dc = disruption_cfg(cfg, &purify_cfg);
                        let key = attack_root.child(ai as u64).child(i as u64);
                        let out =
                            consistency_disruption(&pipe.cm, &pipe.clf, &dc, x, *y, &key)?;
                        out.vote_label == *y
                    }
                    _ => {
                        let adv = crafted[ai][i]
                            .as_ref()
                            .expect("input-space attacks are crafted eagerly");
                        let key = defense_root.child(1 + ai as u64).child(i as u64);
                        defended_predict(&pipe, cfg, &purify_cfg, defense, adv, &key)? == *y
                    }
                };
                if correct {
                    hits += 1;
                }
            }
            let (norm, epsilon) = attack_ball(cfg, attack);
            cells.push(EvalCell {
                defense,
                attack,
                norm,
                epsilon,
                standard_acc,
                robust_acc: hits as f64 / n as f64,
            });
        }
    }
    Ok(cells)
}

/// Runs every replica, in parallel when configured.
pub fn eval_all(cfg: &RunConfig) -> Result<Vec<Vec<EvalCell>>> {
    par_map(cfg.workers, cfg.replicas, |r| eval_replica(cfg, r))
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Renders replica rows followed by `mean`/`std` aggregate rows per cell.
pub fn eval_csv(replicas: &[Vec<EvalCell>]) -> Csv {
    let mut csv = Csv::new(&[
        "run",
        "defense",
        "attack",
        "norm",
        "epsilon",
        "standard_acc",
        "robust_acc",
    ]);
    for (r, cells) in replicas.iter().enumerate() {
        for c in cells {
            csv.push_row(&[
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
    // Replica cell order is deterministic, so aggregate in replica 0's order.
    if let Some(first) = replicas.first() {
        for (idx, c0) in first.iter().enumerate() {
            let standard: Vec<f64> = replicas.iter().map(|r| r[idx].standard_acc).collect();
            let robust: Vec<f64> = replicas.iter().map(|r| r[idx].robust_acc).collect();
            let (sm, ss) = mean_std(&standard);
            let (rm, rs) = mean_std(&robust);
            for (tag, s, a) in [("mean", sm, rm), ("std", ss, rs)] {
                csv.push_row(&[
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
    csv
}

// ---------------------------------------------------------------------------
// Per-sample attack reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttackRow {
    pub sample_index: usize,
    pub attack: AttackKind,
    pub norm: &'static str,
    pub epsilon: f64,
    pub success_undefended: bool,
    pub success_defended: bool,
    pub achieved_norm: f64,
}

/// Crafts per-sample adversarial examples for the input-space attacks and
/// scores them against the bare classifier and the full purifier. Returns
/// the rows together with the adversarial datasets for archiving.
pub fn attack_report(cfg: &RunConfig) -> Result<(Vec<AttackRow>, Vec<(String, Dataset)>)> {
    let pipe = build_pipeline(cfg, 0)?;
    let purify_cfg = resolved_purify(cfg, &pipe.dataset);
    let n = cfg.eval.sample_count;
    let subset = eval_subset(&pipe, n)?;
    let attack_root = StreamKey::new(cfg.seed, streams::ATTACK).child(0);
    let defense_root = StreamKey::new(cfg.seed, streams::DEFENSE).child(0);

    let kinds: Vec<(usize, AttackKind)> = cfg
        .eval
        .attacks
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, a)| *a != AttackKind::Disruption)
        .collect();
    if kinds.is_empty() {
        return Err(invalid(
            "the attack report covers input-space attacks; eval.attacks has none",
        ));
    }

    let mut rows = Vec::new();
    let mut archives = Vec::new();
    for (ai, attack) in kinds {
        let mut flat = Vec::with_capacity(n * pipe.dataset.sample_dim());
        let mut labels = Vec::with_capacity(n);
        for (i, (x, y)) in subset.iter().enumerate() {
            let key = attack_root.child(ai as u64).child(i as u64);
            let adv = craft(cfg, &pipe, attack, x, *y, &key)?
                .expect("input-space attacks are crafted eagerly");
            let undefended = predict(&pipe.clf, &adv)? != *y;
            let dkey = defense_root.child(1 + ai as u64).child(i as u64);
            let defended =
                defended_predict(&pipe, cfg, &purify_cfg, DefenseKind::Cmap, &adv, &dkey)? != *y;
            let achieved = perturbation_norm(&adv, x, cfg.attack.pgd.norm)?;
            let (norm, epsilon) = attack_ball(cfg, attack);
            rows.push(AttackRow {
                sample_index: i,
                attack,
                norm,
                epsilon,
                success_undefended: undefended,
                success_defended: defended,
                achieved_norm: achieved,
            });
            flat.extend_from_slice(adv.data());
            labels.push(*y);
        }
        let samples = Tensor::from_vec(vec![n, pipe.dataset.sample_dim()], flat)?;
        let ds = Dataset::new(pipe.dataset.kind.clone(), samples, labels, pipe.dataset.class_count)?;
        archives.push((format!("adv-{}", attack.tag()), ds));
    }
    Ok((rows, archives))
}

pub fn attack_csv(rows: &[AttackRow]) -> Csv {
    let mut csv = Csv::new(&[
        "sample_index",
        "attack",
        "norm",
        "epsilon",
        "success_undefended",
        "success_defended",
        "achieved_norm",
    ]);
    for r in rows {
        csv.push_row(&[
            r.sample_index.into(),
            r.attack.tag().into(),
            r.norm.into(),
            r.epsilon.into(),
            r.success_undefended.into(),
            r.success_defended.into(),
            r.achieved_norm.into(),
        ]);
    }
    csv
}

// ---------------------------------------------------------------------------
// Clean purification reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PurifyRow {
    pub sample_index: usize,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    /// Vote share of the winning class.
    pub top_vote_fraction: f64,
}

/// Purifies clean evaluation samples; also returns the first sample's
/// objective trace for inspection.
pub fn purify_report(cfg: &RunConfig) -> Result<(Vec<PurifyRow>, Vec<TraceRow>)> {
    let pipe = build_pipeline(cfg, 0)?;
    let purify_cfg = resolved_purify(cfg, &pipe.dataset);
    let n = cfg.eval.sample_count;
    let subset = eval_subset(&pipe, n)?;
    let defense_root = StreamKey::new(cfg.seed, streams::DEFENSE).child(0);
    let mut rows = Vec::with_capacity(n);
    let mut first_trace = Vec::new();
    for (i, (x, y)) in subset.iter().enumerate() {
        let key = defense_root.child(0).child(i as u64);
        let (prediction, outcome) = purify_predict(&pipe.cm, &pipe.clf, &purify_cfg, x, &key)?;
        if i == 0 {
            first_trace = outcome.trace;
        }
        let top = prediction.votes.iter().copied().max().unwrap_or(0);
        rows.push(PurifyRow {
            sample_index: i,
            label: *y,
            prediction: prediction.label,
            correct: prediction.label == *y,
            top_vote_fraction: top as f64 / purify_cfg.k as f64,
        });
    }
    Ok((rows, first_trace))
}

pub fn purify_csv(rows: &[PurifyRow]) -> Csv {
    let mut csv = Csv::new(&[
        "sample_index",
        "label",
        "prediction",
        "correct",
        "top_vote_fraction",
    ]);
    for r in rows {
        csv.push_row(&[
            r.sample_index.into(),
            r.label.into(),
            r.prediction.into(),
            r.correct.into(),
            r.top_vote_fraction.into(),
        ]);
    }
    csv
}

pub fn trace_csv(trace: &[TraceRow]) -> Csv {
    let mut csv = Csv::new(&[
        "iteration",
        "loss_a",
        "loss_d",
        "total",
        "latent_mean_norm",
        "latent_std_mean",
    ]);
    for t in trace {
        csv.push_row(&[
            t.iteration.into(),
            t.loss_a.into(),
            t.loss_d.into(),
            t.total.into(),
            t.latent_mean_norm.into(),
            t.latent_std_mean.into(),
        ]);
    }
    csv
}
