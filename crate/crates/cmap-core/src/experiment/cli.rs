//! Command-line surface of the laboratory.
//!
//! Every subcommand reads the same run configuration (file plus `--set`
//! overrides), writes its artifacts into a fresh run directory, and prints
//! a short summary. Exit codes: 0 success, 1 configuration or usage error,
//! 2 runtime failure, 3 a verification gate did not pass.

use std::ffi::OsString;
use std::path::Path;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::classifier::accuracy;
use crate::data::save_dataset;
use crate::error::{invalid, Error, Result};

use super::ablate::run_ablation;
use super::config::{load_config, RunConfig};
use super::eval::{
    attack_csv, attack_report, eval_all, eval_csv, purify_csv, purify_report, trace_csv,
};
use super::observe::observe;
use super::runner::{resolve_runs_root, Csv, RunContext, RUNS_DIR_ENV};
use super::setup::{acquire_clf, acquire_cm, build_dataset};
use super::verify::{run_bound, run_theorem};

#[derive(Parser, Debug)]
#[command(
    name = "cmap-lab",
    version,
    about = "Laboratory for consistency-generator adversarial purification",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// JSON run configuration; defaults apply to anything unstated.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path config override, e.g. `purify.beta=0.001`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Runs root; defaults to $CMAP_LAB_RUNS_DIR, then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    out_root: Option<PathBuf>,
    /// Worker threads; overrides the config without changing results.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured dataset and archive it.
    GenData,
    /// Train (or materialize) the consistency generator and save it.
    TrainCm,
    /// Train the classifier on the run's training split and save it.
    TrainClf,
    /// Purify clean evaluation samples and report voted predictions.
    Purify,
    /// Craft input-space attacks per sample and score both sides.
    Attack,
    /// Score every defense/attack pair across replicas.
    Eval,
    /// Probe feature-space discrepancy of clean, attacked, and restored data.
    Observe,
    /// Sweep one knob across a value grid, rerunning the evaluation.
    Ablate,
    /// Check the analytic latent-gap statistics by simulation.
    VerifyTheorem,
    /// Check the reconstruction bound on random instances and replays.
    VerifyProp,
}

/// Maps an error to the process exit code: configuration and input mistakes
/// are 1, runtime failures 2.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::Parse { .. }
        | Error::Json(_) => 1,
        _ => 2,
    }
}

/// Parses arguments and runs the command, translating every outcome into an
/// exit code. `--help` and `--version` count as success.
pub fn cli_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let (mut cfg, mut resolved) = load_config(cli.config.as_deref(), &cli.set)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(invalid("workers must be positive"));
        }
        cfg.workers = w;
        resolved["workers"] = serde_json::json!(w);
    }
    let env = std::env::var(RUNS_DIR_ENV).ok();
    let root = resolve_runs_root(cli.out_root.as_deref(), env.as_deref());
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &resolved, &root),
        Command::TrainCm => cmd_train_cm(&cfg, &resolved, &root),
        Command::TrainClf => cmd_train_clf(&cfg, &resolved, &root),
        Command::Purify => cmd_purify(&cfg, &resolved, &root),
        Command::Attack => cmd_attack(&cfg, &resolved, &root),
        Command::Eval => cmd_eval(&cfg, &resolved, &root),
        Command::Observe => cmd_observe(&cfg, &resolved, &root),
        Command::Ablate => cmd_ablate(&cfg, &resolved, &root),
        Command::VerifyTheorem => cmd_verify_theorem(&cfg, &resolved, &root),
        Command::VerifyProp => cmd_verify_prop(&cfg, &resolved, &root),
    }
}

fn losses_csv(losses: &[(usize, f64)]) -> Csv {
    let mut csv = Csv::new(&["step", "loss"]);
    for &(step, loss) in losses {
        csv.push_row(&[step.into(), loss.into()]);
    }
    csv
}

fn cmd_gen_data(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let dataset = build_dataset(&cfg.data.source)?;
    let mut ctx = RunContext::create("gen-data", root, resolved)?;
    save_dataset(&dataset, &ctx.path("dataset"))?;
    ctx.note_artifact("dataset");
    let mut class_counts = vec![0usize; dataset.class_count];
    for &l in &dataset.labels {
        class_counts[l] += 1;
    }
    ctx.write_json(
        "summary.json",
        &serde_json::json!({
            "count": dataset.len(),
            "sample_dim": dataset.sample_dim(),
            "class_counts": class_counts,
            "value_range": dataset.value_range(),
        }),
    )?;
    let dir = ctx.finalize()?;
    println!(
        "generated {} samples in {} classes ({} dims each)",
        dataset.len(),
        dataset.class_count,
        dataset.sample_dim()
    );
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn cmd_train_cm(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let dataset = build_dataset(&cfg.data.source)?;
    let (train, _) = dataset.split(cfg.data.train_count.min(dataset.len()))?;
    let (params, log) = acquire_cm(&cfg.cm, &train, cfg.seed, 0)?;
    let mut ctx = RunContext::create("train-cm", root, resolved)?;
    crate::cm::save_cm(&params, &ctx.path("cm.json"))?;
    ctx.note_artifact("cm.json");
    let final_loss = log.as_ref().and_then(|l| l.losses.last().map(|&(_, v)| v));
    if let Some(log) = &log {
        ctx.write_csv("train_log.csv", &losses_csv(&log.losses))?;
    }
    ctx.write_json(
        "summary.json",
        &serde_json::json!({
            "trained": log.is_some(),
            "final_loss": final_loss,
            "sample_dim": params.sample_dim(),
        }),
    )?;
    let dir = ctx.finalize()?;
    match final_loss {
        Some(v) => println!("generator trained; final smoothed loss {v:.6}"),
        None => println!("generator materialized without training"),
    }
    println!("run directory: {}", dir.display());
    println!(
        "reuse with --set cm={{\"kind\":\"load\",\"path\":\"{}\"}}",
        dir.join("cm.json").display()
    );
    Ok(0)
}

fn cmd_train_clf(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let dataset = build_dataset(&cfg.data.source)?;
    let (train, test) = dataset.split(cfg.data.train_count.min(dataset.len()))?;
    let (params, log) = acquire_clf(&cfg.clf, &train, cfg.seed, 0)?;
    let train_acc = accuracy(&params, &train)?;
    let test_acc = if test.len() > 0 {
        Some(accuracy(&params, &test)?)
    } else {
        None
    };
    let mut ctx = RunContext::create("train-clf", root, resolved)?;
    crate::classifier::save_clf(&params, &ctx.path("clf.json"))?;
    ctx.note_artifact("clf.json");
    if let Some(log) = &log {
        ctx.write_csv("train_log.csv", &losses_csv(&log.losses))?;
    }
    ctx.write_json(
        "summary.json",
        &serde_json::json!({
            "trained": log.is_some(),
            "train_accuracy": train_acc,
            "test_accuracy": test_acc,
        }),
    )?;
    let dir = ctx.finalize()?;
    match test_acc {
        Some(t) => println!("classifier accuracy: train {train_acc:.4}, held-out {t:.4}"),
        None => println!("classifier accuracy: train {train_acc:.4}"),
    }
    println!("run directory: {}", dir.display());
    println!(
        "reuse with --set clf={{\"kind\":\"load\",\"path\":\"{}\"}}",
        dir.join("clf.json").display()
    );
    Ok(0)
}

fn cmd_purify(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let (rows, trace) = purify_report(cfg)?;
    let correct = rows.iter().filter(|r| r.correct).count();
    let acc = correct as f64 / rows.len() as f64;
    let mut ctx = RunContext::create("purify", root, resolved)?;
    ctx.write_csv("predictions.csv", &purify_csv(&rows))?;
    ctx.write_csv("trace.csv", &trace_csv(&trace))?;
    ctx.write_json(
        "summary.json",
        &serde_json::json!({
            "samples": rows.len(),
            "defended_clean_accuracy": acc,
        }),
    )?;
    let dir = ctx.finalize()?;
    println!(
        "purified {} clean samples; voted accuracy {acc:.4}",
        rows.len()
    );
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn cmd_attack(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let (rows, archives) = attack_report(cfg)?;
    let mut ctx = RunContext::create("attack", root, resolved)?;
    ctx.write_csv("attack.csv", &attack_csv(&rows))?;
    let mut per_attack = serde_json::Map::new();
    for (name, ds) in &archives {
        save_dataset(ds, &ctx.path(name))?;
        ctx.note_artifact(name);
    }
    let mut kinds = Vec::new();
    for r in &rows {
        if !kinds.contains(&r.attack) {
            kinds.push(r.attack);
        }
    }
    for kind in kinds {
        let of_kind: Vec<_> = rows.iter().filter(|r| r.attack == kind).collect();
        let n = of_kind.len() as f64;
        let undefended = of_kind.iter().filter(|r| r.success_undefended).count() as f64 / n;
        let defended = of_kind.iter().filter(|r| r.success_defended).count() as f64 / n;
        per_attack.insert(
            kind.tag().to_string(),
            serde_json::json!({
                "success_rate_undefended": undefended,
                "success_rate_defended": defended,
            }),
        );
        println!(
            "{}: success {:.4} undefended, {:.4} against the purifier",
            kind.tag(),
            undefended,
            defended
        );
    }
    ctx.write_json("summary.json", &Value::Object(per_attack))?;
    let dir = ctx.finalize()?;
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let replicas = eval_all(cfg)?;
    let csv = eval_csv(&replicas);
    let mut ctx = RunContext::create("eval", root, resolved)?;
    ctx.write_csv("eval.csv", &csv)?;
    let mut cells = Vec::new();
    for (idx, c0) in replicas[0].iter().enumerate() {
        let standard: Vec<f64> = replicas.iter().map(|r| r[idx].standard_acc).collect();
        let robust: Vec<f64> = replicas.iter().map(|r| r[idx].robust_acc).collect();
        let (sm, ss) = super::eval::mean_std(&standard);
        let (rm, rs) = super::eval::mean_std(&robust);
        cells.push(serde_json::json!({
            "defense": c0.defense.tag(),
            "attack": c0.attack.tag(),
            "norm": c0.norm,
            "epsilon": c0.epsilon,
            "standard_acc": {"mean": sm, "std": ss},
            "robust_acc": {"mean": rm, "std": rs},
        }));
        println!(
            "defense={} attack={} standard={:.4} robust={:.4} (mean of {} replicas)",
            c0.defense.tag(),
            c0.attack.tag(),
            sm,
            rm,
            replicas.len()
        );
    }
    ctx.write_json(
        "summary.json",
        &serde_json::json!({"replicas": replicas.len(), "cells": cells}),
    )?;
    let dir = ctx.finalize()?;
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn cmd_observe(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let art = observe(cfg)?;
    let mut ctx = RunContext::create("observe", root, resolved)?;
    ctx.write_csv("probes.csv", &art.probes)?;
    ctx.write_csv("bins.csv", &art.bins)?;
    ctx.write_json("summary.json", &art.summary)?;
    let dir = ctx.finalize()?;
    println!(
        "median mmd2: clean {:.3e}, adversarial {:.3e}, generated {:.3e}",
        art.summary["groups"]["clean"]["median_mmd2"].as_f64().unwrap_or(f64::NAN),
        art.summary["groups"]["adversarial"]["median_mmd2"].as_f64().unwrap_or(f64::NAN),
        art.summary["groups"]["generated"]["median_mmd2"].as_f64().unwrap_or(f64::NAN),
    );
    println!(
        "one-sided p-values: adversarial>clean {:.3e}, adversarial>generated {:.3e}",
        art.summary["adv_exceeds_clean_p"].as_f64().unwrap_or(f64::NAN),
        art.summary["adv_exceeds_generated_p"].as_f64().unwrap_or(f64::NAN),
    );
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn cmd_ablate(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let out = run_ablation(cfg)?;
    let mut ctx = RunContext::create("ablate", root, resolved)?;
    ctx.write_csv("ablate.csv", &out.table)?;
    if let Some(curves) = &out.curves {
        ctx.write_csv("curves.csv", curves)?;
    }
    let dir = ctx.finalize()?;
    println!(
        "swept {} over {} values across {} replicas",
        cfg.ablate.param.tag(),
        cfg.ablate.values.len(),
        cfg.replicas
    );
    println!("run directory: {}", dir.display());
    Ok(0)
}

fn cmd_verify_theorem(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let out = run_theorem(cfg)?;
    let mut ctx = RunContext::create("verify-theorem", root, resolved)?;
    ctx.write_json(
        "theorem.json",
        &serde_json::json!({"checks": out.checks, "all_pass": out.all_pass}),
    )?;
    ctx.write_json("root.json", &out.root)?;
    for check in &out.checks {
        let r = &check.report;
        let max_z = r
            .z_scores
            .iter()
            .fold(0.0f64, |m, &z| m.max(z.abs()));
        println!(
            "{}: {} (max |z| = {max_z:.3}, variance ratio = {:.4})",
            check.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.variance_ratio
        );
    }
    for (variance, coeff) in &out.root.candidates {
        println!(
            "drift coefficient at data variance {variance:.6}: {coeff:.6} \
             (vanishes at {:.6})",
            out.root.root_sigma_x2
        );
    }
    let dir = ctx.finalize()?;
    println!("run directory: {}", dir.display());
    Ok(if out.all_pass { 0 } else { 3 })
}

fn cmd_verify_prop(cfg: &RunConfig, resolved: &Value, root: &Path) -> Result<i32> {
    let out = run_bound(cfg)?;
    let mut ctx = RunContext::create("verify-prop", root, resolved)?;
    ctx.write_json(
        "bound.json",
        &serde_json::json!({
            "random": out.random,
            "replays": out.replays,
            "all_pass": out.all_pass,
        }),
    )?;
    println!(
        "random instances: {} ({} violations, min slack {:.3e})",
        out.random.instances, out.random.violations, out.random.min_slack
    );
    for replay in &out.replays {
        println!(
            "replay {}: {} snapshots ({} violations, min slack {:.3e})",
            replay.name,
            replay.report.instances,
            replay.report.violations,
            replay.report.min_slack
        );
    }
    println!("bound: {}", if out.all_pass { "PASS" } else { "FAIL" });
    let dir = ctx.finalize()?;
    println!("run directory: {}", dir.display());
    Ok(if out.all_pass { 0 } else { 3 })
}
