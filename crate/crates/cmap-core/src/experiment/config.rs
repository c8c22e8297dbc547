//! Run configuration for the `cmap-lab` binary.
//!
//! A run is described by one JSON document covering every stage: data,
//! generator, classifier, defense, attacks, and the verification budgets.
//! Every field has a default, so a config file only states what it changes,
//! and `--set key.path=value` overrides individual entries on top of the
//! file. The fully resolved document — defaults and overrides applied — is
//! what gets stamped into the run directory, never the sparse input.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::PgdConfig;
use crate::classifier::ClfTrainConfig;
use crate::cm::{CmTrainConfig, NoiseSchedule};
use crate::data::{DataKind, Dataset, GaussianSpec, ShapeImageSpec};
use crate::error::{invalid, Error, Result};
use crate::metrics::{EpsConfig, MmdEstimator};
use crate::purify::PurifyConfig;
use crate::theory::{BoundConfig, TheoremConfig};

/// Complete description of a laboratory run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream in the run is keyed off it.
    pub seed: u64,
    /// Independent repetitions of the pipeline; replicas share the dataset
    /// but retrain models and redraw defense noise.
    pub replicas: usize,
    /// Worker threads for replica-level parallelism. Results are identical
    /// for any worker count.
    pub workers: usize,
    pub data: DataSection,
    pub cm: CmSource,
    pub clf: ClfSource,
    pub purify: PurifyConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub observe: ObserveSection,
    pub ablate: AblateSection,
    pub theorem: TheoremSection,
    pub bound: BoundSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            replicas: 1,
            workers: 1,
            data: DataSection::default(),
            cm: CmSource::default(),
            clf: ClfSource::default(),
            purify: PurifyConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            observe: ObserveSection::default(),
            ablate: AblateSection::default(),
            theorem: TheoremSection::default(),
            bound: BoundSection::default(),
        }
    }
}

impl RunConfig {
    /// Validates whatever can be checked without building the dataset;
    /// shape-dependent rules run again in the pipeline.
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(invalid("replicas must be positive"));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be positive"));
        }
        self.data.validate()?;
        self.cm.validate()?;
        self.purify.validate()?;
        self.attack.validate()?;
        self.eval.validate()?;
        self.observe.validate()?;
        self.ablate.validate()?;
        self.theorem.validate()?;
        self.bound.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Leading rows used for training; the rest form the evaluation pool.
    pub train_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            train_count: 400,
        }
    }
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 {
            return Err(invalid("train_count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Isotropic Gaussian mixture points, one component per class.
    Gaussian(GaussianSpec),
    /// Synthetic grayscale shape images.
    Shapes(ShapeImageSpec),
    /// A dataset directory written by `gen-data`.
    Load { dir: String },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Gaussian(GaussianSpec::default())
    }
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CmSource {
    /// Closed-form single-Gaussian generator; no training involved.
    Analytic {
        #[serde(default)]
        schedule: NoiseSchedule,
        /// Scalar mean broadcast over every coordinate.
        #[serde(default)]
        mu: f64,
        #[serde(default = "default_sigma_x")]
        sigma_x: f64,
    },
    /// Train a network on the run's training split.
    Train(CmTrainConfig),
    /// Load generator parameters saved by `train-cm`.
    Load { path: String },
}

fn default_sigma_x() -> f64 {
    1.0
}

impl Default for CmSource {
    fn default() -> Self {
        // Small enough to train in seconds on the default point mixture
        // while still beating the analytic single-Gaussian mismatch.
        CmSource::Train(CmTrainConfig {
            hidden: vec![48, 48],
            steps: 1200,
            batch_size: 64,
            ..CmTrainConfig::default()
        })
    }
}

impl CmSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            CmSource::Analytic {
                schedule, sigma_x, ..
            } => {
                schedule.validate()?;
                if *sigma_x <= 0.0 {
                    return Err(invalid("sigma_x must be positive"));
                }
                Ok(())
            }
            CmSource::Train(_) | CmSource::Load { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClfSource {
    Train(ClfTrainConfig),
    /// Load classifier parameters saved by `train-clf`.
    Load { path: String },
}

impl Default for ClfSource {
    fn default() -> Self {
        ClfSource::Train(ClfTrainConfig {
            hidden: vec![64, 64],
            steps: 1200,
            batch_size: 64,
            ..ClfTrainConfig::default()
        })
    }
}

// ---------------------------------------------------------------------------
// Attacks and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub pgd: PgdConfig,
    /// Defense samples averaged per gradient query of the surrogate attack.
    pub eot_samples: usize,
    /// Noise level of the single-shot surrogate purifier.
    pub t_diff: f64,
    /// Misclassification weight of the latent disruption attack.
    pub lambda: f64,
    /// Disruption warm-up budget; `None` uses the purifier's iteration count.
    pub disruption_defense_iterations: Option<usize>,
    pub disruption_attack_iterations: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            // The default dataset is a point mixture at unit scale, so the
            // ball is Euclidean; image configs override with a sup-norm
            // pixel budget.
            pgd: PgdConfig {
                epsilon: 0.5,
                norm: crate::attack::NormKind::L2,
                ..PgdConfig::default()
            },
            eot_samples: 20,
            t_diff: 0.5,
            lambda: 1.0,
            disruption_defense_iterations: None,
            disruption_attack_iterations: 200,
        }
    }
}

impl AttackSection {
    pub fn validate(&self) -> Result<()> {
        self.pgd.validate()?;
        if self.eot_samples == 0 {
            return Err(invalid("eot_samples must be positive"));
        }
        if self.t_diff <= 0.0 {
            return Err(invalid("t_diff must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(invalid("lambda must be nonnegative"));
        }
        if self.disruption_attack_iterations == 0 {
            return Err(invalid("disruption_attack_iterations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    /// Classifier on raw inputs.
    None,
    /// Full latent-search purifier with majority vote.
    Cmap,
    /// One-shot noise-and-restore pass, the attacker's own approximation.
    Surrogate,
}

impl DefenseKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Cmap => "cmap",
            DefenseKind::Surrogate => "surrogate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Ball-constrained ascent on the bare classifier loss.
    PgdClassifier,
    /// Ball-constrained ascent through the one-shot surrogate defense with
    /// expectation-over-transforms gradients.
    PgdSurrogate,
    /// Unconstrained latent-space attack on the purifier itself.
    Disruption,
}

impl AttackKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AttackKind::PgdClassifier => "pgd-classifier",
            AttackKind::PgdSurrogate => "pgd-surrogate",
            AttackKind::Disruption => "disruption",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluation-pool prefix size scored per replica.
    pub sample_count: usize,
    pub defenses: Vec<DefenseKind>,
    pub attacks: Vec<AttackKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sample_count: 24,
            defenses: vec![DefenseKind::None, DefenseKind::Cmap],
            attacks: vec![AttackKind::PgdClassifier],
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(invalid("sample_count must be positive"));
        }
        if self.defenses.is_empty() {
            return Err(invalid("need at least one defense"));
        }
        if self.attacks.is_empty() {
            return Err(invalid("need at least one attack"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distribution probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserveSection {
    /// Clean training samples forming the reference feature cloud.
    pub reference_count: usize,
    /// Probes scored per group (clean, adversarial, generated).
    pub probe_count: usize,
    pub eps: EpsConfig,
    /// Shared-edge histogram resolution of the probe discrepancy scores.
    pub bins: usize,
    pub estimator: MmdEstimator,
    /// Draw the generated group by purifying adversarial probes rather
    /// than clean ones.
    pub gen_from_adversarial: bool,
}

impl Default for ObserveSection {
    fn default() -> Self {
        Self {
            reference_count: 100,
            probe_count: 60,
            eps: EpsConfig::default(),
            bins: 40,
            estimator: MmdEstimator::Biased,
            gen_from_adversarial: true,
        }
    }
}

impl ObserveSection {
    pub fn validate(&self) -> Result<()> {
        if self.reference_count < 2 {
            return Err(invalid("reference_count must be at least 2"));
        }
        if self.probe_count == 0 {
            return Err(invalid("probe_count must be positive"));
        }
        if self.bins == 0 {
            return Err(invalid("bins must be positive"));
        }
        // A single probe against the reference cloud has no within-probe
        // pairs, so the unbiased estimator is undefined there.
        if self.estimator == MmdEstimator::Unbiased {
            return Err(invalid(
                "per-probe scores need the biased estimator; unbiased is undefined for singletons",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblateParam {
    /// Structural weight inside the reconstruction objective.
    Alpha,
    /// Latent-moment weight.
    Beta,
    /// Branch count.
    K,
    /// Surrogate noise level.
    TDiff,
    /// Disruption misclassification weight.
    Lambda,
}

impl AblateParam {
    pub fn tag(&self) -> &'static str {
        match self {
            AblateParam::Alpha => "alpha",
            AblateParam::Beta => "beta",
            AblateParam::K => "k",
            AblateParam::TDiff => "t-diff",
            AblateParam::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub param: AblateParam,
    pub values: Vec<f64>,
    /// Iteration stride of the per-iteration accuracy curves emitted for
    /// latent-moment sweeps.
    pub curve_stride: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            param: AblateParam::Beta,
            values: vec![0.0, 5e-4],
            curve_stride: 20,
        }
    }
}

impl AblateSection {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(invalid("ablation needs at least one value"));
        }
        if self.curve_stride == 0 {
            return Err(invalid("curve_stride must be positive"));
        }
        if self.param == AblateParam::K {
            for &v in &self.values {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(invalid("branch-count values must be positive integers"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Verification budgets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSection {
    /// Shared budget; `sigma_x` is replaced per grid entry.
    pub base: TheoremConfig,
    pub sigma_grid: Vec<f64>,
    /// Also run at the data variance where the drift coefficient vanishes,
    /// expecting a statistically zero shift.
    pub include_root_case: bool,
    /// Data variances whose drift coefficient is reported alongside the
    /// bisection root.
    pub root_candidates: Vec<f64>,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self {
            base: TheoremConfig::default(),
            sigma_grid: vec![0.5, 1.0, 2.0],
            include_root_case: true,
            root_candidates: vec![1.0 / 99.0],
        }
    }
}

impl TheoremSection {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.sigma_grid.is_empty() && !self.include_root_case {
            return Err(invalid("theorem grid is empty"));
        }
        if self.sigma_grid.iter().any(|&s| s <= 0.0) {
            return Err(invalid("sigma grid entries must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    /// Randomized bound instances checked in closed form.
    pub random: BoundConfig,
    /// Evaluation samples whose full purifier trajectory replays the check
    /// at every snapshot.
    pub replay_samples: usize,
    /// Per-coordinate magnitude of the sign perturbation used for replays.
    pub replay_eps: f64,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            random: BoundConfig::default(),
            replay_samples: 2,
            replay_eps: 0.05,
        }
    }
}

impl BoundSection {
    pub fn validate(&self) -> Result<()> {
        self.random.validate()?;
        if self.replay_eps < 0.0 {
            return Err(invalid("replay_eps must be nonnegative"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loading and overrides
// ---------------------------------------------------------------------------

/// Applies one `key.path=value` override to a JSON document. Path segments
/// address object fields, or array elements when the segment is an index.
/// The value is parsed as JSON, falling back to a plain string, so both
/// `purify.beta=0.01` and `cm={"kind":"analytic"}` work.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(invalid(format!("override path '{path}' has an empty segment")));
    }
    let leaf: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let last = segments.len() - 1;
    for (i, seg) in segments.iter().enumerate() {
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cur.as_array_mut().ok_or_else(|| {
                invalid(format!("override '{path}': segment '{seg}' indexes a non-array"))
            })?;
            if idx >= arr.len() {
                return Err(invalid(format!(
                    "override '{path}': index {idx} out of range (len {})",
                    arr.len()
                )));
            }
            if i == last {
                arr[idx] = leaf;
                return Ok(());
            }
            cur = &mut arr[idx];
        } else {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            }
            let map = cur.as_object_mut().ok_or_else(|| {
                invalid(format!("override '{path}': segment '{seg}' descends into a scalar"))
            })?;
            if i == last {
                map.insert(seg.to_string(), leaf);
                return Ok(());
            }
            cur = map.entry(seg.to_string()).or_insert(Value::Null);
        }
    }
    unreachable!("override paths are nonempty");
}

/// Loads a run config: optional JSON file, then `--set` overrides, then
/// defaults for everything left unstated. Returns the typed config together
/// with its fully resolved JSON form.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<(RunConfig, Value)> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::InvalidArgument(format!("--config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)?
        }
        None => Value::Object(Default::default()),
    };
    for entry in sets {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got '{entry}'")))?;
        apply_override(&mut value, key.trim(), raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    let resolved = serde_json::to_value(&cfg)?;
    Ok((cfg, resolved))
}

/// Shape-dependent validation deferred until the dataset exists.
pub fn validate_against_data(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if cfg.data.train_count >= dataset.len() {
        return Err(invalid(format!(
            "train_count {} leaves no evaluation pool in a dataset of {}",
            cfg.data.train_count,
            dataset.len()
        )));
    }
    let pool = dataset.len() - cfg.data.train_count;
    if cfg.eval.sample_count > pool {
        return Err(invalid(format!(
            "sample_count {} exceeds the evaluation pool of {pool}",
            cfg.eval.sample_count
        )));
    }
    if cfg.purify.alpha != 0.0 && matches!(dataset.kind, DataKind::Points) {
        return Err(invalid(
            "the structural reconstruction term needs image data; set purify.alpha to 0 for points",
        ));
    }
    Ok(())
}
