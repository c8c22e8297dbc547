//! Latent-space purification.
//!
//! Instead of denoising an input in place, purification searches the
//! generator's latent space for `K` latents whose one-step generations
//! reconstruct the input while the latents themselves keep the moments of
//! the generator's noise prior. The final prediction majority-votes a
//! classifier across the `K` generated branches, so an attacker has to beat
//! every branch of a stochastic, optimization-defined preimage rather than
//! one fixed network.

use crate::classifier::{predict_batch, ClfParams};
use crate::cm::{cm_generate, cm_generate_vjp, CmParams};
use crate::error::{invalid, Error, Result};
use crate::metrics::{loss_a_grad, loss_d_grad, SsimWindow};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::StreamKey;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentOptimizer {
    /// Adaptive moment steps; robust to the flat sign-gradients of the
    /// absolute-error term.
    Adaptive,
    PlainGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifyConfig {
    /// Number of latent branches optimized and voted over.
    pub k: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Weight of the structural term inside the reconstruction objective;
    /// must be 0 for point data.
    pub alpha: f64,
    /// Weight of the latent-moment objective.
    pub beta: f64,
    pub optimizer: LatentOptimizer,
    pub window: SsimWindow,
    /// Initial latent scale; `None` uses the schedule's top level.
    pub sigma_init: Option<f64>,
    /// Observer callback stride, in iterations.
    pub snapshot_stride: usize,
    /// Clamp applied to generated branches before classification only.
    pub clamp: Option<(f64, f64)>,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            k: 10,
            iterations: 200,
            step_size: 0.5,
            alpha: 0.0,
            beta: 5e-4,
            optimizer: LatentOptimizer::Adaptive,
            window: SsimWindow::Global,
            sigma_init: None,
            snapshot_stride: 10,
            clamp: None,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("need at least one latent branch"));
        }
        if self.k == 1 && self.beta != 0.0 {
            return Err(invalid(
                "the moment objective needs at least two branches; set beta = 0 for k = 1",
            ));
        }
        if self.step_size <= 0.0 {
            return Err(invalid("step size must be positive"));
        }
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(invalid("objective weights must be nonnegative"));
        }
        if self.snapshot_stride == 0 {
            return Err(invalid("snapshot stride must be positive"));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(invalid("clamp range must be ordered"));
            }
        }
        Ok(())
    }
}

/// One objective evaluation along the optimization path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss_a: f64,
    pub loss_d: f64,
    pub total: f64,
    /// L2 norm of the per-coordinate latent mean across branches.
    pub latent_mean_norm: f64,
    /// Mean over coordinates of the per-coordinate latent std.
    pub latent_std_mean: f64,
}

#[derive(Debug, Clone)]
pub struct PurifyOutcome {
    /// Final latents, `[k, ...sample shape]`.
    pub latents: Tensor,
    /// Unclamped generations of the final latents.
    pub generated: Tensor,
    pub trace: Vec<TraceRow>,
}

/// Guides callers observing intermediate states.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &Tensor, &Tensor) -> Result<()>;

/// Overflow inside an optimization step is a divergence of the search, not
/// a malformed input; tag it with the iteration for the caller.
fn diverged_on_nonfinite<T>(r: Result<T>, iteration: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { context } => Error::Diverged {
            iteration,
            message: format!("non-finite {context}"),
        },
        other => other,
    })
}

/// `[k, ...shape]` standard-normal latents scaled by the initial sigma;
/// each branch draws from its own child stream so branch `i` is identical
/// no matter how many siblings exist.
pub fn init_latents(
    cfg: &PurifyConfig,
    params: &CmParams,
    sample_shape: &[usize],
    key: &StreamKey,
) -> Result<Tensor> {
    cfg.validate()?;
    let sigma = cfg.sigma_init.unwrap_or(params.schedule.sigma_max);
    if sigma < 0.0 {
        return Err(invalid("initial latent scale must be nonnegative"));
    }
    let d: usize = sample_shape.iter().product();
    let mut branches = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        let mut draws = key.child(i as u64).draws();
        let mut buf = vec![0.0; d];
        draws.fill_normal(&mut buf);
        for v in &mut buf {
            *v *= sigma;
        }
        branches.push(Tensor::from_vec(sample_shape.to_vec(), buf)?);
    }
    Tensor::stack(&branches)
}

fn moment_summary(latents: &Tensor) -> (f64, f64) {
    let k = latents.shape()[0];
    let d = latents.len() / k;
    let data = latents.data();
    let mut mean_norm2 = 0.0;
    let mut std_sum = 0.0;
    for c in 0..d {
        let mut mean = 0.0;
        for i in 0..k {
            mean += data[i * d + c];
        }
        mean /= k as f64;
        let mut var = 0.0;
        for i in 0..k {
            let r = data[i * d + c] - mean;
            var += r * r;
        }
        var /= k as f64;
        mean_norm2 += mean * mean;
        std_sum += var.sqrt();
    }
    (mean_norm2.sqrt(), std_sum / d as f64)
}

/// Runs the latent search against reference `x_hat` and reports the final
/// latents, their generations, and the objective trace. The observer, when
/// given, fires every `snapshot_stride` iterations and after the last one,
/// receiving `(iteration, latents, generated)`.
pub fn purify_with_observer(
    params: &CmParams,
    cfg: &PurifyConfig,
    x_hat: &Tensor,
    key: &StreamKey,
    mut observer: Option<Observer<'_>>,
) -> Result<PurifyOutcome> {
    cfg.validate()?;
    let mut latents = init_latents(cfg, params, x_hat.shape(), key)?;
    let sigma_target = params.schedule.sigma_max;
    let total_len = latents.len();
    let adam_cfg = AdamConfig::with_learning_rate(cfg.step_size);
    adam_cfg.validate()?;
    let mut adam = AdamState::new(total_len);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut generated = cm_generate(params, &latents)?;
    for iteration in 0..=cfg.iterations {
        let (la, ga) =
            diverged_on_nonfinite(loss_a_grad(&generated, x_hat, cfg.alpha, &cfg.window), iteration)?;
        let (ld, gd) = if cfg.beta == 0.0 {
            (0.0, None)
        } else {
            let (ld, gd) = diverged_on_nonfinite(loss_d_grad(&latents, sigma_target), iteration)?;
            (ld, Some(gd))
        };
        let total = la + cfg.beta * ld;
        let (mean_norm, std_mean) = moment_summary(&latents);
        trace.push(TraceRow {
            iteration,
            loss_a: la,
            loss_d: ld,
            total,
            latent_mean_norm: mean_norm,
            latent_std_mean: std_mean,
        });
        if let Some(obs) = observer.as_mut() {
            if iteration % cfg.snapshot_stride == 0 || iteration == cfg.iterations {
                obs(iteration, &latents, &generated)?;
            }
        }
        if iteration == cfg.iterations {
            break;
        }
        // Pull the reconstruction gradient back through the generator and
        // add the direct latent-moment gradient.
        let (_, mut grad) = diverged_on_nonfinite(cm_generate_vjp(params, &latents, &ga), iteration)?;
        if let Some(gd) = gd {
            grad = diverged_on_nonfinite(grad.zip_map(&gd, |g, m| g + cfg.beta * m), iteration)?;
        }
        match cfg.optimizer {
            LatentOptimizer::Adaptive => {
                adam.apply_region(&adam_cfg, 0, latents.data_mut(), grad.data())?;
                adam.advance();
            }
            LatentOptimizer::PlainGradient => {
                let buf = latents.data_mut();
                for (z, &g) in buf.iter_mut().zip(grad.data()) {
                    *z -= cfg.step_size * g;
                }
            }
        }
        if latents.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                message: "latents left the finite range".to_string(),
            });
        }
        generated = diverged_on_nonfinite(cm_generate(params, &latents), iteration)?;
    }
    Ok(PurifyOutcome {
        latents,
        generated,
        trace,
    })
}

pub fn purify(
    params: &CmParams,
    cfg: &PurifyConfig,
    x_hat: &Tensor,
    key: &StreamKey,
) -> Result<PurifyOutcome> {
    purify_with_observer(params, cfg, x_hat, key, None)
}

/// Majority label among `labels`; ties resolve to the lowest label.
pub fn vote(labels: &[usize], class_count: usize) -> Result<usize> {
    if labels.is_empty() {
        return Err(invalid("cannot vote over zero branches"));
    }
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        if l >= class_count {
            return Err(invalid(format!("label {l} out of range")));
        }
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurifyPrediction {
    pub label: usize,
    /// Ballot per class.
    pub votes: Vec<usize>,
    /// Classifier output per branch, in branch order.
    pub branch_labels: Vec<usize>,
}

/// Purifies `x` and classifies each generated branch; generations are
/// clamped to `cfg.clamp` (when set) for classification only — the
/// optimization itself always sees unclamped values.
pub fn purify_predict(
    params: &CmParams,
    clf: &ClfParams,
    cfg: &PurifyConfig,
    x: &Tensor,
    key: &StreamKey,
) -> Result<(PurifyPrediction, PurifyOutcome)> {
    let outcome = purify(params, cfg, x, key)?;
    let prediction = classify_branches(clf, cfg, &outcome.generated)?;
    Ok((prediction, outcome))
}

/// Votes a classifier over an already generated branch stack.
pub fn classify_branches(
    clf: &ClfParams,
    cfg: &PurifyConfig,
    generated: &Tensor,
) -> Result<PurifyPrediction> {
    let staged = match cfg.clamp {
        Some((lo, hi)) => generated.clamp(lo, hi)?,
        None => generated.clone(),
    };
    let branch_labels = predict_batch(clf, &staged)?;
    let label = vote(&branch_labels, clf.class_count)?;
    let mut votes = vec![0usize; clf.class_count];
    for &l in &branch_labels {
        votes[l] += 1;
    }
    Ok(PurifyPrediction {
        label,
        votes,
        branch_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClfParams;
    use crate::cm::NoiseSchedule;
    use crate::mlp::{Activation, Layer, MlpParams};

    fn analytic_params(d: usize) -> CmParams {
        CmParams::analytic(
            NoiseSchedule::default(),
            Tensor::zeros(vec![d]),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn latent_init_is_deterministic_per_branch() {
        let params = analytic_params(3);
        let cfg = PurifyConfig {
            k: 4,
            ..Default::default()
        };
        let key = StreamKey::new(100, 0);
        let a = init_latents(&cfg, &params, &[3], &key).unwrap();
        let b = init_latents(&cfg, &params, &[3], &key).unwrap();
        assert_eq!(a.data(), b.data());
        // Branch i does not depend on how many branches follow it.
        let wider = PurifyConfig {
            k: 6,
            ..Default::default()
        };
        let c = init_latents(&wider, &params, &[3], &key).unwrap();
        assert_eq!(&c.data()[..12], a.data());
        // Branches differ from each other.
        assert_ne!(&a.data()[..3], &a.data()[3..6]);
        // Scale follows the schedule's top level.
        let spread = a.data().iter().map(|v| v * v).sum::<f64>() / 12.0;
        assert!(spread > 1000.0, "variance {spread} too small for sigma 80");
    }

    #[test]
    fn zero_scale_initializes_at_the_origin() {
        let params = analytic_params(2);
        let cfg = PurifyConfig {
            k: 2,
            sigma_init: Some(0.0),
            ..Default::default()
        };
        let z = init_latents(&cfg, &params, &[2], &StreamKey::new(1, 1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vote_majority_and_tie_break() {
        assert_eq!(vote(&[1, 1, 2], 3).unwrap(), 1);
        assert_eq!(vote(&[2, 0, 2, 0], 3).unwrap(), 0);
        assert_eq!(vote(&[1], 2).unwrap(), 1);
        assert!(vote(&[], 2).is_err());
        assert!(vote(&[5], 2).is_err());
    }

    #[test]
    fn convex_case_reconstructs_the_reference() {
        // beta = 0 on the linear analytic generator is a convex problem in
        // the latents; the search must cut the reconstruction error hard.
        let params = analytic_params(2);
        let cfg = PurifyConfig {
            k: 3,
            beta: 0.0,
            iterations: 200,
            ..Default::default()
        };
        let x_hat = Tensor::vector(vec![0.6, -0.4]).unwrap();
        let out = purify(&params, &cfg, &x_hat, &StreamKey::new(101, 0)).unwrap();
        let first = out.trace.first().unwrap();
        let last = out.trace.last().unwrap();
        assert_eq!(first.iteration, 0);
        assert_eq!(last.iteration, 200);
        assert_eq!(out.trace.len(), 201);
        assert!(
            last.loss_a <= 0.2 * first.loss_a,
            "reconstruction error {} did not reach 20% of {}",
            last.loss_a,
            first.loss_a
        );
        assert!(last.total < first.total);
    }

    #[test]
    fn moment_objective_holds_latents_near_the_prior_scale() {
        let params = analytic_params(2);
        let cfg = PurifyConfig {
            k: 8,
            iterations: 120,
            ..Default::default()
        };
        let x_hat = Tensor::vector(vec![0.3, 0.1]).unwrap();
        let out = purify(&params, &cfg, &x_hat, &StreamKey::new(102, 0)).unwrap();
        let last = out.trace.last().unwrap();
        let sigma = params.schedule.sigma_max;
        assert!(
            (last.latent_std_mean - sigma).abs() < 0.2 * sigma,
            "latent spread {} strayed from {}",
            last.latent_std_mean,
            sigma
        );
    }

    #[test]
    fn divergence_is_reported_with_the_iteration() {
        // The moment gradient grows linearly in the latents, so an absurd
        // plain-gradient step blows the iterates past the float range.
        let params = analytic_params(2);
        let cfg = PurifyConfig {
            k: 2,
            beta: 5e-4,
            iterations: 10,
            step_size: 1e160,
            optimizer: LatentOptimizer::PlainGradient,
            ..Default::default()
        };
        let x_hat = Tensor::vector(vec![0.5, 0.5]).unwrap();
        match purify(&params, &cfg, &x_hat, &StreamKey::new(103, 0)) {
            Err(Error::Diverged { iteration, .. }) => assert!(iteration < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn observer_fires_on_stride_and_final_iteration() {
        let params = analytic_params(2);
        let cfg = PurifyConfig {
            k: 2,
            beta: 0.0,
            iterations: 25,
            snapshot_stride: 10,
            ..Default::default()
        };
        let x_hat = Tensor::vector(vec![0.1, 0.2]).unwrap();
        let mut seen = Vec::new();
        let mut obs = |it: usize, z: &Tensor, g: &Tensor| {
            assert_eq!(z.shape(), &[2, 2]);
            assert_eq!(g.shape(), &[2, 2]);
            seen.push(it);
            Ok(())
        };
        purify_with_observer(&params, &cfg, &x_hat, &StreamKey::new(104, 0), Some(&mut obs))
            .unwrap();
        assert_eq!(seen, vec![0, 10, 20, 25]);
    }

    #[test]
    fn voting_prediction_follows_the_reconstruction() {
        let params = analytic_params(2);
        // Classifier: class 0 iff the first coordinate is positive.
        let clf = ClfParams {
            net: MlpParams::from_layers(vec![Layer {
                weight: Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
                bias: Tensor::zeros(vec![2]),
                activation: Activation::Identity,
            }])
            .unwrap(),
            class_count: 2,
            scaling: None,
        };
        let cfg = PurifyConfig {
            k: 5,
            beta: 0.0,
            iterations: 150,
            ..Default::default()
        };
        let x = Tensor::vector(vec![0.8, 0.0]).unwrap();
        let (pred, out) = purify_predict(&params, &clf, &cfg, &x, &StreamKey::new(105, 0)).unwrap();
        assert_eq!(pred.label, 0);
        assert_eq!(pred.branch_labels.len(), 5);
        assert_eq!(pred.votes.iter().sum::<usize>(), 5);
        assert_eq!(out.generated.shape(), &[5, 2]);
    }

    #[test]
    fn classification_clamp_does_not_touch_the_optimization() {
        let params = analytic_params(1);
        let cfg = PurifyConfig {
            k: 2,
            beta: 0.0,
            iterations: 300,
            clamp: Some((0.0, 1.0)),
            ..Default::default()
        };
        // Reference outside the clamp range: generations should approach it
        // anyway because clamping only applies at classification time.
        let x_hat = Tensor::vector(vec![2.0]).unwrap();
        let out = purify(&params, &cfg, &x_hat, &StreamKey::new(106, 0)).unwrap();
        assert!(out.generated.max() > 1.0);
        let clf = ClfParams {
            net: MlpParams::from_layers(vec![Layer {
                weight: Tensor::from_vec(vec![2, 1], vec![1.0, -1.0]).unwrap(),
                bias: Tensor::zeros(vec![2]),
                activation: Activation::Identity,
            }])
            .unwrap(),
            class_count: 2,
            scaling: None,
        };
        let pred = classify_branches(&clf, &cfg, &out.generated).unwrap();
        assert_eq!(pred.label, 0);
    }

    #[test]
    fn config_validation_rejects_inconsistent_settings() {
        let bad = PurifyConfig {
            k: 1,
            beta: 1e-4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PurifyConfig {
            step_size: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PurifyConfig {
            clamp: Some((1.0, 0.0)),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
