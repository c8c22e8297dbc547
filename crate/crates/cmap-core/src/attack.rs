//! White-box attack suite.
//!
//! Everything here ascends a differentiable loss: plain projected gradient
//! steps against a classifier, expectation-over-transformations averaging
//! for stochastic defenses, a differentiable one-shot surrogate of the
//! purification defense, and a two-phase attack that joins the latent
//! search itself and steers it toward misclassification.

use crate::classifier::{clf_input_grad, predict_batch, ClfParams};
use crate::cm::{cm_apply_vjp, cm_generate, cm_generate_vjp, CmParams};
use crate::error::{invalid, Error, Result};
use crate::metrics::{loss_a_grad, loss_d_grad};
use crate::optim::{AdamConfig, AdamState};
use crate::purify::{init_latents, vote, LatentOptimizer, PurifyConfig};
use crate::rng::{Draws, StreamKey};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Linf,
    L2,
}

/// Projects `x` onto the `epsilon`-ball around `center` (and the value box,
/// when given). Applying it twice changes nothing.
pub fn project_ball(
    x: &Tensor,
    center: &Tensor,
    epsilon: f64,
    norm: NormKind,
    range: Option<(f64, f64)>,
) -> Result<Tensor> {
    if !x.same_shape(center) {
        return Err(invalid("projection needs equally shaped tensors"));
    }
    if epsilon < 0.0 {
        return Err(invalid("radius must be nonnegative"));
    }
    let mut out = match norm {
        NormKind::Linf => x.zip_map(center, |v, c| v.min(c + epsilon).max(c - epsilon))?,
        NormKind::L2 => {
            let delta = x.sub(center)?;
            let n = delta.norm_l2();
            if n > epsilon {
                center.zip_map(&delta, |c, d| c + d * (epsilon / n))?
            } else {
                x.clone()
            }
        }
    };
    if let Some((lo, hi)) = range {
        if !(lo < hi) {
            return Err(invalid("value range must be ordered"));
        }
        out = out.clamp(lo, hi)?;
    }
    Ok(out)
}

pub fn perturbation_norm(x_adv: &Tensor, x: &Tensor, norm: NormKind) -> Result<f64> {
    let delta = x_adv.sub(x)?;
    Ok(match norm {
        NormKind::Linf => delta.norm_linf(),
        NormKind::L2 => delta.norm_l2(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub norm: NormKind,
    pub steps: usize,
    /// `None` defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    /// Value box of the data domain, enforced jointly with the ball.
    pub range: Option<(f64, f64)>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            norm: NormKind::Linf,
            steps: 40,
            step_size: None,
            range: None,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(invalid("radius must be nonnegative"));
        }
        if self.steps == 0 {
            return Err(invalid("need at least one step"));
        }
        if let Some(s) = self.step_size {
            if s <= 0.0 {
                return Err(invalid("step size must be positive"));
            }
        }
        if let Some((lo, hi)) = self.range {
            if !(lo < hi) {
                return Err(invalid("value range must be ordered"));
            }
        }
        Ok(())
    }
}

/// Projected gradient ascent of `loss_grad` inside the ball around `x`,
/// starting at `x` itself. Steps follow the gradient sign for the
/// sup-norm ball and the normalized gradient for the Euclidean ball; every
/// iterate is projected back before the next gradient query.
pub fn pgd(
    cfg: &PgdConfig,
    x: &Tensor,
    loss_grad: &mut dyn FnMut(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let step = cfg.step_size.unwrap_or(cfg.epsilon / 4.0);
    let mut current = x.clone();
    for _ in 0..cfg.steps {
        let (_, grad) = loss_grad(&current)?;
        let direction = match cfg.norm {
            NormKind::Linf => grad.map(f64::signum)?,
            NormKind::L2 => {
                let n = grad.norm_l2();
                if n == 0.0 {
                    break;
                }
                grad.scale(1.0 / n)?
            }
        };
        let stepped = current.zip_map(&direction, |v, d| v + step * d)?;
        current = project_ball(&stepped, x, cfg.epsilon, cfg.norm, cfg.range)?;
    }
    Ok(current)
}

/// Untargeted attack on a bare classifier: ascend the cross-entropy of the
/// true label.
pub fn attack_classifier(
    cfg: &PgdConfig,
    clf: &ClfParams,
    x: &Tensor,
    label: usize,
) -> Result<Tensor> {
    pgd(cfg, x, &mut |p| clf_input_grad(clf, p, &[label]))
}

/// Expectation over transformations: averages a stochastic loss/gradient
/// over `n` independent draw streams, one child stream per sample so the
/// average is reproducible.
pub fn eot_gradient(
    n: usize,
    key: &StreamKey,
    f: &mut dyn FnMut(&mut Draws) -> Result<(f64, Tensor)>,
) -> Result<(f64, Tensor)> {
    if n == 0 {
        return Err(invalid("need at least one transformation sample"));
    }
    let mut total_loss = 0.0;
    let mut total_grad: Option<Tensor> = None;
    for j in 0..n {
        let mut draws = key.child(j as u64).draws();
        let (l, g) = f(&mut draws)?;
        total_loss += l;
        total_grad = Some(match total_grad {
            Some(acc) => acc.add(&g)?,
            None => g,
        });
    }
    let scale = 1.0 / n as f64;
    Ok((
        total_loss * scale,
        total_grad.expect("n >= 1").scale(scale)?,
    ))
}

/// One-shot stochastic approximation of the purification defense:
/// perturb to level `t_diff` along a fresh noise draw, then map back with
/// the consistency function. Differentiable in `x` because the draw does
/// not depend on it.
pub fn surrogate_purify(
    params: &CmParams,
    x: &Tensor,
    t_diff: f64,
    draws: &mut Draws,
) -> Result<Tensor> {
    let noisy = add_noise(x, t_diff, draws)?;
    crate::cm::cm_apply(params, &noisy, t_diff)
}

/// Forward value and input pullback of `surrogate_purify` under the same
/// draws.
pub fn surrogate_purify_vjp(
    params: &CmParams,
    x: &Tensor,
    t_diff: f64,
    draws: &mut Draws,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let noisy = add_noise(x, t_diff, draws)?;
    // d(noisy)/dx is the identity, so the chain stops at the model's own
    // input gradient.
    cm_apply_vjp(params, &noisy, t_diff, cotangent)
}

fn add_noise(x: &Tensor, t: f64, draws: &mut Draws) -> Result<Tensor> {
    let mut z = vec![0.0; x.len()];
    draws.fill_normal(&mut z);
    Tensor::from_vec(
        x.shape().to_vec(),
        x.data().iter().zip(&z).map(|(&v, &n)| v + t * n).collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateAttackConfig {
    pub pgd: PgdConfig,
    /// Noise level of the one-shot purification surrogate.
    pub t_diff: f64,
    /// Stochastic defense samples averaged per gradient query.
    pub eot_samples: usize,
    pub seed_lane: u64,
}

impl Default for SurrogateAttackConfig {
    fn default() -> Self {
        Self {
            pgd: PgdConfig {
                epsilon: 8.0 / 255.0,
                norm: NormKind::Linf,
                steps: 40,
                step_size: None,
                range: Some((0.0, 1.0)),
            },
            t_diff: 0.5,
            eot_samples: 20,
            seed_lane: 0,
        }
    }
}

/// Attacks the purify-then-classify chain through its differentiable
/// surrogate: each gradient query averages cross-entropy gradients over
/// `eot_samples` fresh defense draws and pulls them back through the
/// consistency function into input space.
pub fn attack_surrogate(
    cm: &CmParams,
    clf: &ClfParams,
    cfg: &SurrogateAttackConfig,
    x: &Tensor,
    label: usize,
    key: &StreamKey,
) -> Result<Tensor> {
    if cfg.eot_samples == 0 {
        return Err(invalid("need at least one defense sample"));
    }
    let eot_key = key.child(cfg.seed_lane);
    let mut query = 0u64;
    pgd(&cfg.pgd, x, &mut |p| {
        // A fresh key per query keeps defense draws independent across
        // iterations while staying replayable.
        let query_key = eot_key.child(query);
        query += 1;
        eot_gradient(cfg.eot_samples, &query_key, &mut |draws| {
            // Fork the stream first so the pullback replays the same noise.
            let mut replay = draws.clone();
            let purified = surrogate_purify(cm, p, cfg.t_diff, draws)?;
            let (ce, g_purified) = clf_input_grad(clf, &purified, &[label])?;
            let (_, g_input) = surrogate_purify_vjp(cm, p, cfg.t_diff, &mut replay, &g_purified)?;
            Ok((ce, g_input))
        })
    })
}

// ---------------------------------------------------------------------------
// Latent-search disruption
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Defense,
    Attack,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisruptionTraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub loss_a: f64,
    pub loss_d: f64,
    /// Mean cross-entropy of the (projected) branches against the true
    /// label; 0 when the misclassification term is off.
    pub ce: f64,
    pub total: f64,
    /// Largest per-coordinate absolute latent mean — the moment the
    /// misclassification term visibly distorts.
    pub latent_mean_abs_max: f64,
    pub latent_std_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisruptionConfig {
    /// Plain purification iterations run first, mimicking the defender.
    pub defense_iterations: usize,
    /// Iterations with the misclassification term switched on.
    pub attack_iterations: usize,
    /// Weight of the misclassification term; 0 reduces the whole run to
    /// pure purification.
    pub lambda: f64,
    /// Supplies branch count, optimizer, step size, objective weights,
    /// window, init scale, and classification clamp. Its own iteration and
    /// snapshot fields are unused here; the phase counts above set the
    /// budget.
    pub purify: PurifyConfig,
}

impl Default for DisruptionConfig {
    fn default() -> Self {
        Self {
            defense_iterations: 200,
            attack_iterations: 200,
            lambda: 1.0,
            purify: PurifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DisruptionOutcome {
    pub latents: Tensor,
    /// Unclamped generations of the final latents.
    pub generated: Tensor,
    /// Labels of the projected branches.
    pub branch_labels: Vec<usize>,
    pub vote_label: usize,
    /// At least one branch left the true class.
    pub any_branch_flipped: bool,
    pub trace: Vec<DisruptionTraceRow>,
}

fn latent_moments(latents: &Tensor) -> (f64, f64) {
    let k = latents.shape()[0];
    let d = latents.len() / k;
    let data = latents.data();
    let mut max_abs_mean = 0.0f64;
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
        max_abs_mean = max_abs_mean.max(mean.abs());
        std_sum += (var / k as f64).sqrt();
    }
    (max_abs_mean, std_sum / d as f64)
}

/// Joins the defender's latent search and then turns it against the vote:
/// after `defense_iterations` of the plain objective, the remaining steps
/// minimize `L_a + beta L_d - lambda * CE(classifier(Proj(branch)), label)`,
/// with the projection's exact (diagonal) Jacobian inside the pullback.
/// The adversary controls only the latents; the input is never touched.
pub fn consistency_disruption(
    cm: &CmParams,
    clf: &ClfParams,
    cfg: &DisruptionConfig,
    x: &Tensor,
    label: usize,
    key: &StreamKey,
) -> Result<DisruptionOutcome> {
    cfg.purify.validate()?;
    if cfg.lambda < 0.0 {
        return Err(invalid("misclassification weight must be nonnegative"));
    }
    if label >= clf.class_count {
        return Err(invalid(format!("label {label} out of range")));
    }
    let mut latents = init_latents(&cfg.purify, cm, x.shape(), key)?;
    let sigma_target = cm.schedule.sigma_max;
    let k = cfg.purify.k;
    let labels_k = vec![label; k];
    let adam_cfg = AdamConfig::with_learning_rate(cfg.purify.step_size);
    adam_cfg.validate()?;
    let mut adam = AdamState::new(latents.len());
    let total_iters = cfg.defense_iterations + cfg.attack_iterations;
    let mut trace = Vec::with_capacity(total_iters + 1);
    let mut generated = cm_generate(cm, &latents)?;
    for iteration in 0..=total_iters {
        let phase = if iteration < cfg.defense_iterations {
            Phase::Defense
        } else {
            Phase::Attack
        };
        let attack_on = phase == Phase::Attack && cfg.lambda != 0.0;
        let (la, ga) = loss_a_grad(&generated, x, cfg.purify.alpha, &cfg.purify.window)?;
        let (ld, gd) = if cfg.purify.beta == 0.0 {
            (0.0, None)
        } else {
            let (ld, gd) = loss_d_grad(&latents, sigma_target)?;
            (ld, Some(gd))
        };
        let (ce, g_ce) = if attack_on {
            let (staged, mask) = project_branches(&generated, cfg.purify.clamp)?;
            let (ce, g_staged) = clf_input_grad(clf, &staged, &labels_k)?;
            // Exact projection Jacobian: coordinates pinned by the clamp
            // contribute nothing.
            let g = match mask {
                Some(m) => g_staged.hadamard(&m)?,
                None => g_staged,
            };
            (ce, Some(g))
        } else if cfg.lambda != 0.0 {
            // Report the would-be attack term for the trace even while the
            // defense phase ignores it.
            let (staged, _) = project_branches(&generated, cfg.purify.clamp)?;
            let (ce, _) = clf_input_grad(clf, &staged, &labels_k)?;
            (ce, None)
        } else {
            (0.0, None)
        };
        let total = la + cfg.purify.beta * ld - if attack_on { cfg.lambda * ce } else { 0.0 };
        let (mean_abs_max, std_mean) = latent_moments(&latents);
        trace.push(DisruptionTraceRow {
            iteration,
            phase,
            loss_a: la,
            loss_d: ld,
            ce,
            total,
            latent_mean_abs_max: mean_abs_max,
            latent_std_mean: std_mean,
        });
        if iteration == total_iters {
            break;
        }
        let mut cot = ga;
        if let Some(g_ce) = g_ce {
            cot = cot.zip_map(&g_ce, |a, c| a - cfg.lambda * c)?;
        }
        let (_, mut grad) = cm_generate_vjp(cm, &latents, &cot)?;
        if let Some(gd) = gd {
            grad = grad.zip_map(&gd, |g, m| g + cfg.purify.beta * m)?;
        }
        match cfg.purify.optimizer {
            LatentOptimizer::Adaptive => {
                adam.apply_region(&adam_cfg, 0, latents.data_mut(), grad.data())?;
                adam.advance();
            }
            LatentOptimizer::PlainGradient => {
                let buf = latents.data_mut();
                for (z, &g) in buf.iter_mut().zip(grad.data()) {
                    *z -= cfg.purify.step_size * g;
                }
            }
        }
        if latents.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                message: "latents left the finite range".to_string(),
            });
        }
        generated = cm_generate(cm, &latents)?;
    }
    let (staged, _) = project_branches(&generated, cfg.purify.clamp)?;
    let branch_labels = predict_batch(clf, &staged)?;
    let vote_label = vote(&branch_labels, clf.class_count)?;
    let any_branch_flipped = branch_labels.iter().any(|&l| l != label);
    Ok(DisruptionOutcome {
        latents,
        generated,
        branch_labels,
        vote_label,
        any_branch_flipped,
        trace,
    })
}

/// Clamp the branch stack to the value box; the mask marks interior
/// coordinates, i.e. the diagonal of the projection's Jacobian.
fn project_branches(
    generated: &Tensor,
    clamp: Option<(f64, f64)>,
) -> Result<(Tensor, Option<Tensor>)> {
    match clamp {
        None => Ok((generated.clone(), None)),
        Some((lo, hi)) => {
            let staged = generated.clamp(lo, hi)?;
            let mask = generated.map(|v| if v > lo && v < hi { 1.0 } else { 0.0 })?;
            Ok((staged, Some(mask)))
        }
    }
}
