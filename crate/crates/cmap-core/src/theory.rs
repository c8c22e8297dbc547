//! Numerical checks of the pipeline's two analytic claims.
//!
//! The first claim concerns forward-diffusing a sample and its perturbed
//! copy to the latent level: the gap between the two latents is Gaussian
//! with a drift proportional to the perturbation and a variance set by an
//! explicit time expectation. The second is a triangle-inequality bound
//! tying reconstruction error against the clean sample to the optimization
//! objective evaluated on the perturbed one. Both are verified here against
//! Monte-Carlo simulation and randomized instances, with every analytic
//! constant cross-checked through an independent quadrature path.

use crate::cm::{cm_generate, CmParams, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::metrics::{loss_a, loss_d, SsimWindow};
use crate::purify::{purify_with_observer, PurifyConfig, PurifyOutcome};
use crate::quadrature::{integrate, DEFAULT_NODES};
use crate::rng::{sample_gaussian, StreamKey};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Closed forms and their quadrature twins
// ---------------------------------------------------------------------------

/// Drift coefficient of the latent gap: `E_t[t/(sigma_x^2+t^2)] - 1` over
/// `t ~ U[0,1]`, in closed form `ln(1 + 1/sigma_x^2)/2 - 1`.
pub fn coeff_mu(sigma_x: f64) -> Result<f64> {
    check_sigma(sigma_x)?;
    Ok(coeff_mu_of_variance(sigma_x * sigma_x))
}

/// Same coefficient parameterized by the data variance `sigma_x^2`; the
/// form the root search bisects on.
pub fn coeff_mu_of_variance(sigma_x2: f64) -> f64 {
    0.5 * (1.0 + 1.0 / sigma_x2).ln() - 1.0
}

/// Independent evaluation of `coeff_mu` by direct quadrature.
pub fn coeff_mu_quadrature(sigma_x: f64) -> Result<f64> {
    check_sigma(sigma_x)?;
    let s2 = sigma_x * sigma_x;
    Ok(integrate(|t| t / (s2 + t * t), 0.0, 1.0, DEFAULT_NODES)? - 1.0)
}

/// Per-branch latent noise variance: `E_t[t^2/(sigma_x^2+t^2)]` over
/// `t ~ U[0,1]`, in closed form `1 - sigma_x * arctan(1/sigma_x)`.
pub fn sigma_cl2(sigma_x: f64) -> Result<f64> {
    check_sigma(sigma_x)?;
    Ok(1.0 - sigma_x * (1.0 / sigma_x).atan())
}

/// Independent evaluation of `sigma_cl2` by direct quadrature.
pub fn sigma_cl2_quadrature(sigma_x: f64) -> Result<f64> {
    check_sigma(sigma_x)?;
    let s2 = sigma_x * sigma_x;
    integrate(|t| t * t / (s2 + t * t), 0.0, 1.0, DEFAULT_NODES)
}

fn check_sigma(sigma_x: f64) -> Result<()> {
    if !(sigma_x > 0.0) || !sigma_x.is_finite() {
        return Err(invalid(format!("data scale must be positive, got {sigma_x}")));
    }
    Ok(())
}

/// Compensated (Kahan) accumulator so reductions stay order-insensitive at
/// the 1e-12 tolerances the reports quote.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum
    }
}

// ---------------------------------------------------------------------------
// Forward-diffusion simulation
// ---------------------------------------------------------------------------

/// Whether the perturbed branch reuses the clean branch's noise path.
/// `Independent` is the construction under test (it doubles the gap
/// variance); `Shared` is a diagnostic that cancels the noise entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCoupling {
    Independent,
    Shared,
}

/// Splits `n` into `odd * 2^levels`.
fn dyadic_split(n: usize) -> (usize, u32) {
    let levels = n.trailing_zeros();
    (n >> levels, levels)
}

/// Brownian increments of `d` coordinates over `[0,1)` split into
/// `t_steps` equal pieces, laid out `[step][coordinate]`.
///
/// The path is built coarse-to-fine: the odd base resolution draws plain
/// increments, then each halving refines every interval with a bridge
/// midpoint. Doubling `t_steps` therefore refines the *same* path rather
/// than drawing a new one, which is what lets step-halving comparisons see
/// discretization error instead of fresh Monte-Carlo noise.
fn brownian_increments(key: &StreamKey, t_steps: usize, d: usize) -> Vec<f64> {
    let (base, levels) = dyadic_split(t_steps);
    let mut coarse = vec![0.0; base * d];
    let mut draws = key.child(0).draws();
    draws.fill_normal(&mut coarse);
    let scale = (1.0 / base as f64).sqrt();
    for v in &mut coarse {
        *v *= scale;
    }
    let mut dt = 1.0 / base as f64;
    for level in 1..=levels {
        let mut draws = key.child(level as u64).draws();
        let half_std = dt.sqrt() * 0.5;
        let mut fine = vec![0.0; coarse.len() * 2];
        let mut xi = vec![0.0; d];
        for m in 0..coarse.len() / d {
            draws.fill_normal(&mut xi);
            for c in 0..d {
                let whole = coarse[m * d + c];
                let bridge = half_std * xi[c];
                fine[(2 * m) * d + c] = 0.5 * whole + bridge;
                fine[(2 * m + 1) * d + c] = 0.5 * whole - bridge;
            }
        }
        coarse = fine;
        dt *= 0.5;
    }
    coarse
}

/// Forward-diffuses `x` and `x + eps_a` to the latent level along the
/// discretized score dynamics and returns both endpoints.
///
/// Each of the `t_steps` left-endpoint times `t_i = i/T` contributes the
/// score term in two parts: the systematic pull `-dt * t_i (x0 - mu) /
/// (sigma_x^2 + t_i^2)` evaluated at the branch's own starting point, and
/// the whitened fluctuation `t_i / sqrt(sigma_x^2 + t_i^2)` applied to a
/// Brownian increment of width `dt`. The square-root step weight on the
/// fluctuation is what keeps the accumulated noise variance at its
/// analytic value instead of vanishing with the step size.
pub fn simulate_latent_pair(
    x: &Tensor,
    eps_a: &Tensor,
    sigma_x: f64,
    mu: &Tensor,
    t_steps: usize,
    coupling: NoiseCoupling,
    key: &StreamKey,
) -> Result<(Tensor, Tensor)> {
    check_sigma(sigma_x)?;
    if !x.same_shape(eps_a) || !x.same_shape(mu) {
        return Err(invalid("sample, perturbation, and mean must share a shape"));
    }
    if t_steps == 0 {
        return Err(invalid("need at least one diffusion step"));
    }
    let d = x.len();
    let clean_path = brownian_increments(&key.child(0), t_steps, d);
    let adv_path = match coupling {
        NoiseCoupling::Shared => clean_path.clone(),
        NoiseCoupling::Independent => brownian_increments(&key.child(1), t_steps, d),
    };
    let s2 = sigma_x * sigma_x;
    let dt = 1.0 / t_steps as f64;
    let mut clean: Vec<f64> = x.data().to_vec();
    let mut adv: Vec<f64> = x
        .data()
        .iter()
        .zip(eps_a.data())
        .map(|(&v, &e)| v + e)
        .collect();
    let x0_clean: Vec<f64> = clean.clone();
    let x0_adv: Vec<f64> = adv.clone();
    for i in 0..t_steps {
        let t = i as f64 * dt;
        let denom = s2 + t * t;
        let pull = dt * t / denom;
        let spread = t / denom.sqrt();
        for c in 0..d {
            let m = mu.data()[c];
            clean[c] += spread * clean_path[i * d + c] - pull * (x0_clean[c] - m);
            adv[c] += spread * adv_path[i * d + c] - pull * (x0_adv[c] - m);
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), clean)?,
        Tensor::from_vec(x.shape().to_vec(), adv)?,
    ))
}

// ---------------------------------------------------------------------------
// Latent-gap verification
// ---------------------------------------------------------------------------

/// Perturbation specification: an explicit vector, or a sup-norm magnitude
/// realized with random signs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsSpec {
    Vector(Vec<f64>),
    InfMagnitude(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    pub dimension: usize,
    pub sigma_x: f64,
    /// Data mean, broadcast over coordinates. The latent gap must not
    /// depend on it; the simulation keeps it to prove that.
    pub mu: f64,
    pub epsilon: EpsSpec,
    pub t_steps: usize,
    pub trials: usize,
    pub seed: u64,
    /// Per-coordinate gate on `|empirical - analytic| / SE`.
    pub z_threshold: f64,
    /// Relative band around the analytic variance, e.g. 0.04 for 4%.
    pub variance_band: f64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            dimension: 8,
            sigma_x: 1.0,
            mu: 0.0,
            epsilon: EpsSpec::InfMagnitude(0.1),
            t_steps: 256,
            trials: 200_000,
            seed: 7,
            z_threshold: 4.0,
            variance_band: 0.04,
        }
    }
}

impl TheoremConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_x)?;
        if self.dimension == 0 {
            return Err(invalid("need at least one coordinate"));
        }
        if self.t_steps < 100 {
            return Err(invalid("discretization too coarse; need at least 100 steps"));
        }
        if self.trials < 10_000 {
            return Err(invalid("need at least 10^4 trials for the variance gate"));
        }
        if !(self.z_threshold > 0.0) {
            return Err(invalid("z threshold must be positive"));
        }
        if !(self.variance_band > 0.0 && self.variance_band < 1.0) {
            return Err(invalid("variance band must lie in (0, 1)"));
        }
        if let EpsSpec::Vector(v) = &self.epsilon {
            if v.len() != self.dimension {
                return Err(invalid("perturbation vector length must match dimension"));
            }
        }
        Ok(())
    }

    /// Concrete perturbation vector; sign draws come from a dedicated lane
    /// of the config seed.
    pub fn realize_epsilon(&self) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match &self.epsilon {
            EpsSpec::Vector(v) => v.clone(),
            EpsSpec::InfMagnitude(m) => {
                if *m < 0.0 {
                    return Err(invalid("perturbation magnitude must be nonnegative"));
                }
                let mut draws = StreamKey::new(self.seed, 0).draws();
                (0..self.dimension)
                    .map(|_| if draws.uniform() < 0.5 { -*m } else { *m })
                    .collect()
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub config: TheoremConfig,
    /// Realized perturbation vector.
    pub epsilon: Vec<f64>,
    /// Analytic gap mean per coordinate: `coeff_mu(sigma_x) * epsilon`.
    pub analytic_mean: Vec<f64>,
    /// Analytic gap variance, `2 * sigma_cl2(sigma_x)`, identical across
    /// coordinates.
    pub analytic_variance: f64,
    pub empirical_mean: Vec<f64>,
    pub empirical_variance: Vec<f64>,
    /// Standard error of each empirical mean under the analytic variance.
    pub mean_standard_error: f64,
    pub z_scores: Vec<f64>,
    /// Pooled empirical variance over the analytic value.
    pub variance_ratio: f64,
    pub mean_pass: bool,
    pub variance_pass: bool,
    pub pass: bool,
}

/// Runs the Monte-Carlo check of the latent-gap law and gates the result:
/// every coordinate mean within `z_threshold` standard errors of its
/// analytic value, pooled variance within `variance_band` of the analytic
/// variance. Failures land in the report flags, never as errors.
pub fn verify_theorem1(cfg: &TheoremConfig) -> Result<TheoremReport> {
    verify_theorem1_with_sink(cfg, None)
}

/// Same as [`verify_theorem1`], streaming each trial's per-coordinate gap
/// to `sink` for external analysis.
pub fn verify_theorem1_with_sink(
    cfg: &TheoremConfig,
    mut sink: Option<&mut dyn FnMut(usize, &[f64]) -> Result<()>>,
) -> Result<TheoremReport> {
    cfg.validate()?;
    let eps_vec = cfg.realize_epsilon()?;
    let d = cfg.dimension;
    let eps = Tensor::from_vec(vec![d], eps_vec.clone())?;
    let mu = Tensor::from_vec(vec![d], vec![cfg.mu; d])?;
    let coeff = coeff_mu(cfg.sigma_x)?;
    let analytic_mean: Vec<f64> = eps_vec.iter().map(|&e| coeff * e).collect();
    let analytic_variance = 2.0 * sigma_cl2(cfg.sigma_x)?;

    let trial_root = StreamKey::new(cfg.seed, 1);
    let mut sums = vec![Kahan::default(); d];
    let mut sq_sums = vec![Kahan::default(); d];
    let mut gap = vec![0.0; d];
    for trial in 0..cfg.trials {
        let trial_key = trial_root.child(trial as u64);
        let x = sample_gaussian(
            &mut trial_key.child(2).draws(),
            vec![d],
            cfg.mu,
            cfg.sigma_x,
        )?;
        let (clean, adv) = simulate_latent_pair(
            &x,
            &eps,
            cfg.sigma_x,
            &mu,
            cfg.t_steps,
            NoiseCoupling::Independent,
            &trial_key,
        )?;
        for c in 0..d {
            gap[c] = clean.data()[c] - adv.data()[c];
            sums[c].add(gap[c]);
            sq_sums[c].add(gap[c] * gap[c]);
        }
        if let Some(s) = sink.as_mut() {
            s(trial, &gap)?;
        }
    }

    let n = cfg.trials as f64;
    let empirical_mean: Vec<f64> = sums.iter().map(|k| k.value() / n).collect();
    let empirical_variance: Vec<f64> = (0..d)
        .map(|c| (sq_sums[c].value() - n * empirical_mean[c] * empirical_mean[c]) / (n - 1.0))
        .collect();
    let mean_standard_error = (analytic_variance / n).sqrt();
    let z_scores: Vec<f64> = (0..d)
        .map(|c| (empirical_mean[c] - analytic_mean[c]) / mean_standard_error)
        .collect();
    let pooled = empirical_variance.iter().sum::<f64>() / d as f64;
    let variance_ratio = pooled / analytic_variance;
    let mean_pass = z_scores.iter().all(|z| z.abs() < cfg.z_threshold);
    let variance_pass =
        variance_ratio >= 1.0 - cfg.variance_band && variance_ratio <= 1.0 + cfg.variance_band;
    Ok(TheoremReport {
        config: cfg.clone(),
        epsilon: eps_vec,
        analytic_mean,
        analytic_variance,
        empirical_mean,
        empirical_variance,
        mean_standard_error,
        z_scores,
        variance_ratio,
        mean_pass,
        variance_pass,
        pass: mean_pass && variance_pass,
    })
}

// ---------------------------------------------------------------------------
// Root of the drift coefficient
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RootFindings {
    /// Bisection zero of the drift coefficient, in data-variance units.
    pub root_sigma_x2: f64,
    /// Analytic zero `1/(e^2 - 1)` for comparison.
    pub closed_form_sigma_x2: f64,
    /// Coefficient magnitude at the bisection root.
    pub residual: f64,
    /// Coefficient evaluated at caller-supplied candidate variances,
    /// `(sigma_x^2, coefficient)` pairs; a visibly nonzero coefficient
    /// rules the candidate out as a root.
    pub candidates: Vec<(f64, f64)>,
}

/// Bisects the drift coefficient over data variance `(1e-6, 10)` to 1e-10
/// and evaluates it at any extra `candidates` for the report.
pub fn drift_coefficient_root(candidates: &[f64]) -> RootFindings {
    let mut lo = 1e-6;
    let mut hi = 10.0;
    // coeff(lo) > 0 > coeff(hi): the coefficient is strictly decreasing in
    // the variance.
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if coeff_mu_of_variance(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let e2 = std::f64::consts::E * std::f64::consts::E;
    RootFindings {
        root_sigma_x2: root,
        closed_form_sigma_x2: 1.0 / (e2 - 1.0),
        residual: coeff_mu_of_variance(root).abs(),
        candidates: candidates
            .iter()
            .map(|&v| (v, coeff_mu_of_variance(v)))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Reconstruction bound
// ---------------------------------------------------------------------------

/// Slack below this floor counts as a violation; anything above is
/// floating-point noise on a true inequality.
pub const BOUND_SLACK_FLOOR: f64 = -1e-12;

/// Both sides of the reconstruction bound for one latent set:
/// left, the mean absolute error of the generations against the *clean*
/// sample plus the weighted moment objective; right, the same moment term
/// plus the optimization objective against the *perturbed* sample plus the
/// constant `mean|eps| + alpha`. Every error term is an element mean, so
/// the two sides stay on one scale for any resolution.
pub fn reconstruction_bound_sides(
    params: &CmParams,
    latents: &Tensor,
    x_clean: &Tensor,
    eps_a: &Tensor,
    alpha: f64,
    beta: f64,
    window: &SsimWindow,
) -> Result<(f64, f64)> {
    if !x_clean.same_shape(eps_a) {
        return Err(invalid("sample and perturbation must share a shape"));
    }
    let generated = cm_generate(params, latents)?;
    let l_d = if beta == 0.0 {
        0.0
    } else {
        loss_d(latents, params.schedule.sigma_max)?
    };
    let mae_clean = loss_a(&generated, x_clean, 0.0, window)?;
    let lhs = mae_clean + beta * l_d;
    let x_hat = x_clean.add(eps_a)?;
    let l_a = loss_a(&generated, &x_hat, alpha, window)?;
    let c = eps_a.data().iter().map(|v| v.abs()).sum::<f64>() / eps_a.len() as f64 + alpha;
    Ok((lhs, c + l_a + beta * l_d))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub instances: usize,
    pub sample_shape: Vec<usize>,
    /// Latent branches per instance.
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub window: SsimWindow,
    /// Mean absolute perturbation drawn uniformly from `[0, this]` per
    /// instance.
    pub eps_mean_max: f64,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            sample_shape: vec![8],
            k: 5,
            alpha: 0.0,
            beta: 5e-4,
            window: SsimWindow::Global,
            eps_mean_max: 0.1,
            seed: 11,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(invalid("need at least one instance"));
        }
        if self.sample_shape.is_empty() || self.sample_shape.iter().any(|&s| s == 0) {
            return Err(invalid("sample shape must be non-empty and positive"));
        }
        if self.k == 0 {
            return Err(invalid("need at least one latent branch"));
        }
        if self.k == 1 && self.beta != 0.0 {
            return Err(invalid("the moment objective needs at least two branches"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.eps_mean_max < 0.0 {
            return Err(invalid("weights and perturbation scale must be nonnegative"));
        }
        if self.alpha != 0.0 && self.sample_shape.len() != 2 {
            return Err(invalid("the structural term needs two-dimensional samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub instances: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub mean_slack: f64,
    pub max_slack: f64,
}

fn summarize_slacks(slacks: &[f64]) -> Result<BoundReport> {
    if slacks.is_empty() {
        return Err(invalid("no instances evaluated"));
    }
    let mut acc = Kahan::default();
    for &s in slacks {
        acc.add(s);
    }
    Ok(BoundReport {
        instances: slacks.len(),
        violations: slacks.iter().filter(|&&s| s < BOUND_SLACK_FLOOR).count(),
        min_slack: slacks.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_slack: acc.value() / slacks.len() as f64,
        max_slack: slacks.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Randomized check of the reconstruction bound: random latent sets,
/// perturbations, and analytic generator parameters per instance; reports
/// the slack distribution and counts violations below the floor.
pub fn verify_bound(cfg: &BoundConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let d: usize = cfg.sample_shape.iter().product();
    let schedule = NoiseSchedule::default();
    let sigma_max = schedule.sigma_max;
    let mut slacks = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let key = StreamKey::new(cfg.seed, 2).child(instance as u64);
        let mut draws = key.draws();
        let sigma_x = draws.uniform_in(0.3, 3.0);
        let mu = sample_gaussian(&mut draws, cfg.sample_shape.clone(), 0.0, 0.5)?;
        let params = CmParams::analytic(schedule.clone(), mu, sigma_x)?;
        let x_clean = sample_gaussian(&mut draws, cfg.sample_shape.clone(), 0.5, 0.5)?;
        let eps_a = {
            let target = draws.uniform_in(0.0, cfg.eps_mean_max);
            let raw = sample_gaussian(&mut draws, cfg.sample_shape.clone(), 0.0, 1.0)?;
            let mean_abs = raw.data().iter().map(|v| v.abs()).sum::<f64>() / d as f64;
            if mean_abs == 0.0 {
                Tensor::zeros(cfg.sample_shape.clone())
            } else {
                raw.scale(target / mean_abs)?
            }
        };
        let latent_scale = draws.uniform_in(0.0, 2.0 * sigma_max);
        let mut branch_shape = vec![cfg.k];
        branch_shape.extend_from_slice(&cfg.sample_shape);
        let latents = sample_gaussian(&mut draws, branch_shape, 0.0, latent_scale)?;
        let (lhs, rhs) = reconstruction_bound_sides(
            &params, &latents, &x_clean, &eps_a, cfg.alpha, cfg.beta, &cfg.window,
        )?;
        slacks.push(rhs - lhs);
    }
    summarize_slacks(&slacks)
}

/// Replays a purification run on `x_clean + eps_a` and evaluates the bound
/// at every observer snapshot along the trajectory, including the final
/// iterate.
pub fn replay_bound(
    params: &CmParams,
    purify_cfg: &PurifyConfig,
    x_clean: &Tensor,
    eps_a: &Tensor,
    key: &StreamKey,
) -> Result<(BoundReport, PurifyOutcome)> {
    if !x_clean.same_shape(eps_a) {
        return Err(invalid("sample and perturbation must share a shape"));
    }
    let x_hat = x_clean.add(eps_a)?;
    let mut slacks = Vec::new();
    let mut check = |_: usize, latents: &Tensor, _: &Tensor| -> Result<()> {
        let (lhs, rhs) = reconstruction_bound_sides(
            params,
            latents,
            x_clean,
            eps_a,
            purify_cfg.alpha,
            purify_cfg.beta,
            &purify_cfg.window,
        )?;
        slacks.push(rhs - lhs);
        Ok(())
    };
    let outcome = purify_with_observer(params, purify_cfg, &x_hat, key, Some(&mut check))?;
    Ok((summarize_slacks(&slacks)?, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma_grid() -> Vec<f64> {
        // 100 log-spaced points across [0.05, 50].
        let (lo, hi) = (0.05f64.ln(), 50f64.ln());
        (0..100)
            .map(|i| (lo + (hi - lo) * i as f64 / 99.0).exp())
            .collect()
    }

    #[test]
    fn drift_coefficient_matches_quadrature_across_the_grid() {
        for s in sigma_grid() {
            let closed = coeff_mu(s).unwrap();
            let quad = coeff_mu_quadrature(s).unwrap();
            assert!((closed - quad).abs() < 1e-12, "sigma={s}: {closed} vs {quad}");
        }
        let v = coeff_mu(1.0).unwrap();
        assert!((v - (0.5 * 2f64.ln() - 1.0)).abs() < 1e-15);
        // Large data variance kills the drift integral, leaving -1.
        assert!((coeff_mu(1e3).unwrap() + 1.0).abs() < 5e-7);
    }

    #[test]
    fn noise_variance_matches_quadrature_and_limits() {
        for s in sigma_grid() {
            let closed = sigma_cl2(s).unwrap();
            let quad = sigma_cl2_quadrature(s).unwrap();
            assert!((closed - quad).abs() < 1e-12, "sigma={s}: {closed} vs {quad}");
        }
        let v = sigma_cl2(1.0).unwrap();
        assert!((v - (1.0 - std::f64::consts::FRAC_PI_4)).abs() < 1e-15);
        assert!(sigma_cl2(1e3).unwrap() < 1e-6);
        assert!((sigma_cl2(1e-4).unwrap() - 1.0).abs() < 1e-3);
        assert!(coeff_mu(0.0).is_err());
        assert!(sigma_cl2(-1.0).is_err());
    }

    #[test]
    fn shared_noise_and_zero_perturbation_cancel_exactly() {
        let x = Tensor::vector(vec![0.3, -1.2, 0.8]).unwrap();
        let zero = Tensor::zeros(vec![3]);
        let key = StreamKey::new(50, 0);
        let (clean, adv) =
            simulate_latent_pair(&x, &zero, 1.0, &zero, 128, NoiseCoupling::Shared, &key).unwrap();
        assert_eq!(clean.data(), adv.data());
    }

    #[test]
    fn single_step_grid_contributes_nothing() {
        // With one step the only grid time is t = 0, where the integrand
        // vanishes, so both endpoints equal their starting points.
        let x = Tensor::vector(vec![0.7, -0.4]).unwrap();
        let eps = Tensor::vector(vec![0.1, -0.1]).unwrap();
        let mu = Tensor::zeros(vec![2]);
        let key = StreamKey::new(51, 0);
        let (clean, adv) =
            simulate_latent_pair(&x, &eps, 0.8, &mu, 1, NoiseCoupling::Independent, &key).unwrap();
        assert_eq!(clean.data(), x.data());
        assert_eq!(adv.data(), &[0.7f64 + 0.1, -0.4f64 + -0.1]);
    }

    #[test]
    fn three_step_endpoint_matches_a_hand_unrolled_sum() {
        let x = Tensor::vector(vec![0.4]).unwrap();
        let eps = Tensor::vector(vec![0.05]).unwrap();
        let mu = Tensor::vector(vec![0.3]).unwrap();
        let key = StreamKey::new(52, 0);
        let (clean, adv) =
            simulate_latent_pair(&x, &eps, 1.0, &mu, 3, NoiseCoupling::Independent, &key).unwrap();
        // Reconstruct the same increments (three steps = odd base, no
        // refinement levels) and accumulate by hand.
        let path_clean = brownian_increments(&key.child(0), 3, 1);
        let path_adv = brownian_increments(&key.child(1), 3, 1);
        let dt = 1.0 / 3.0;
        let mut c = 0.4;
        let mut a = 0.45;
        for i in 0..3 {
            let t = i as f64 * dt;
            let denom = 1.0 + t * t;
            c += t / denom.sqrt() * path_clean[i] - dt * t / denom * (0.4 - 0.3);
            a += t / denom.sqrt() * path_adv[i] - dt * t / denom * (0.45 - 0.3);
        }
        assert!((clean.data()[0] - c).abs() < 1e-12);
        assert!((adv.data()[0] - a).abs() < 1e-12);
    }

    #[test]
    fn brownian_refinement_preserves_the_coarse_increments() {
        let key = StreamKey::new(53, 4);
        let coarse = brownian_increments(&key, 5, 2);
        let fine = brownian_increments(&key, 10, 2);
        for m in 0..5 {
            for c in 0..2 {
                let whole = coarse[m * 2 + c];
                let sum = fine[(2 * m) * 2 + c] + fine[(2 * m + 1) * 2 + c];
                assert!((whole - sum).abs() < 1e-12, "interval {m} coord {c}");
            }
        }
        // Increment variance at the fine level stays near dt.
        let n = 20_000;
        let mut acc = 0.0;
        for trial in 0..n {
            let p = brownian_increments(&StreamKey::new(54, trial), 8, 1);
            acc += p.iter().map(|v| v * v).sum::<f64>();
        }
        let var = acc / (n as f64 * 8.0);
        assert!((var - 0.125).abs() < 0.005, "increment variance {var}");
    }

    #[test]
    fn gap_statistics_match_the_analytic_law() {
        let cfg = TheoremConfig {
            dimension: 8,
            trials: 10_000,
            ..Default::default()
        };
        let report = verify_theorem1(&cfg).unwrap();
        assert!(report.pass, "z={:?} ratio={}", report.z_scores, report.variance_ratio);
        let expected = 0.5 * 2f64.ln() - 1.0;
        for (m, e) in report.analytic_mean.iter().zip(&report.epsilon) {
            assert!((m - expected * e).abs() < 1e-15);
        }
        assert!((report.analytic_variance - 2.0 * (1.0 - std::f64::consts::FRAC_PI_4)).abs() < 1e-15);
    }

    #[test]
    fn zero_perturbation_gap_is_statistically_centered() {
        let cfg = TheoremConfig {
            dimension: 4,
            epsilon: EpsSpec::Vector(vec![0.0; 4]),
            trials: 10_000,
            ..Default::default()
        };
        let report = verify_theorem1(&cfg).unwrap();
        assert!(report.mean_pass, "z={:?}", report.z_scores);
        assert!(report.analytic_mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn halving_the_step_moves_the_mean_less_than_one_standard_error() {
        let coarse = TheoremConfig {
            dimension: 4,
            t_steps: 128,
            trials: 10_000,
            seed: 99,
            ..Default::default()
        };
        let fine = TheoremConfig {
            t_steps: 256,
            ..coarse.clone()
        };
        let a = verify_theorem1(&coarse).unwrap();
        let b = verify_theorem1(&fine).unwrap();
        for c in 0..4 {
            let shift = (a.empirical_mean[c] - b.empirical_mean[c]).abs();
            assert!(
                shift < a.mean_standard_error,
                "coordinate {c}: shift {shift} vs SE {}",
                a.mean_standard_error
            );
        }
    }

    #[test]
    fn drift_root_lands_on_the_closed_form() {
        let f = drift_coefficient_root(&[1.0 / 99.0]);
        assert!((f.root_sigma_x2 - f.closed_form_sigma_x2).abs() < 1e-9);
        assert!(f.residual < 1e-9);
        // 1/(e^2 - 1) is about 0.1565, nowhere near 1/99.
        assert!((f.closed_form_sigma_x2 - 0.156_517_6).abs() < 1e-6);
        let (v, coeff) = f.candidates[0];
        assert_eq!(v, 1.0 / 99.0);
        // At variance 1/99 the coefficient is ln(10) - 1, far from zero.
        assert!((coeff - (10f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn randomized_bound_instances_never_violate() {
        let report = verify_bound(&BoundConfig::default()).unwrap();
        assert_eq!(report.violations, 0, "min slack {}", report.min_slack);
        assert!(report.min_slack >= BOUND_SLACK_FLOOR);
        assert_eq!(report.instances, 1000);
    }

    #[test]
    fn structural_term_keeps_the_bound_on_images() {
        let cfg = BoundConfig {
            instances: 200,
            sample_shape: vec![8, 8],
            k: 3,
            alpha: 2.0,
            seed: 12,
            ..Default::default()
        };
        let report = verify_bound(&cfg).unwrap();
        assert_eq!(report.violations, 0, "min slack {}", report.min_slack);
        // With a positive structural weight the slack includes alpha.
        assert!(report.min_slack > 1.0);
    }

    #[test]
    fn bound_is_tight_without_perturbation_and_strict_with_it() {
        let schedule = NoiseSchedule::default();
        let x = Tensor::vector(vec![0.2, 0.9, -0.4]).unwrap();
        let params = CmParams::analytic(schedule, x.clone(), 1.0).unwrap();
        // Latents equal to the generator mean reproduce it exactly, so the
        // left side's error term vanishes.
        let latents = Tensor::stack(&[x.clone(), x.clone()]).unwrap();
        let zero = Tensor::zeros(vec![3]);
        let (lhs, rhs) = reconstruction_bound_sides(
            &params, &latents, &x, &zero, 0.0, 0.0, &SsimWindow::Global,
        )
        .unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
        let eps = Tensor::vector(vec![0.1, -0.05, 0.02]).unwrap();
        let (lhs, rhs) = reconstruction_bound_sides(
            &params, &latents, &x, &eps, 0.0, 0.0, &SsimWindow::Global,
        )
        .unwrap();
        assert_eq!(lhs, 0.0);
        // Slack doubles the perturbation scale: the constant plus the
        // objective's own error against the perturbed sample.
        let mean_eps = (0.1 + 0.05 + 0.02) / 3.0;
        assert!((rhs - 2.0 * mean_eps).abs() < 1e-15);
    }

    #[test]
    fn purification_trajectory_respects_the_bound_throughout() {
        let schedule = NoiseSchedule::default();
        let mu = Tensor::vector(vec![0.1, 0.4, -0.2, 0.6]).unwrap();
        let params = CmParams::analytic(schedule, mu, 1.0).unwrap();
        let x_clean = Tensor::vector(vec![0.5, 0.2, -0.1, 0.3]).unwrap();
        let eps = Tensor::vector(vec![0.05, -0.08, 0.02, -0.01]).unwrap();
        let cfg = PurifyConfig {
            k: 3,
            iterations: 60,
            snapshot_stride: 5,
            ..Default::default()
        };
        let key = StreamKey::new(60, 0);
        let (report, outcome) = replay_bound(&params, &cfg, &x_clean, &eps, &key).unwrap();
        assert_eq!(report.violations, 0, "min slack {}", report.min_slack);
        assert_eq!(report.instances, 13); // 0, 5, ..., 60
        assert_eq!(outcome.trace.len(), 61);
    }
}
