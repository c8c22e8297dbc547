//! Consistency generator.
//!
//! A consistency function maps a noisy point `x_t` at noise level `t`
//! directly to the clean point its probability-flow trajectory started
//! from, with the boundary behavior `f(x, sigma_min) = x` built into the
//! skip/output coefficients. Two backends share one interface:
//!
//! * an analytic backend for isotropic Gaussian data, where the trajectory
//!   map has the closed form `mu + (x_t - mu) * sqrt((s^2+t_min^2)/(s^2+t^2))`
//!   and doubles as the ground-truth oracle, and
//! * a neural backend (MLP over `[x_t / sqrt(sigma_data^2+t^2), ln(t)/4]`)
//!   trained either by pairwise bootstrapping on shared noise draws or by
//!   distilling one-step Euler solves of the analytic score.
//!
//! Levels live on the usual `rho`-warped grid between `sigma_min` and
//! `sigma_max`.

use crate::error::{invalid, Error, Result};
use crate::mlp::{mlp_forward, mlp_vjp, Activation, MlpGrads, MlpParams};
use crate::optim::{AdamConfig, NetworkOptimizer};
use crate::rng::Draws;
use crate::tensor::{flatten_rows as flatten_batch, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Number of discretization levels N.
    pub steps: usize,
    pub sigma_data: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 48,
            sigma_data: 0.5,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(invalid("need 0 < sigma_min < sigma_max"));
        }
        if self.rho <= 0.0 {
            return Err(invalid("rho must be positive"));
        }
        if self.steps < 2 {
            return Err(invalid("schedule needs at least two levels"));
        }
        if self.sigma_data <= 0.0 {
            return Err(invalid("sigma_data must be positive"));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> Vec<f64> {
        karras_timesteps(self.sigma_min, self.sigma_max, self.rho, self.steps)
            .expect("validated schedule")
    }

    /// Skip/output coefficients of the generator parameterization:
    /// `f(x, t) = c_skip(t) x + c_out(t) F(x, t)` with `c_skip(sigma_min) = 1`
    /// and `c_out(sigma_min) = 0`.
    pub fn skip_out_coeffs(&self, t: f64) -> (f64, f64) {
        let sd2 = self.sigma_data * self.sigma_data;
        let shifted = t - self.sigma_min;
        let c_skip = sd2 / (shifted * shifted + sd2);
        let c_out = self.sigma_data * shifted / (sd2 + t * t).sqrt();
        (c_skip, c_out)
    }

    /// Input normalization for the neural backend.
    fn c_in(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(t >= self.sigma_min && t <= self.sigma_max) {
            return Err(invalid(format!(
                "noise level {t} outside [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

/// The warped level grid `t_i = (a + (i-1)/(N-1) (b - a))^rho` with
/// `a = sigma_min^(1/rho)`, `b = sigma_max^(1/rho)`, for `i = 1..=N`.
/// Exposed as a free function so degenerate bounds (including
/// `sigma_min = 0`) remain testable without constructing a schedule.
pub fn karras_timesteps(sigma_min: f64, sigma_max: f64, rho: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(invalid("need at least two levels"));
    }
    if rho <= 0.0 {
        return Err(invalid("rho must be positive"));
    }
    if !(sigma_min >= 0.0 && sigma_min < sigma_max) {
        return Err(invalid("need 0 <= sigma_min < sigma_max"));
    }
    let inv = 1.0 / rho;
    let a = sigma_min.powf(inv);
    let b = sigma_max.powf(inv);
    Ok((0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            (a + frac * (b - a)).powf(rho)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralCm {
    pub online: MlpParams,
    /// Exponential moving average of the online weights; the bootstrap
    /// target during training.
    pub target: MlpParams,
    pub ema_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CmBackend {
    Analytic { mu: Tensor, sigma_x: f64 },
    Neural(NeuralCm),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmParams {
    pub schedule: NoiseSchedule,
    pub backend: CmBackend,
}

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

impl CmParams {
    pub fn analytic(schedule: NoiseSchedule, mu: Tensor, sigma_x: f64) -> Result<Self> {
        schedule.validate()?;
        if sigma_x <= 0.0 {
            return Err(invalid("sigma_x must be positive"));
        }
        Ok(Self {
            schedule,
            backend: CmBackend::Analytic { mu, sigma_x },
        })
    }

    pub fn neural_init(
        schedule: NoiseSchedule,
        sample_dim: usize,
        hidden: &[usize],
        ema_decay: f64,
        draws: &mut Draws,
    ) -> Result<Self> {
        schedule.validate()?;
        if sample_dim == 0 {
            return Err(invalid("sample dimension must be positive"));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(invalid("ema_decay must lie in [0, 1)"));
        }
        let mut dims = vec![sample_dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(sample_dim);
        let online = MlpParams::init(&dims, Activation::SmoothGate, draws)?;
        Ok(Self {
            schedule,
            backend: CmBackend::Neural(NeuralCm {
                target: online.clone(),
                online,
                ema_decay,
            }),
        })
    }

    pub fn sample_dim(&self) -> Option<usize> {
        match &self.backend {
            CmBackend::Analytic { mu, .. } => Some(mu.len()),
            CmBackend::Neural(n) => Some(n.online.output_dim()),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward evaluation and input gradients
// ---------------------------------------------------------------------------

/// Analytic score of an isotropic Gaussian smoothed to level `t`:
/// `-(x - mu) / (sigma_x^2 + t^2)`.
pub fn analytic_score(mu: &Tensor, sigma_x: f64, x: &Tensor, t: f64) -> Result<Tensor> {
    if sigma_x <= 0.0 {
        return Err(invalid("sigma_x must be positive"));
    }
    let denom = sigma_x * sigma_x + t * t;
    x.zip_map(mu, |xi, mi| -(xi - mi) / denom)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Net {
    Online,
    Target,
}

fn neural_features(schedule: &NoiseSchedule, flat: &Tensor, t: f64) -> Result<Tensor> {
    let c_in = schedule.c_in(t);
    let cond = t.ln() / 4.0;
    let (n, d) = (flat.shape()[0], flat.shape()[1]);
    let mut data = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        for &v in flat.row(i) {
            data.push(v * c_in);
        }
        data.push(cond);
    }
    Tensor::from_vec(vec![n, d + 1], data)
}


fn cm_apply_inner(params: &CmParams, x_t: &Tensor, t: f64, net: Net) -> Result<Tensor> {
    params.schedule.check_t(t)?;
    match &params.backend {
        CmBackend::Analytic { mu, sigma_x } => {
            let s2 = sigma_x * sigma_x;
            let tmin = params.schedule.sigma_min;
            let k = ((s2 + tmin * tmin) / (s2 + t * t)).sqrt();
            let d = mu.len();
            let (flat, shape) = flatten_batch(x_t, d)?;
            let n = flat.shape()[0];
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                for (v, m) in flat.row(i).iter().zip(mu.data()) {
                    out.push(m + (v - m) * k);
                }
            }
            Tensor::from_vec(vec![n, d], out)?.reshape(shape)
        }
        CmBackend::Neural(nets) => {
            let which = match net {
                Net::Online => &nets.online,
                Net::Target => &nets.target,
            };
            let d = which.output_dim();
            let (flat, shape) = flatten_batch(x_t, d)?;
            let (c_skip, c_out) = params.schedule.skip_out_coeffs(t);
            let feats = neural_features(&params.schedule, &flat, t)?;
            let raw = mlp_forward(which, &feats)?;
            let out = flat.zip_map(&raw, |x, f| c_skip * x + c_out * f)?;
            out.reshape(shape)
        }
    }
}

/// Evaluates the consistency function at `(x_t, t)`. `x_t` may be a single
/// sample of any shape or a batch with a leading batch dimension; the output
/// keeps the input's shape. Levels must lie in `[sigma_min, sigma_max]`.
pub fn cm_apply(params: &CmParams, x_t: &Tensor, t: f64) -> Result<Tensor> {
    cm_apply_inner(params, x_t, t, Net::Online)
}

/// One-step generation from a latent: `cm_apply` at the top of the schedule.
pub fn cm_generate(params: &CmParams, z: &Tensor) -> Result<Tensor> {
    cm_apply(params, z, params.schedule.sigma_max)
}

fn cm_apply_vjp_inner(
    params: &CmParams,
    x_t: &Tensor,
    t: f64,
    cotangent: &Tensor,
    net: Net,
) -> Result<(Tensor, Tensor)> {
    params.schedule.check_t(t)?;
    if !cotangent.same_shape(x_t) {
        return Err(invalid("cotangent must match the input shape"));
    }
    match &params.backend {
        CmBackend::Analytic { mu: _, sigma_x } => {
            let s2 = sigma_x * sigma_x;
            let tmin = params.schedule.sigma_min;
            let k = ((s2 + tmin * tmin) / (s2 + t * t)).sqrt();
            let out = cm_apply_inner(params, x_t, t, net)?;
            Ok((out, cotangent.scale(k)?))
        }
        CmBackend::Neural(nets) => {
            let which = match net {
                Net::Online => &nets.online,
                Net::Target => &nets.target,
            };
            let d = which.output_dim();
            let (flat, shape) = flatten_batch(x_t, d)?;
            let (cot_flat, _) = flatten_batch(cotangent, d)?;
            let (c_skip, c_out) = params.schedule.skip_out_coeffs(t);
            let c_in = params.schedule.c_in(t);
            let feats = neural_features(&params.schedule, &flat, t)?;
            let (raw, _, gfeat) = mlp_vjp(which, &feats, &cot_flat.scale(c_out)?)?;
            let n = flat.shape()[0];
            // d out / d x = c_skip I + c_out c_in J_F[:, :d]; the conditioning
            // column of the feature gradient is discarded.
            let mut gx = Vec::with_capacity(n * d);
            for i in 0..n {
                let gf = gfeat.row(i);
                let gc = cot_flat.row(i);
                for j in 0..d {
                    gx.push(c_skip * gc[j] + c_in * gf[j]);
                }
            }
            let out = flat.zip_map(&raw, |x, f| c_skip * x + c_out * f)?;
            Ok((
                out.reshape(shape.clone())?,
                Tensor::from_vec(vec![n, d], gx)?.reshape(shape)?,
            ))
        }
    }
}

/// Forward value plus the input-gradient pullback `<cotangent, d f/d x_t>`.
pub fn cm_apply_vjp(
    params: &CmParams,
    x_t: &Tensor,
    t: f64,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor)> {
    cm_apply_vjp_inner(params, x_t, t, cotangent, Net::Online)
}

/// Pullback of `cm_generate` with respect to the latent.
pub fn cm_generate_vjp(params: &CmParams, z: &Tensor, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
    cm_apply_vjp(params, z, params.schedule.sigma_max, cotangent)
}

/// Score estimate from a generator via the posterior-mean identity:
/// `(f(x_t, t) - x_t) / t^2`.
pub fn tweedie_score(params: &CmParams, x_t: &Tensor, t: f64) -> Result<Tensor> {
    let denoised = cm_apply(params, x_t, t)?;
    denoised.zip_map(x_t, |d, x| (d - x) / (t * t))
}

// ---------------------------------------------------------------------------
// Training losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    SquaredL2,
    Huber { delta: f64 },
}

impl Default for DistanceKind {
    fn default() -> Self {
        DistanceKind::SquaredL2
    }
}

impl DistanceKind {
    /// Per-coordinate value and derivative in the first argument.
    fn value_grad(self, a: f64, b: f64) -> (f64, f64) {
        let r = a - b;
        match self {
            DistanceKind::SquaredL2 => (r * r, 2.0 * r),
            DistanceKind::Huber { delta } => {
                if r.abs() <= delta {
                    (0.5 * r * r, r)
                } else {
                    (delta * (r.abs() - 0.5 * delta), delta * r.signum())
                }
            }
        }
    }
}

fn neural_nets(params: &CmParams) -> Result<&NeuralCm> {
    match &params.backend {
        CmBackend::Neural(n) => Ok(n),
        CmBackend::Analytic { .. } => Err(Error::Unsupported(
            "training losses require the neural backend".to_string(),
        )),
    }
}

fn check_level(params: &CmParams, level: usize) -> Result<(f64, f64)> {
    let ts = params.schedule.timesteps();
    if level == 0 || level >= ts.len() {
        return Err(invalid(format!(
            "level must lie in 1..{} (adjacent pair index), got {level}",
            ts.len()
        )));
    }
    Ok((ts[level - 1], ts[level]))
}

/// Distance between the online output at the upper level and the
/// gradient-stopped target output at the lower level, both formed from the
/// same clean batch and the same noise draw:
/// `d( f_online(x + t_hi z, t_hi), f_target(x + t_lo z, t_lo) )`,
/// summed over coordinates and averaged over the batch. Returns the loss
/// and its gradient with respect to the online parameters.
pub fn ct_loss_at_level(
    params: &CmParams,
    batch: &Tensor,
    level: usize,
    distance: DistanceKind,
    draws: &mut Draws,
) -> Result<(f64, MlpGrads)> {
    let nets = neural_nets(params)?;
    let (t_lo, t_hi) = check_level(params, level)?;
    if batch.ndim() != 2 {
        return Err(invalid("batch must be [n, d]"));
    }
    let (n, d) = (batch.shape()[0], batch.shape()[1]);
    let mut z = vec![0.0; n * d];
    draws.fill_normal(&mut z);
    let z = Tensor::from_vec(vec![n, d], z)?;
    let x_hi = batch.zip_map(&z, |x, zi| x + t_hi * zi)?;
    let x_lo = batch.zip_map(&z, |x, zi| x + t_lo * zi)?;
    let target = cm_apply_inner(params, &x_lo, t_lo, Net::Target)?;
    bootstrap_loss(params, nets, &x_hi, t_hi, &target, distance)
}

/// Same distance, but the lower-level point comes from one Euler step of
/// the probability-flow equation under the exact Gaussian score instead of
/// a shared noise draw:
/// `x_lo = x_hi + (t_lo - t_hi) * (-t_hi * score(x_hi, t_hi))`.
pub fn cd_loss_at_level(
    params: &CmParams,
    mu: &Tensor,
    sigma_x: f64,
    batch: &Tensor,
    level: usize,
    distance: DistanceKind,
    draws: &mut Draws,
) -> Result<(f64, MlpGrads)> {
    let nets = neural_nets(params)?;
    let (t_lo, t_hi) = check_level(params, level)?;
    if batch.ndim() != 2 {
        return Err(invalid("batch must be [n, d]"));
    }
    let (n, d) = (batch.shape()[0], batch.shape()[1]);
    if mu.len() != d {
        return Err(invalid("mu dimension must match the batch"));
    }
    let mut z = vec![0.0; n * d];
    draws.fill_normal(&mut z);
    let z = Tensor::from_vec(vec![n, d], z)?;
    let x_hi = batch.zip_map(&z, |x, zi| x + t_hi * zi)?;
    // Euler step toward t_lo; the score is exact, so this is one solver
    // step of the underlying flow rather than a second noise draw.
    let denom = sigma_x * sigma_x + t_hi * t_hi;
    let coeff = (t_lo - t_hi) * t_hi / denom;
    let n_rows = x_hi.shape()[0];
    let mut lo = Vec::with_capacity(n_rows * d);
    for i in 0..n_rows {
        for (v, m) in x_hi.row(i).iter().zip(mu.data()) {
            lo.push(v + coeff * (v - m));
        }
    }
    let x_lo = Tensor::from_vec(vec![n_rows, d], lo)?;
    let target = cm_apply_inner(params, &x_lo, t_lo, Net::Target)?;
    bootstrap_loss(params, nets, &x_hi, t_hi, &target, distance)
}

fn bootstrap_loss(
    params: &CmParams,
    nets: &NeuralCm,
    x_hi: &Tensor,
    t_hi: f64,
    target: &Tensor,
    distance: DistanceKind,
) -> Result<(f64, MlpGrads)> {
    let n = x_hi.shape()[0] as f64;
    let (c_skip, c_out) = params.schedule.skip_out_coeffs(t_hi);
    let feats = neural_features(&params.schedule, x_hi, t_hi)?;
    let raw = mlp_forward(&nets.online, &feats)?;
    let online = x_hi.zip_map(&raw, |x, f| c_skip * x + c_out * f)?;

    let mut loss = 0.0;
    let mut cot = vec![0.0; online.len()];
    for (i, (&a, &b)) in online.data().iter().zip(target.data()).enumerate() {
        let (v, g) = distance.value_grad(a, b);
        loss += v;
        cot[i] = g / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "bootstrap loss".to_string(),
        });
    }
    // Only the c_out F(.) branch carries parameters.
    let cot = Tensor::from_vec(vec![x_hi.shape()[0], x_hi.shape()[1]], cot)?.scale(c_out)?;
    let (_, grads, _) = mlp_vjp(&nets.online, &feats, &cot)?;
    Ok((loss, grads))
}

/// Draws a uniform adjacent level pair and evaluates `ct_loss_at_level`.
pub fn ct_loss(
    params: &CmParams,
    batch: &Tensor,
    distance: DistanceKind,
    draws: &mut Draws,
) -> Result<(f64, MlpGrads)> {
    let level = 1 + draws.index(params.schedule.steps - 1);
    ct_loss_at_level(params, batch, level, distance, draws)
}

/// Draws a uniform adjacent level pair and evaluates `cd_loss_at_level`.
pub fn cd_loss(
    params: &CmParams,
    mu: &Tensor,
    sigma_x: f64,
    batch: &Tensor,
    distance: DistanceKind,
    draws: &mut Draws,
) -> Result<(f64, MlpGrads)> {
    let level = 1 + draws.index(params.schedule.steps - 1);
    cd_loss_at_level(params, mu, sigma_x, batch, level, distance, draws)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Bootstrapped pairwise training on shared noise draws.
    Consistency,
    /// Distillation against one-step Euler solves of an exact Gaussian
    /// score (available only when the data law is known).
    DistillAnalytic { mu: Vec<f64>, sigma_x: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmTrainConfig {
    pub schedule: NoiseSchedule,
    pub hidden: Vec<usize>,
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub distance: DistanceKind,
    pub seed: u64,
    /// Record the running loss every this many steps.
    pub log_stride: usize,
}

impl Default for CmTrainConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            mode: TrainMode::Consistency,
            steps: 16000,
            batch_size: 128,
            adam: AdamConfig::default(),
            ema_decay: 0.99,
            distance: DistanceKind::SquaredL2,
            seed: 0,
            log_stride: 200,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// `(step, smoothed loss)` at the configured stride.
    pub losses: Vec<(usize, f64)>,
}

fn assemble_batch(samples: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let d = samples.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(samples.row(i));
    }
    Tensor::from_vec(vec![indices.len(), d], data)
}

/// Trains a neural consistency generator on `samples` (`[n, d]` rows).
/// The target network trails the online one by exponential averaging with
/// `ema_decay` (decay 0 pins the target to the online weights).
pub fn train_consistency(
    cfg: &CmTrainConfig,
    samples: &Tensor,
    draws: &mut Draws,
) -> Result<(CmParams, TrainLog)> {
    cfg.schedule.validate()?;
    cfg.adam.validate()?;
    if samples.ndim() != 2 || samples.shape()[0] == 0 {
        return Err(invalid("training samples must be a nonempty [n, d] tensor"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(invalid("steps and batch_size must be positive"));
    }
    if cfg.log_stride == 0 {
        return Err(invalid("log_stride must be positive"));
    }
    let d = samples.shape()[1];
    if let TrainMode::DistillAnalytic { mu, .. } = &cfg.mode {
        if mu.len() != d {
            return Err(invalid("distillation mean must match the sample dimension"));
        }
    }
    let mut params = CmParams::neural_init(cfg.schedule, d, &cfg.hidden, cfg.ema_decay, draws)?;
    let mut opt = match &params.backend {
        CmBackend::Neural(n) => NetworkOptimizer::new(cfg.adam, &n.online)?,
        CmBackend::Analytic { .. } => unreachable!(),
    };
    let n_total = samples.shape()[0];
    let mut log = TrainLog::default();
    let mut window = 0.0;
    let mut window_n = 0usize;
    let mu_t = match &cfg.mode {
        TrainMode::DistillAnalytic { mu, .. } => Some(Tensor::vector(mu.clone())?),
        TrainMode::Consistency => None,
    };
    let lr0 = cfg.adam.learning_rate;
    for step in 0..cfg.steps {
        // Cosine decay to a tenth of the initial rate: the bootstrap target
        // keeps moving all the way through, so the online network needs a
        // quiet tail to settle onto it.
        let frac = step as f64 / cfg.steps as f64;
        opt.set_learning_rate(
            0.1 * lr0 + 0.45 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos()),
        );
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| draws.index(n_total)).collect();
        let batch = assemble_batch(samples, &indices)?;
        let (loss, grads) = match &cfg.mode {
            TrainMode::Consistency => ct_loss(&params, &batch, cfg.distance, draws),
            TrainMode::DistillAnalytic { sigma_x, .. } => cd_loss(
                &params,
                mu_t.as_ref().unwrap(),
                *sigma_x,
                &batch,
                cfg.distance,
                draws,
            ),
        }
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iteration: step,
                message: "non-finite training loss".to_string(),
            },
            other => other,
        })?;
        let nets = match &mut params.backend {
            CmBackend::Neural(n) => n,
            CmBackend::Analytic { .. } => unreachable!(),
        };
        opt.step(&mut nets.online, &grads)?;
        // target <- decay * target + (1 - decay) * online
        let decay = nets.ema_decay;
        let mut online_flat = Vec::with_capacity(nets.online.parameter_count());
        nets.online.visit(|b| online_flat.extend_from_slice(b));
        let mut offset = 0;
        nets.target.visit_mut(|buf| {
            let n = buf.len();
            for (tv, &ov) in buf.iter_mut().zip(&online_flat[offset..offset + n]) {
                *tv = decay * *tv + (1.0 - decay) * ov;
            }
            offset += n;
        });
        window += loss;
        window_n += 1;
        if (step + 1) % cfg.log_stride == 0 {
            log.losses.push((step + 1, window / window_n as f64));
            window = 0.0;
            window_n = 0;
        }
    }
    Ok((params, log))
}

// ---------------------------------------------------------------------------
// Self-consistency
// ---------------------------------------------------------------------------

/// How the two evaluation points of a self-consistency probe are paired.
#[derive(Debug, Clone)]
pub enum Pairing {
    /// `x_t = x + t z`, `x_t' = x + t' z` with one shared draw. The two
    /// points generally sit on different flow trajectories, so even a
    /// perfect generator shows a gap at well-separated levels.
    SharedNoise,
    /// `x_t'` as above, then `x_t` moved along the exact Gaussian flow
    /// trajectory through `(x_t', t')`. A perfect generator scores zero.
    GaussianTrajectory { mu: Tensor, sigma_x: f64 },
}

/// Relative output gap `|f(x_t, t) - f(x_t', t')| / |f(x_t', t')|` for one
/// probe point.
pub fn self_consistency_residual(
    params: &CmParams,
    x: &Tensor,
    t: f64,
    t_prime: f64,
    pairing: &Pairing,
    draws: &mut Draws,
) -> Result<f64> {
    params.schedule.check_t(t)?;
    params.schedule.check_t(t_prime)?;
    let mut z = vec![0.0; x.len()];
    draws.fill_normal(&mut z);
    let z = Tensor::from_vec(x.shape().to_vec(), z)?;
    let x_tp = x.zip_map(&z, |xi, zi| xi + t_prime * zi)?;
    let x_t = match pairing {
        Pairing::SharedNoise => x.zip_map(&z, |xi, zi| xi + t * zi)?,
        Pairing::GaussianTrajectory { mu, sigma_x } => {
            let s2 = sigma_x * sigma_x;
            let k = ((s2 + t * t) / (s2 + t_prime * t_prime)).sqrt();
            x_tp.zip_map(mu, |v, m| m + (v - m) * k)?
        }
    };
    let a = cm_apply(params, &x_t, t)?;
    let b = cm_apply(params, &x_tp, t_prime)?;
    let denom = b.norm_l2().max(1e-12);
    Ok(a.sub(&b)?.norm_l2() / denom)
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

const CM_FORMAT: &str = "consistency-model";
const CM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CmSnapshot {
    format: String,
    version: u32,
    schedule: NoiseSchedule,
    backend: CmBackend,
}

pub fn save_cm(params: &CmParams, path: &Path) -> Result<()> {
    let snap = CmSnapshot {
        format: CM_FORMAT.to_string(),
        version: CM_VERSION,
        schedule: params.schedule,
        backend: params.backend.clone(),
    };
    std::fs::write(path, serde_json::to_string(&snap)?)?;
    Ok(())
}

pub fn load_cm(path: &Path) -> Result<CmParams> {
    let text = std::fs::read_to_string(path)?;
    let snap: CmSnapshot = serde_json::from_str(&text)?;
    if snap.format != CM_FORMAT {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected format '{CM_FORMAT}', found '{}'", snap.format),
        });
    }
    if snap.version != CM_VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported model version {}", snap.version),
        });
    }
    snap.schedule.validate()?;
    // Layer wiring of stored networks is revalidated on load.
    if let CmBackend::Neural(n) = &snap.backend {
        MlpParams::from_layers(n.online.layers().to_vec())?;
        MlpParams::from_layers(n.target.layers().to_vec())?;
    }
    Ok(CmParams {
        schedule: snap.schedule,
        backend: snap.backend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{finite_diff_check, Layer};
    use crate::rng::StreamKey;

    fn default_analytic(mu: Vec<f64>, sigma_x: f64) -> CmParams {
        CmParams::analytic(NoiseSchedule::default(), Tensor::vector(mu).unwrap(), sigma_x).unwrap()
    }

    #[test]
    fn karras_grid_endpoints_and_monotonicity() {
        let ts = karras_timesteps(0.002, 80.0, 7.0, 18).unwrap();
        assert_eq!(ts.len(), 18);
        assert!((ts[0] - 0.002).abs() < 1e-12);
        assert!((ts[17] - 80.0).abs() < 1e-9);
        for w in ts.windows(2) {
            assert!(w[1] > w[0]);
        }
        // rho = 1 degenerates to a uniform grid.
        let ts = karras_timesteps(0.0, 2.0, 1.0, 3).unwrap();
        assert!((ts[0]).abs() < 1e-15 && (ts[1] - 1.0).abs() < 1e-12 && (ts[2] - 2.0).abs() < 1e-12);
        assert!(karras_timesteps(1.0, 0.5, 7.0, 4).is_err());
        assert!(karras_timesteps(0.0, 1.0, 7.0, 1).is_err());
    }

    #[test]
    fn skip_out_boundary_and_reference_values() {
        let s = NoiseSchedule::default();
        let (c_skip, c_out) = s.skip_out_coeffs(s.sigma_min);
        assert_eq!(c_skip, 1.0);
        assert_eq!(c_out, 0.0);
        let (c_skip, c_out) = s.skip_out_coeffs(80.0);
        // 0.25 / (79.998^2 + 0.25) and 0.5 * 79.998 / sqrt(0.25 + 6400)
        assert!((c_skip - 3.9063e-5).abs() < 1e-8, "c_skip {c_skip}");
        assert!((c_out - 0.499_977).abs() < 1e-5, "c_out {c_out}");
    }

    #[test]
    fn analytic_apply_is_identity_at_the_floor() {
        let params = default_analytic(vec![0.75, -0.5], 1.0);
        let x = Tensor::vector(vec![1.25, 2.5]).unwrap();
        let y = cm_apply(&params, &x, params.schedule.sigma_min).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-14, "boundary identity violated: {a} vs {b}");
        }
    }

    #[test]
    fn neural_apply_is_identity_at_the_floor_bit_exactly() {
        let mut d = StreamKey::new(2, 2).draws();
        let params =
            CmParams::neural_init(NoiseSchedule::default(), 3, &[8, 8], 0.99, &mut d).unwrap();
        let x = Tensor::vector(vec![0.3, -0.7, 0.1]).unwrap();
        let y = cm_apply(&params, &x, params.schedule.sigma_min).unwrap();
        assert_eq!(x.data(), y.data());
    }

    /// RK4 on the probability-flow equation `dx/dt = t (x - mu) / (s^2 + t^2)`
    /// integrated from `t` down to the floor; independent oracle for the
    /// closed-form backend.
    fn rk4_flow_to_floor(x0: f64, mu: f64, sigma_x: f64, t_start: f64, t_end: f64, steps: usize) -> f64 {
        let f = |t: f64, x: f64| t * (x - mu) / (sigma_x * sigma_x + t * t);
        let h = (t_end - t_start) / steps as f64;
        let mut x = x0;
        let mut t = t_start;
        for _ in 0..steps {
            let k1 = f(t, x);
            let k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
            let k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
            let k4 = f(t + h, x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        x
    }

    #[test]
    fn analytic_apply_matches_rk4_flow_integration() {
        let mu = 0.4;
        let sigma_x = 1.3;
        let params = default_analytic(vec![mu], sigma_x);
        let floor = params.schedule.sigma_min;
        for &(x0, t) in &[(2.0, 5.0), (-1.5, 80.0), (0.9, 0.01), (3.0, 0.5)] {
            let x = Tensor::vector(vec![x0]).unwrap();
            let closed = cm_apply(&params, &x, t).unwrap().data()[0];
            let oracle = rk4_flow_to_floor(x0, mu, sigma_x, t, floor, 10_000);
            assert!(
                (closed - oracle).abs() <= 1e-6,
                "t={t}: closed {closed} vs RK4 {oracle}"
            );
        }
    }

    #[test]
    fn generate_is_linear_for_centered_analytic_backend() {
        let params = default_analytic(vec![0.0, 0.0], 1.0);
        let z = Tensor::vector(vec![30.0, -50.0]).unwrap();
        let g1 = cm_generate(&params, &z).unwrap();
        let g2 = cm_generate(&params, &z.scale(2.0).unwrap()).unwrap();
        for (a, b) in g2.data().iter().zip(g1.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_score_formula() {
        let mu = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let x = Tensor::vector(vec![2.0, 0.5]).unwrap();
        let s = analytic_score(&mu, 0.5, &x, 2.0).unwrap();
        // denominator = 0.25 + 4 = 4.25
        assert!((s.data()[0] - (-1.0 / 4.25)).abs() < 1e-15);
        assert!((s.data()[1] - (-1.5 / 4.25)).abs() < 1e-15);
        assert!(analytic_score(&mu, -1.0, &x, 2.0).is_err());
    }

    #[test]
    fn apply_rejects_levels_outside_the_schedule() {
        let params = default_analytic(vec![0.0], 1.0);
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(cm_apply(&params, &x, 0.001).is_err());
        assert!(cm_apply(&params, &x, 81.0).is_err());
    }

    #[test]
    fn neural_vjp_matches_finite_differences() {
        let mut d = StreamKey::new(8, 1).draws();
        let params =
            CmParams::neural_init(NoiseSchedule::default(), 4, &[16, 16], 0.99, &mut d).unwrap();
        let x = Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let cot = Tensor::vector(vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        for &t in &[0.01, 0.7, 12.0, 80.0] {
            let (_, gx) = cm_apply_vjp(&params, &x, t, &cot).unwrap();
            let err = finite_diff_check(
                |p| Ok(cm_apply(&params, p, t)?.dot(&cot).unwrap()),
                &gx,
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "t={t}: gradient error {err}");
        }
    }

    #[test]
    fn analytic_vjp_is_the_trajectory_contraction() {
        let params = default_analytic(vec![0.3, 0.3], 0.8);
        let x = Tensor::vector(vec![4.0, -2.0]).unwrap();
        let cot = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let t = 10.0;
        let (_, gx) = cm_apply_vjp(&params, &x, t, &cot).unwrap();
        let s2: f64 = 0.64;
        let k = ((s2 + 0.002f64 * 0.002) / (s2 + 100.0)).sqrt();
        for g in gx.data() {
            assert!((g - k).abs() < 1e-15);
        }
    }

    /// Single-layer network that passes through the normalized input, making
    /// every quantity in the pairwise loss hand-computable.
    fn passthrough_cm(schedule: NoiseSchedule) -> CmParams {
        let layer = Layer {
            weight: Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
            activation: Activation::Identity,
        };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        CmParams {
            schedule,
            backend: CmBackend::Neural(NeuralCm {
                online: net.clone(),
                target: net,
                ema_decay: 0.0,
            }),
        }
    }

    #[test]
    fn pairwise_loss_matches_hand_computation_in_1d() {
        let schedule = NoiseSchedule::default();
        let params = passthrough_cm(schedule);
        let ts = schedule.timesteps();
        let level = 9;
        let (t_lo, t_hi) = (ts[level - 1], ts[level]);
        let x = 0.3;
        let batch = Tensor::from_vec(vec![1, 1], vec![x]).unwrap();
        // Recover the z the loss will draw by replaying the stream.
        let key = StreamKey::new(77, 0);
        let z = key.draws().normal();
        let (loss, _) = ct_loss_at_level(
            &params,
            &batch,
            level,
            DistanceKind::SquaredL2,
            &mut key.draws(),
        )
        .unwrap();
        // f(x_t, t) = (c_skip + c_out * c_in) * x_t for the passthrough net.
        let a = |t: f64| {
            let sd2 = 0.25;
            let c_skip = sd2 / ((t - 0.002) * (t - 0.002) + sd2);
            let c_out = 0.5 * (t - 0.002) / (sd2 + t * t).sqrt();
            let c_in = 1.0 / (sd2 + t * t).sqrt();
            c_skip + c_out * c_in
        };
        let out_hi = a(t_hi) * (x + t_hi * z);
        let out_lo = a(t_lo) * (x + t_lo * z);
        let expected = (out_hi - out_lo) * (out_hi - out_lo);
        assert!(
            (loss - expected).abs() < 1e-12,
            "loss {loss} vs hand value {expected}"
        );
    }

    #[test]
    fn euler_distillation_target_matches_hand_computation() {
        let schedule = NoiseSchedule::default();
        let params = passthrough_cm(schedule);
        let mu = Tensor::vector(vec![0.2]).unwrap();
        let sigma_x = 1.1;
        let ts = schedule.timesteps();
        let level = 12;
        let (t_lo, t_hi) = (ts[level - 1], ts[level]);
        let x = -0.4;
        let batch = Tensor::from_vec(vec![1, 1], vec![x]).unwrap();
        let key = StreamKey::new(31, 5);
        let z = key.draws().normal();
        let (loss, _) = cd_loss_at_level(
            &params,
            &mu,
            sigma_x,
            &batch,
            level,
            DistanceKind::SquaredL2,
            &mut key.draws(),
        )
        .unwrap();
        let x_hi = x + t_hi * z;
        // One Euler step of dx/dt = t (x - mu)/(s^2 + t^2) from t_hi to t_lo.
        let x_lo = x_hi + (t_lo - t_hi) * t_hi * (x_hi - 0.2) / (sigma_x * sigma_x + t_hi * t_hi);
        let a = |t: f64| {
            let sd2 = 0.25;
            let c_skip = sd2 / ((t - 0.002) * (t - 0.002) + sd2);
            let c_out = 0.5 * (t - 0.002) / (sd2 + t * t).sqrt();
            let c_in = 1.0 / (sd2 + t * t).sqrt();
            c_skip + c_out * c_in
        };
        let expected = (a(t_hi) * x_hi - a(t_lo) * x_lo).powi(2);
        assert!(
            (loss - expected).abs() < 1e-12,
            "loss {loss} vs hand value {expected}"
        );
    }

    #[test]
    fn euler_step_error_shrinks_quadratically_with_level_gap() {
        // Exact trajectory value vs one Euler step, toward a fixed target
        // level: halving the gap should shrink the error by about 4x.
        let sigma_x = 1.0f64;
        let mu = 0.0;
        let x_start = 2.0;
        let t_lo = 1.0f64;
        let mut prev_err = f64::INFINITY;
        for k in 1..=4 {
            let gap = 0.8 / 2f64.powi(k);
            let t_hi = t_lo + gap;
            let exact =
                mu + (x_start - mu) * ((sigma_x * sigma_x + t_lo * t_lo) / (sigma_x * sigma_x + t_hi * t_hi)).sqrt();
            let euler = x_start + (t_lo - t_hi) * t_hi * (x_start - mu) / (sigma_x * sigma_x + t_hi * t_hi);
            let err = (exact - euler).abs();
            assert!(err < prev_err / 2.5, "gap {gap}: error {err} vs previous {prev_err}");
            prev_err = err;
        }
    }

    #[test]
    fn pairwise_gradient_matches_finite_differences() {
        let mut d = StreamKey::new(19, 4).draws();
        let params =
            CmParams::neural_init(NoiseSchedule::default(), 2, &[8], 0.5, &mut d).unwrap();
        let batch = Tensor::from_vec(vec![3, 2], vec![0.1, -0.4, 0.9, 0.2, -1.1, 0.6]).unwrap();
        let key = StreamKey::new(5, 5);
        let (_, grads) = ct_loss_at_level(
            &params,
            &batch,
            4,
            DistanceKind::SquaredL2,
            &mut key.draws(),
        )
        .unwrap();
        let nets = match &params.backend {
            CmBackend::Neural(n) => n.clone(),
            CmBackend::Analytic { .. } => unreachable!(),
        };
        for l in 0..nets.online.layers().len() {
            let err = finite_diff_check(
                |w| {
                    let mut layers = nets.online.layers().to_vec();
                    layers[l].weight = w.clone();
                    let online = MlpParams::from_layers(layers)?;
                    let p = CmParams {
                        schedule: params.schedule,
                        backend: CmBackend::Neural(NeuralCm {
                            online,
                            target: nets.target.clone(),
                            ema_decay: nets.ema_decay,
                        }),
                    };
                    let (loss, _) = ct_loss_at_level(
                        &p,
                        &batch,
                        4,
                        DistanceKind::SquaredL2,
                        &mut key.draws(),
                    )?;
                    Ok(loss)
                },
                &grads.layers[l].0,
                &nets.online.layers()[l].weight,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "layer {l} bootstrap gradient error {err}");
        }
    }

    #[test]
    fn huber_distance_value_and_slope() {
        let d = DistanceKind::Huber { delta: 1.0 };
        let (v, g) = d.value_grad(0.5, 0.0);
        assert!((v - 0.125).abs() < 1e-15 && (g - 0.5).abs() < 1e-15);
        let (v, g) = d.value_grad(3.0, 0.0);
        assert!((v - 2.5).abs() < 1e-15 && (g - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trajectory_pairing_is_exact_for_the_analytic_backend() {
        let params = default_analytic(vec![0.5, -0.25], 0.9);
        let x = Tensor::vector(vec![1.0, 0.3]).unwrap();
        let pairing = Pairing::GaussianTrajectory {
            mu: Tensor::vector(vec![0.5, -0.25]).unwrap(),
            sigma_x: 0.9,
        };
        let mut draws = StreamKey::new(9, 9).draws();
        for &(t, tp) in &[(0.01, 40.0), (80.0, 0.002), (2.0, 2.0), (0.5, 7.0)] {
            let r = self_consistency_residual(&params, &x, t, tp, &pairing, &mut draws).unwrap();
            assert!(r <= 1e-9, "t={t}, t'={tp}: residual {r}");
        }
    }

    #[test]
    fn shared_noise_pairing_vanishes_only_at_equal_levels() {
        let params = default_analytic(vec![0.0, 0.0], 1.0);
        let x = Tensor::vector(vec![0.4, -0.9]).unwrap();
        let mut draws = StreamKey::new(3, 1).draws();
        let r = self_consistency_residual(&params, &x, 5.0, 5.0, &Pairing::SharedNoise, &mut draws)
            .unwrap();
        assert!(r <= 1e-12);
        let mut draws = StreamKey::new(3, 1).draws();
        let r = self_consistency_residual(&params, &x, 5.0, 60.0, &Pairing::SharedNoise, &mut draws)
            .unwrap();
        assert!(r > 1e-3, "distinct trajectories should disagree, got {r}");
    }

    #[test]
    fn ema_zero_pins_target_to_online() {
        let samples = Tensor::from_fn(vec![64, 2], |i| ((i * 7) % 13) as f64 * 0.1 - 0.6).unwrap();
        let cfg = CmTrainConfig {
            steps: 5,
            batch_size: 8,
            hidden: vec![8],
            ema_decay: 0.0,
            log_stride: 5,
            ..Default::default()
        };
        let mut draws = StreamKey::new(21, 0).draws();
        let (params, log) = train_consistency(&cfg, &samples, &mut draws).unwrap();
        assert_eq!(log.losses.len(), 1);
        let nets = match &params.backend {
            CmBackend::Neural(n) => n,
            CmBackend::Analytic { .. } => unreachable!(),
        };
        let x = Tensor::vector(vec![0.2, -0.2]).unwrap();
        let feats = neural_features(&params.schedule, &x.reshape(vec![1, 2]).unwrap(), 3.0).unwrap();
        let a = mlp_forward(&nets.online, &feats).unwrap();
        let b = mlp_forward(&nets.target, &feats).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn snapshot_round_trip_preserves_outputs_bit_exactly() {
        let mut d = StreamKey::new(14, 3).draws();
        let params =
            CmParams::neural_init(NoiseSchedule::default(), 2, &[8, 8], 0.97, &mut d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.json");
        save_cm(&params, &path).unwrap();
        let back = load_cm(&path).unwrap();
        let x = Tensor::vector(vec![12.0, -30.0]).unwrap();
        let a = cm_generate(&params, &x).unwrap();
        let b = cm_generate(&back, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        // Analytic backends round-trip too.
        let params = default_analytic(vec![0.1, 0.9], 1.0);
        save_cm(&params, &path).unwrap();
        let back = load_cm(&path).unwrap();
        let a = cm_generate(&params, &x).unwrap();
        let b = cm_generate(&back, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
