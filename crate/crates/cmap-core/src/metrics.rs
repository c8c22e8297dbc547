//! Reconstruction, structural-similarity, latent-moment, and kernel
//! two-sample metrics, each with the gradients the purifier and the attack
//! suite pull back through.

use crate::cm::{tweedie_score, CmParams};
use crate::error::{invalid, Error, Result};
use crate::rng::Draws;
use crate::tensor::{flatten_rows, Tensor};
use serde::{Deserialize, Serialize};

/// Mean absolute difference over all elements.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.mean_abs())
}

// ---------------------------------------------------------------------------
// Structural similarity
// ---------------------------------------------------------------------------

const SSIM_C1: f64 = 1e-4; // (0.01 L)^2 at unit dynamic range
const SSIM_C2: f64 = 9e-4; // (0.03 L)^2

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimWindow {
    /// One window spanning the whole image with uniform weights.
    Global,
    /// Gaussian-weighted sliding window over all fully interior positions.
    Gaussian { size: usize, sigma: f64 },
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Global
    }
}

impl SsimWindow {
    pub fn gaussian_default() -> Self {
        SsimWindow::Gaussian { size: 11, sigma: 1.5 }
    }
}

/// One weighted window: value of the similarity score and, when `grad` is
/// given, its contribution to d score / d x accumulated at `scale`.
/// `entries` holds `(flat index, normalized weight)` pairs.
fn ssim_window_eval(
    x: &[f64],
    y: &[f64],
    entries: &[(usize, f64)],
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let mut mx = 0.0;
    let mut my = 0.0;
    for &(i, w) in entries {
        mx += w * x[i];
        my += w * y[i];
    }
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for &(i, w) in entries {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        vx += w * dx * dx;
        vy += w * dy * dy;
        cxy += w * dx * dy;
    }
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * cxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = vx + vy + SSIM_C2;
    let s = (a1 * a2) / (b1 * b2);
    if let Some((g, scale)) = grad {
        for &(i, w) in entries {
            let dxi = x[i] - mx;
            let dyi = y[i] - my;
            let term = (2.0 * my * a2 + 2.0 * a1 * dyi) / (b1 * b2)
                - s * (2.0 * mx / b1 + 2.0 * dxi / b2);
            g[i] += scale * w * term;
        }
    }
    s
}

fn gaussian_window_columns(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn ssim_impl(x: &Tensor, y: &Tensor, window: &SsimWindow, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    if !x.same_shape(y) {
        return Err(invalid("structural similarity needs equally shaped inputs"));
    }
    if x.len() == 0 {
        return Err(invalid("structural similarity of empty tensors"));
    }
    let mut grad = if want_grad { Some(vec![0.0; x.len()]) } else { None };
    let value = match window {
        SsimWindow::Global => {
            let n = x.len();
            let w = 1.0 / n as f64;
            let entries: Vec<(usize, f64)> = (0..n).map(|i| (i, w)).collect();
            ssim_window_eval(
                x.data(),
                y.data(),
                &entries,
                grad.as_mut().map(|g| (g.as_mut_slice(), 1.0)),
            )
        }
        SsimWindow::Gaussian { size, sigma } => {
            if x.ndim() != 2 {
                return Err(invalid("sliding-window similarity needs [h, w] images"));
            }
            if size % 2 == 0 || *size < 3 {
                return Err(invalid("window size must be odd and at least 3"));
            }
            if *sigma <= 0.0 {
                return Err(invalid("window sigma must be positive"));
            }
            let (h, w) = (x.shape()[0], x.shape()[1]);
            if h < *size || w < *size {
                return Err(invalid(format!(
                    "image {h}x{w} smaller than the {size}x{size} window"
                )));
            }
            let k1 = gaussian_window_columns(*size, *sigma);
            let r = size / 2;
            let positions = (h - size + 1) * (w - size + 1);
            let scale = 1.0 / positions as f64;
            let mut entries = Vec::with_capacity(size * size);
            let mut total = 0.0;
            for ci in r..h - r {
                for cj in r..w - r {
                    entries.clear();
                    for (di, &wi) in k1.iter().enumerate() {
                        let row = (ci + di - r) * w;
                        for (dj, &wj) in k1.iter().enumerate() {
                            entries.push((row + cj + dj - r, wi * wj));
                        }
                    }
                    total += ssim_window_eval(
                        x.data(),
                        y.data(),
                        &entries,
                        grad.as_mut().map(|g| (g.as_mut_slice(), scale)),
                    );
                }
            }
            total * scale
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "structural similarity".to_string(),
        });
    }
    let grad = match grad {
        Some(g) => Some(Tensor::from_vec(x.shape().to_vec(), g)?),
        None => None,
    };
    Ok((value, grad))
}

/// Structural similarity of `x` against reference `y`, assuming unit
/// dynamic range.
pub fn ssim(x: &Tensor, y: &Tensor, window: &SsimWindow) -> Result<f64> {
    ssim_impl(x, y, window, false).map(|(v, _)| v)
}

/// Similarity together with its gradient in the first argument.
pub fn ssim_grad(x: &Tensor, y: &Tensor, window: &SsimWindow) -> Result<(f64, Tensor)> {
    let (v, g) = ssim_impl(x, y, window, true)?;
    Ok((v, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// Reconstruction objective
// ---------------------------------------------------------------------------

fn check_branch_shapes(generated: &Tensor, reference: &Tensor) -> Result<usize> {
    if generated.ndim() != reference.ndim() + 1 || generated.shape()[1..] != *reference.shape() {
        return Err(invalid(format!(
            "generated batch {:?} must stack copies of the reference shape {:?}",
            generated.shape(),
            reference.shape()
        )));
    }
    Ok(generated.shape()[0])
}

fn loss_a_impl(
    generated: &Tensor,
    reference: &Tensor,
    alpha: f64,
    window: &SsimWindow,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let k = check_branch_shapes(generated, reference)?;
    if alpha != 0.0 && reference.ndim() != 2 {
        return Err(invalid(
            "the structural term applies to images only; use alpha = 0 for point data",
        ));
    }
    let n = reference.len() as f64;
    let kf = k as f64;
    let mut total = 0.0;
    let mut grad = if want_grad {
        Some(vec![0.0; generated.len()])
    } else {
        None
    };
    for b in 0..k {
        let g = generated.subtensor(b)?;
        let diff = g.sub(reference)?;
        total += diff.mean_abs();
        if alpha != 0.0 {
            let (s, sg) = if want_grad {
                let (s, sg) = ssim_grad(&g, reference, window)?;
                (s, Some(sg))
            } else {
                (ssim(&g, reference, window)?, None)
            };
            total += alpha * (1.0 - s);
            if let (Some(buf), Some(sg)) = (grad.as_mut(), sg) {
                let base = b * reference.len();
                for (i, &v) in sg.data().iter().enumerate() {
                    buf[base + i] -= alpha * v / kf;
                }
            }
        }
        if let Some(buf) = grad.as_mut() {
            let base = b * reference.len();
            for (i, &d) in diff.data().iter().enumerate() {
                buf[base + i] += d.signum() / (n * kf);
            }
        }
    }
    let value = total / kf;
    let grad = match grad {
        Some(g) => Some(Tensor::from_vec(generated.shape().to_vec(), g)?),
        None => None,
    };
    Ok((value, grad))
}

/// Reconstruction objective over a stack of `K` generated branches:
/// mean absolute error against the reference plus, for images,
/// `alpha * (1 - similarity)`, averaged over branches.
pub fn loss_a(generated: &Tensor, reference: &Tensor, alpha: f64, window: &SsimWindow) -> Result<f64> {
    loss_a_impl(generated, reference, alpha, window, false).map(|(v, _)| v)
}

/// Objective plus its gradient with respect to the generated stack.
pub fn loss_a_grad(
    generated: &Tensor,
    reference: &Tensor,
    alpha: f64,
    window: &SsimWindow,
) -> Result<(f64, Tensor)> {
    let (v, g) = loss_a_impl(generated, reference, alpha, window, true)?;
    Ok((v, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// Latent-moment objective
// ---------------------------------------------------------------------------

const STD_GUARD: f64 = 1e-12;

fn loss_d_impl(
    latents: &Tensor,
    sigma_target: f64,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    if latents.ndim() < 2 || latents.shape()[0] < 2 {
        return Err(invalid(
            "moment objective needs at least two stacked latents",
        ));
    }
    let k = latents.shape()[0];
    let d: usize = latents.shape()[1..].iter().product();
    let (rows, shape) = flatten_rows(latents, d)?;
    let kf = k as f64;
    // Coordinate mean keeps the objective on the same per-element scale as
    // the restoration loss, so one weighting works for any latent width.
    let df = d as f64;
    let mut value = 0.0;
    let mut grad = if want_grad { Some(vec![0.0; k * d]) } else { None };
    for c in 0..d {
        let mut mean = 0.0;
        for i in 0..k {
            mean += rows.row(i)[c];
        }
        mean /= kf;
        let mut var = 0.0;
        for i in 0..k {
            let r = rows.row(i)[c] - mean;
            var += r * r;
        }
        var /= kf;
        // Guard keeps the derivative finite when all K entries coincide.
        let std = (var + STD_GUARD).sqrt();
        value += mean * mean + (std - sigma_target) * (std - sigma_target);
        if let Some(buf) = grad.as_mut() {
            for i in 0..k {
                let dev = rows.row(i)[c] - mean;
                buf[i * d + c] +=
                    (2.0 * mean / kf + 2.0 * (std - sigma_target) * dev / (kf * std)) / df;
            }
        }
    }
    value /= df;
    let grad = match grad {
        Some(g) => Some(Tensor::from_vec(vec![k, d], g)?.reshape(shape)?),
        None => None,
    };
    Ok((value, grad))
}

/// Moment objective over `K` stacked latents: per coordinate, squared mean
/// plus squared deviation of the population standard deviation from
/// `sigma_target`, averaged over coordinates.
pub fn loss_d(latents: &Tensor, sigma_target: f64) -> Result<f64> {
    loss_d_impl(latents, sigma_target, false).map(|(v, _)| v)
}

pub fn loss_d_grad(latents: &Tensor, sigma_target: f64) -> Result<(f64, Tensor)> {
    let (v, g) = loss_d_impl(latents, sigma_target, true)?;
    Ok((v, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// Kernel two-sample distance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdEstimator {
    /// V-statistic, includes diagonal terms; valid down to single samples.
    Biased,
    /// U-statistic, off-diagonal only; needs two samples per side.
    Unbiased,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Bandwidth `h` for the kernel `exp(-||a-b||^2 / (2 h^2))`, chosen so that
/// `2 h^2` equals the median pairwise squared distance of the pooled rows.
pub fn median_heuristic_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(invalid("bandwidth needs [n, d] and [m, d] inputs"));
    }
    let rows: Vec<&[f64]> = (0..x.shape()[0])
        .map(|i| x.row(i))
        .chain((0..y.shape()[0]).map(|i| y.row(i)))
        .collect();
    if rows.len() < 2 {
        return Err(invalid("bandwidth needs at least two pooled rows"));
    }
    let mut d2: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d2.push(sq_dist(rows[i], rows[j]));
        }
    }
    d2.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let med = if d2.len() % 2 == 1 {
        d2[d2.len() / 2]
    } else {
        0.5 * (d2[d2.len() / 2 - 1] + d2[d2.len() / 2])
    };
    Ok((med.max(STD_GUARD) / 2.0).sqrt())
}

/// Squared kernel maximum mean discrepancy between row sets `x` and `y`
/// under a Gaussian kernel. `bandwidth: None` applies the median heuristic.
/// With the biased estimator a singleton `y` reduces to the squared
/// distance between `y`'s kernel embedding and the empirical mean
/// embedding of `x`.
pub fn mmd2(
    x: &Tensor,
    y: &Tensor,
    bandwidth: Option<f64>,
    estimator: MmdEstimator,
) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(invalid("distance needs [n, d] and [m, d] inputs"));
    }
    let (n, m) = (x.shape()[0], y.shape()[0]);
    if n == 0 || m == 0 {
        return Err(invalid("empty sample sets"));
    }
    if estimator == MmdEstimator::Unbiased && (n < 2 || m < 2) {
        return Err(invalid("the unbiased estimator needs two samples per side"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(_) => return Err(invalid("bandwidth must be positive")),
        None => median_heuristic_bandwidth(x, y)?,
    };
    let gamma = 1.0 / (2.0 * h * h);
    let kern = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let mut kxx = 0.0;
    let mut kyy = 0.0;
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if estimator == MmdEstimator::Unbiased && i == j {
                continue;
            }
            kxx += kern(x.row(i), x.row(j));
        }
    }
    for i in 0..m {
        for j in 0..m {
            if estimator == MmdEstimator::Unbiased && i == j {
                continue;
            }
            kyy += kern(y.row(i), y.row(j));
        }
    }
    for i in 0..n {
        for j in 0..m {
            kxy += kern(x.row(i), y.row(j));
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    let value = match estimator {
        MmdEstimator::Biased => kxx / (nf * nf) + kyy / (mf * mf) - 2.0 * kxy / (nf * mf),
        MmdEstimator::Unbiased => {
            kxx / (nf * (nf - 1.0)) + kyy / (mf * (mf - 1.0)) - 2.0 * kxy / (nf * mf)
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "kernel two-sample distance".to_string(),
        });
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Score-based sample features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsConfig {
    /// Noise levels probed; each must lie inside the model's schedule.
    pub levels: Vec<f64>,
    /// Independent noisy evaluations averaged per level.
    pub draws_per_level: usize,
}

impl Default for EpsConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.05, 0.5, 5.0],
            draws_per_level: 8,
        }
    }
}

/// Feature embedding of one sample: the Monte-Carlo average of the model's
/// score estimate at noisy copies of `x`, concatenated across levels.
/// Perturbations that move `x` off the data manifold shift this embedding,
/// which makes kernel distances against a clean reference set a usable
/// detection statistic.
pub fn eps_feature(
    params: &CmParams,
    x: &Tensor,
    cfg: &EpsConfig,
    draws: &mut Draws,
) -> Result<Tensor> {
    if cfg.levels.is_empty() || cfg.draws_per_level == 0 {
        return Err(invalid("feature needs at least one level and one draw"));
    }
    let d = x.len();
    let mut out = Vec::with_capacity(cfg.levels.len() * d);
    let mut noise = vec![0.0; d];
    for &t in &cfg.levels {
        let mut acc = vec![0.0; d];
        for _ in 0..cfg.draws_per_level {
            draws.fill_normal(&mut noise);
            let noisy = Tensor::from_vec(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(&noise)
                    .map(|(&v, &z)| v + t * z)
                    .collect(),
            )?;
            let s = tweedie_score(params, &noisy, t)?;
            for (a, &v) in acc.iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        for a in acc {
            out.push(a / cfg.draws_per_level as f64);
        }
    }
    Tensor::vector(out)
}

// ---------------------------------------------------------------------------
// Histograms and rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    /// One count row per input group.
    pub counts: Vec<Vec<usize>>,
}

/// Equal-width histogram over the pooled range of all groups.
pub fn histogram(groups: &[&[f64]], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for g in groups {
        for &v in *g {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "histogram input".to_string(),
                });
            }
            lo = lo.min(v);
            hi = hi.max(v);
            any = true;
        }
    }
    if !any {
        return Err(invalid("histogram of no values"));
    }
    if lo == hi {
        // Degenerate range: center a unit-width axis on the single value.
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let counts = groups
        .iter()
        .map(|g| {
            let mut row = vec![0usize; bins];
            for &v in *g {
                let idx = (((v - lo) / width) as usize).min(bins - 1);
                row[idx] += 1;
            }
            row
        })
        .collect();
    Ok(Histogram { edges, counts })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy)]
pub struct RankTest {
    /// Number of `(a, b)` pairs with `a` ranked higher (ties count half).
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "a tends larger than b".
    pub p_value: f64,
}

/// Mann-Whitney rank test with the normal approximation, tie-corrected
/// variance, and continuity correction; alternative: values in `a` are
/// stochastically greater than values in `b`.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> Result<RankTest> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("rank test needs nonempty samples"));
    }
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .map(|&v| (v, 0usize))
        .chain(b.iter().map(|&v| (v, 1usize)))
        .collect();
    if pooled.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "rank test input".to_string(),
        });
    }
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite values"));
    // Average ranks across ties; accumulate the tie correction as we go.
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let count = (j - i) as f64;
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &pooled[i..j] {
            if item.1 == 0 {
                rank_sum_a += avg_rank;
            }
        }
        tie_term += count * count * count - count;
        i = j;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean_u = n1 * n2 / 2.0;
    let var_u = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var_u <= 0.0 {
        return Ok(RankTest {
            u,
            z: 0.0,
            p_value: 0.5,
        });
    }
    let z = (u - mean_u - 0.5) / var_u.sqrt();
    Ok(RankTest {
        u,
        z,
        p_value: 1.0 - normal_cdf(z),
    })
}
