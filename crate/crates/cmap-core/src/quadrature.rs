//! Gauss-Legendre quadrature on finite intervals.
//!
//! Nodes and weights come from Newton iteration on the Legendre polynomial;
//! 128 nodes are the crate default, far more than the smooth one-dimensional
//! expectations here require.

use crate::error::{invalid, Result};

pub const DEFAULT_NODES: usize = 128;

/// Nodes and weights for `n`-point Gauss-Legendre quadrature on `[-1, 1]`.
pub fn gauss_legendre_nodes(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(invalid("quadrature needs at least one node"));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    // Roots are symmetric; solve the upper half and mirror.
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_with_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    Ok((nodes, weights))
}

/// Legendre polynomial value and derivative at `x` via the three-term
/// recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    // P'_n(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
    let d = if (x * x - 1.0).abs() < 1e-300 {
        // Endpoint limit, not reached by interior Newton iterates.
        0.5 * (n * (n + 1)) as f64 * if x > 0.0 { 1.0 } else { -1.0 }
    } else {
        n as f64 * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, d)
}

/// Integrates `f` over `[a, b]` with `n` Gauss-Legendre nodes. `a > b`
/// flips the sign; `a == b` is exactly zero.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(invalid("integration bounds must be finite"));
    }
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return Ok(-integrate(f, b, a, n)?);
    }
    let (nodes, weights) = gauss_legendre_nodes(n)?;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mid + half * x);
    }
    Ok(acc * half)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Closed forms used as oracles:
    //   int_0^1 t^2/(1+t^2) dt = 1 - pi/4
    //   int_0^1 t/(1+t^2) dt   = ln(2)/2
    const ONE_MINUS_QUARTER_PI: f64 = 0.214_601_836_602_551_69;
    const HALF_LN_TWO: f64 = 0.346_573_590_279_972_65;

    #[test]
    fn weights_positive_and_sum_to_two() {
        for n in [1, 2, 3, 5, 16, 64, 128] {
            let (nodes, weights) = gauss_legendre_nodes(n).unwrap();
            assert!(weights.iter().all(|&w| w > 0.0));
            let sum: f64 = weights.iter().sum();
            assert!((sum - 2.0).abs() < 1e-12, "n={n} weight sum {sum}");
            for i in 0..n {
                assert!((nodes[i] + nodes[n - 1 - i]).abs() < 1e-12, "asymmetric nodes");
            }
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        // n = 4 integrates degree-7 polynomials exactly: int_0^1 x^7 = 1/8.
        let v = integrate(|x| x.powi(7), 0.0, 1.0, 4).unwrap();
        assert!((v - 0.125).abs() < 1e-14, "got {v}");
        // n = 2 handles cubics: int_{-1}^{2} x^3 = 15/4.
        let v = integrate(|x| x * x * x, -1.0, 2.0, 2).unwrap();
        assert!((v - 3.75).abs() < 1e-13, "got {v}");
    }

    #[test]
    fn rational_expectations_match_closed_forms() {
        for n in [64, 96, 128] {
            let v = integrate(|t| t * t / (1.0 + t * t), 0.0, 1.0, n).unwrap();
            assert!((v - ONE_MINUS_QUARTER_PI).abs() < 1e-12, "n={n} got {v}");
            let v = integrate(|t| t / (1.0 + t * t), 0.0, 1.0, n).unwrap();
            assert!((v - HALF_LN_TWO).abs() < 1e-12, "n={n} got {v}");
        }
    }

    #[test]
    fn smooth_integrands_below_1e10_error_from_64_nodes() {
        let e_minus_one = std::f64::consts::E - 1.0;
        for n in [64, 128, 192] {
            let v = integrate(|t| t.exp(), 0.0, 1.0, n).unwrap();
            assert!((v - e_minus_one).abs() < 1e-10);
            let v = integrate(|t| t.sin(), 0.0, std::f64::consts::PI, n).unwrap();
            assert!((v - 2.0).abs() < 1e-10);
            // The variance integrand of the purification shift analysis.
            let s = 0.5f64;
            let exact = 1.0 - s * (1.0 / s).atan();
            let v = integrate(|t| t * t / (s * s + t * t), 0.0, 1.0, n).unwrap();
            assert!((v - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn oriented_and_degenerate_intervals() {
        assert_eq!(integrate(|x| x, 1.0, 1.0, 8).unwrap(), 0.0);
        let forward = integrate(|x| x * x, 0.0, 2.0, 16).unwrap();
        let backward = integrate(|x| x * x, 2.0, 0.0, 16).unwrap();
        assert!((forward + backward).abs() < 1e-13);
        assert!(integrate(|x| x, f64::NAN, 1.0, 8).is_err());
        assert!(gauss_legendre_nodes(0).is_err());
    }
}
