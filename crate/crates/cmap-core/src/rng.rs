//! Keyed random streams.
//!
//! Every source of randomness in the crate is addressed by a
//! `(master_seed, stream_id)` pair. A key always unfolds into the same value
//! sequence, independent of thread count or evaluation order, so experiments
//! replay bit-identically as long as each logical task consumes its own
//! stream. Sub-streams are derived by hashing a lane index into the key,
//! which lets a purification run hand one independent stream to each latent
//! and an attack hand one to each sample without any shared mutable state.
//!
//! The generator core is ChaCha8 seeded from the key; normal deviates use
//! the Marsaglia polar transform so the mapping from key to values is fully
//! specified by this file.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Address of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Derives an independent child key. Children of distinct parents and
    /// distinct lanes land in statistically unrelated regions of the id
    /// space.
    pub fn child(&self, lane: u64) -> StreamKey {
        let mut s = self.stream_id ^ GOLDEN;
        let a = splitmix64(&mut s);
        let mut l = lane.wrapping_add(0x5851_f42d_4c95_7f2d);
        let b = splitmix64(&mut l);
        StreamKey {
            master_seed: self.master_seed,
            stream_id: a ^ b.rotate_left(23),
        }
    }

    /// Opens the stream for sequential consumption.
    pub fn draws(&self) -> Draws {
        let mut state = self.master_seed ^ 0x1234_5678_9abc_def0;
        let mixed_id = {
            let mut s = self.stream_id;
            splitmix64(&mut s)
        };
        state ^= mixed_id;
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Draws {
            rng: ChaCha8Rng::from_seed(seed),
            spare_normal: None,
        }
    }
}

/// Sequential value source for one stream. Cloning forks the state, so a
/// clone taken before a computation replays the exact same tail — the
/// mechanism differentiable stochastic passes use to rebuild their forward
/// noise.
#[derive(Clone)]
pub struct Draws {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Draws {
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate (polar method, spare value cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * m);
                return u * m;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Unbiased index in `0..n` by rejection.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Draws a tensor of independent `N(mean, std^2)` values. `std = 0` is
/// allowed and produces a constant tensor without consuming any draws'
/// nondeterminism (values are still read from the stream to keep the
/// consumption count shape-determined).
pub fn sample_gaussian(draws: &mut Draws, shape: Vec<usize>, mean: f64, std: f64) -> Result<Tensor> {
    if std < 0.0 {
        return Err(invalid(format!("standard deviation must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    draws.fill_normal(&mut data);
    for v in &mut data {
        *v = mean + std * *v;
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_replay_identical_sequences() {
        let key = StreamKey::new(7, 3);
        let a: Vec<u64> = {
            let mut d = key.draws();
            (0..64).map(|_| d.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut d = key.draws();
            (0..64).map(|_| d.next_u64()).collect()
        };
        assert_eq!(a, b);

        let na: Vec<f64> = {
            let mut d = key.draws();
            (0..64).map(|_| d.normal()).collect()
        };
        let nb: Vec<f64> = {
            let mut d = key.draws();
            (0..64).map(|_| d.normal()).collect()
        };
        assert_eq!(na, nb);
    }

    #[test]
    fn distinct_streams_decorrelated() {
        let n = 100_000;
        let mut a = StreamKey::new(7, 0).draws();
        let mut b = StreamKey::new(7, 1).draws();
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.normal();
            let y = b.normal();
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let va = saa / nf - (sa / nf).powi(2);
        let vb = sbb / nf - (sb / nf).powi(2);
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.01, "correlation {corr} too large");
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut d = StreamKey::new(42, 9).draws();
        let n = 200_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            let x = d.normal();
            s += x;
            ss += x * x;
        }
        let mean = s / n as f64;
        let var = ss / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn uniform_range_and_bounds() {
        let mut d = StreamKey::new(1, 1).draws();
        for _ in 0..10_000 {
            let u = d.uniform();
            assert!((0.0..1.0).contains(&u));
        }
        for _ in 0..1000 {
            let u = d.uniform_in(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&u));
        }
    }

    #[test]
    fn child_streams_diverge_from_parent_and_siblings() {
        let key = StreamKey::new(11, 5);
        let mut parent = key.draws();
        let mut c0 = key.child(0).draws();
        let mut c1 = key.child(1).draws();
        let p: Vec<u64> = (0..8).map(|_| parent.next_u64()).collect();
        let a: Vec<u64> = (0..8).map(|_| c0.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        assert_ne!(p, a);
        assert_ne!(p, b);
        assert_ne!(a, b);
        // Children of different parents with the same lane must differ too.
        let other = StreamKey::new(11, 6).child(0);
        assert_ne!(key.child(0).stream_id, other.stream_id);
    }

    #[test]
    fn sample_gaussian_shape_and_degenerate_std() {
        let mut d = StreamKey::new(3, 3).draws();
        let t = sample_gaussian(&mut d, vec![4, 5], 2.0, 0.5).unwrap();
        assert_eq!(t.shape(), &[4, 5]);
        let mut d = StreamKey::new(3, 3).draws();
        let z = sample_gaussian(&mut d, vec![10], -1.5, 0.0).unwrap();
        assert!(z.data().iter().all(|&v| v == -1.5));
        let mut d = StreamKey::new(3, 3).draws();
        assert!(sample_gaussian(&mut d, vec![2], 0.0, -1.0).is_err());
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut xs: Vec<usize> = (0..100).collect();
        let mut d = StreamKey::new(5, 8).draws();
        d.shuffle(&mut xs);
        let mut ys: Vec<usize> = (0..100).collect();
        let mut d = StreamKey::new(5, 8).draws();
        d.shuffle(&mut ys);
        assert_eq!(xs, ys);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
