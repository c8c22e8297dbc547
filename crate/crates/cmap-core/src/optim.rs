//! Adam with bias correction, over flat buffers.
//!
//! The same state type drives network training (buffers visited in the
//! network's fixed parameter order) and latent optimization in the purifier
//! (one flat buffer per latent population).

use crate::error::{invalid, Result};
use crate::mlp::{MlpGrads, MlpParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(lr: f64) -> Self {
        Self {
            learning_rate: lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update over a contiguous region starting at `offset`. Callers
    /// that shard a parameter vector across regions must call `advance`
    /// exactly once per optimizer step.
    pub fn apply_region(
        &mut self,
        cfg: &AdamConfig,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid("parameter/gradient length mismatch"));
        }
        if offset + params.len() > self.m.len() {
            return Err(invalid("Adam region exceeds state size"));
        }
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        Ok(())
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Convenience for a single flat buffer: one region, one step.
    pub fn apply(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.apply_region(cfg, 0, params, grads)?;
        self.advance();
        Ok(())
    }
}

/// Adam over a network's parameters.
#[derive(Debug, Clone)]
pub struct NetworkOptimizer {
    cfg: AdamConfig,
    state: AdamState,
}

impl NetworkOptimizer {
    pub fn new(cfg: AdamConfig, params: &MlpParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: AdamState::new(params.parameter_count()),
            cfg,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        let mut flat_grads = Vec::with_capacity(self.state.len());
        grads.visit(|g| flat_grads.extend_from_slice(g));
        if flat_grads.len() != self.state.len() {
            return Err(invalid("gradient size does not match optimizer state"));
        }
        let cfg = self.cfg;
        let mut offset = 0;
        let mut failed = None;
        let state = &mut self.state;
        params.visit_mut(|buf| {
            if failed.is_some() {
                return;
            }
            let g = &flat_grads[offset..offset + buf.len()];
            if let Err(e) = state.apply_region(&cfg, offset, buf, g) {
                failed = Some(e);
            }
            offset += buf.len();
        });
        if let Some(e) = failed {
            return Err(e);
        }
        self.state.advance();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{mlp_vjp, Activation, MlpParams};
    use crate::rng::StreamKey;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let cfg = AdamConfig::with_learning_rate(0.01);
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        let g = vec![10.0, -0.003, 0.5];
        st.apply(&cfg, &mut p, &g).unwrap();
        // Bias-corrected first step is lr * g/|g| up to epsilon smoothing.
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (2.0 + 0.01)).abs() < 1e-5);
        assert!((p[2] - (3.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let cfg = AdamConfig::with_learning_rate(0.1);
        let mut st = AdamState::new(1);
        let mut p = vec![5.0];
        let mut prev = p[0];
        for _ in 0..50 {
            st.apply(&cfg, &mut p, &[2.0]).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig::with_learning_rate(0.05);
        let mut st = AdamState::new(2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            st.apply(&cfg, &mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "ended at {p:?}");
    }

    #[test]
    fn network_training_trajectory_is_deterministic() {
        let run = || {
            let mut d = StreamKey::new(7, 7).draws();
            let mut net = MlpParams::init(&[2, 8, 1], Activation::SmoothGate, &mut d).unwrap();
            let mut opt = NetworkOptimizer::new(AdamConfig::default(), &net).unwrap();
            let x = Tensor::from_vec(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])
                .unwrap();
            for _ in 0..20 {
                let y = crate::mlp::mlp_forward(&net, &x).unwrap();
                // Descend on mean squared output, cotangent = 2 y / n.
                let cot = y.scale(2.0 / 4.0).unwrap();
                let (_, grads, _) = mlp_vjp(&net, &x, &cot).unwrap();
                opt.step(&mut net, &grads).unwrap();
            }
            crate::mlp::mlp_forward(&net, &x).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::with_learning_rate(0.0).validate().is_err());
        assert!(AdamConfig {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
