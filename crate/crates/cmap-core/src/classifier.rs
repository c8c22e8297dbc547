//! MLP classifier with cross-entropy training.
//!
//! Small enough to train in seconds on this project's synthetic datasets,
//! yet fully differentiable with respect to its input — the property the
//! attack suite depends on.

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::mlp::{mlp_forward, mlp_vjp, Activation, MlpParams};
use crate::optim::{AdamConfig, NetworkOptimizer};
use crate::rng::Draws;
use crate::tensor::{flatten_rows, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-coordinate affine standardization applied before the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: Tensor,
    /// Already guarded away from zero when fitted.
    pub std: Tensor,
}

impl InputScaling {
    pub fn fit(samples: &Tensor) -> Result<Self> {
        if samples.ndim() != 2 || samples.shape()[0] == 0 {
            return Err(invalid("scaling must be fit on a nonempty [n, d] tensor"));
        }
        let (n, d) = (samples.shape()[0], samples.shape()[1]);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(samples.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
                let r = v - m;
                *s += r * r;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
        Ok(Self {
            mean: Tensor::vector(mean)?,
            std: Tensor::vector(std)?,
        })
    }

    fn apply(&self, rows: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        let (n_rows, _) = (rows.shape()[0], rows.shape()[1]);
        let mut out = Vec::with_capacity(rows.len());
        for i in 0..n_rows {
            for ((&v, &m), &s) in rows.row(i).iter().zip(self.mean.data()).zip(self.std.data()) {
                out.push((v - m) / s);
            }
        }
        Tensor::from_vec(vec![n_rows, d], out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClfParams {
    pub net: MlpParams,
    pub class_count: usize,
    pub scaling: Option<InputScaling>,
}

impl ClfParams {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
}

pub const DEFAULT_CLF_HIDDEN: [usize; 2] = [128, 128];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClfTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Standardize inputs with training-set statistics.
    pub standardize: bool,
    pub log_stride: usize,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_CLF_HIDDEN.to_vec(),
            steps: 2000,
            batch_size: 64,
            adam: AdamConfig::default(),
            standardize: true,
            log_stride: 200,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClfTrainLog {
    pub losses: Vec<(usize, f64)>,
}

/// Stable log-softmax of one logit row.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn standardized(params: &ClfParams, x: &Tensor) -> Result<Tensor> {
    let (rows, _) = flatten_rows(x, params.input_dim())?;
    match &params.scaling {
        Some(s) => s.apply(&rows),
        None => Ok(rows),
    }
}

/// Class logits, one row per input sample.
pub fn clf_logits(params: &ClfParams, x: &Tensor) -> Result<Tensor> {
    mlp_forward(&params.net, &standardized(params, x)?)
}

/// Class probabilities, one row per input sample.
pub fn clf_probs(params: &ClfParams, x: &Tensor) -> Result<Tensor> {
    let logits = clf_logits(params, x)?;
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for l in log_softmax(logits.row(i)) {
            out.push(l.exp());
        }
    }
    Tensor::from_vec(vec![n, c], out)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels; ties resolve to the lowest class index.
pub fn predict_batch(params: &ClfParams, x: &Tensor) -> Result<Vec<usize>> {
    let logits = clf_logits(params, x)?;
    Ok((0..logits.shape()[0])
        .map(|i| argmax_lowest(logits.row(i)))
        .collect())
}

pub fn predict(params: &ClfParams, x: &Tensor) -> Result<usize> {
    let labels = predict_batch(params, x)?;
    if labels.len() != 1 {
        return Err(invalid("predict expects a single sample"));
    }
    Ok(labels[0])
}

/// Mean cross-entropy of a batch together with its gradient with respect to
/// the (unstandardized) inputs. The gradient is the softmax-minus-one-hot
/// cotangent pulled back through the network and the scaling.
pub fn clf_input_grad(params: &ClfParams, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, shape) = flatten_rows(x, params.input_dim())?;
    let n = rows.shape()[0];
    if labels.len() != n {
        return Err(invalid("label count must match the batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= params.class_count) {
        return Err(invalid(format!("label {bad} out of range")));
    }
    let std_rows = match &params.scaling {
        Some(s) => s.apply(&rows)?,
        None => rows.clone(),
    };
    let logits = mlp_forward(&params.net, &std_rows)?;
    let c = logits.shape()[1];
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(n * c);
    for i in 0..n {
        let ls = log_softmax(logits.row(i));
        loss -= ls[labels[i]];
        for (j, &l) in ls.iter().enumerate() {
            let p = l.exp();
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            cot.push((p - onehot) / n as f64);
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross-entropy".to_string(),
        });
    }
    let cot = Tensor::from_vec(vec![n, c], cot)?;
    let (_, _, mut gin) = mlp_vjp(&params.net, &std_rows, &cot)?;
    if let Some(s) = &params.scaling {
        let d = params.input_dim();
        let mut scaled = Vec::with_capacity(gin.len());
        for i in 0..n {
            for (&g, &sd) in gin.row(i).iter().zip(s.std.data()) {
                scaled.push(g / sd);
            }
        }
        gin = Tensor::from_vec(vec![n, d], scaled)?;
    }
    Ok((loss, gin.reshape(shape)?))
}

/// Fraction of `dataset` classified correctly.
pub fn accuracy(params: &ClfParams, dataset: &Dataset) -> Result<f64> {
    let labels = predict_batch(params, &dataset.samples)?;
    let hits = labels
        .iter()
        .zip(&dataset.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Trains a fresh classifier on `dataset` with minibatch Adam.
pub fn train_clf(
    cfg: &ClfTrainConfig,
    dataset: &Dataset,
    draws: &mut Draws,
) -> Result<(ClfParams, ClfTrainLog)> {
    cfg.adam.validate()?;
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.log_stride == 0 {
        return Err(invalid("steps, batch_size, and log_stride must be positive"));
    }
    if dataset.len() == 0 {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let d = dataset.sample_dim();
    let scaling = if cfg.standardize {
        Some(InputScaling::fit(&dataset.samples)?)
    } else {
        None
    };
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(dataset.class_count);
    let net = MlpParams::init(&dims, Activation::SmoothGate, draws)?;
    let mut params = ClfParams {
        net,
        class_count: dataset.class_count,
        scaling,
    };
    let mut opt = NetworkOptimizer::new(cfg.adam, &params.net)?;
    let mut log = ClfTrainLog::default();
    let mut window = 0.0;
    let mut window_n = 0usize;
    let n_total = dataset.len();
    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| draws.index(n_total)).collect();
        let mut rows = Vec::with_capacity(cfg.batch_size * d);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for &i in &indices {
            rows.extend_from_slice(dataset.samples.row(i));
            labels.push(dataset.labels[i]);
        }
        let batch = Tensor::from_vec(vec![cfg.batch_size, d], rows)?;
        let std_rows = match &params.scaling {
            Some(s) => s.apply(&batch)?,
            None => batch,
        };
        let logits = mlp_forward(&params.net, &std_rows)?;
        let c = params.class_count;
        let mut loss = 0.0;
        let mut cot = Vec::with_capacity(cfg.batch_size * c);
        for i in 0..cfg.batch_size {
            let ls = log_softmax(logits.row(i));
            loss -= ls[labels[i]];
            for (j, &l) in ls.iter().enumerate() {
                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                cot.push((l.exp() - onehot) / cfg.batch_size as f64);
            }
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: step,
                message: "non-finite classifier loss".to_string(),
            });
        }
        let cot = Tensor::from_vec(vec![cfg.batch_size, c], cot)?;
        let (_, grads, _) = mlp_vjp(&params.net, &std_rows, &cot)?;
        opt.step(&mut params.net, &grads)?;
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

const CLF_FORMAT: &str = "classifier";
const CLF_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClfSnapshot {
    format: String,
    version: u32,
    class_count: usize,
    scaling: Option<InputScaling>,
    net: MlpParams,
}

pub fn save_clf(params: &ClfParams, path: &Path) -> Result<()> {
    let snap = ClfSnapshot {
        format: CLF_FORMAT.to_string(),
        version: CLF_VERSION,
        class_count: params.class_count,
        scaling: params.scaling.clone(),
        net: params.net.clone(),
    };
    std::fs::write(path, serde_json::to_string(&snap)?)?;
    Ok(())
}

pub fn load_clf(path: &Path) -> Result<ClfParams> {
    let text = std::fs::read_to_string(path)?;
    let snap: ClfSnapshot = serde_json::from_str(&text)?;
    if snap.format != CLF_FORMAT {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected format '{CLF_FORMAT}', found '{}'", snap.format),
        });
    }
    if snap.version != CLF_VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported classifier version {}", snap.version),
        });
    }
    let net = MlpParams::from_layers(snap.net.layers().to_vec())?;
    if net.output_dim() != snap.class_count {
        return Err(invalid("stored head width does not match class_count"));
    }
    Ok(ClfParams {
        net,
        class_count: snap.class_count,
        scaling: snap.scaling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian, gen_shape_images, GaussianSpec, ShapeImageSpec};
    use crate::mlp::{finite_diff_check, Layer};
    use crate::rng::StreamKey;

    fn identity_clf() -> ClfParams {
        let layer = Layer {
            weight: Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
            activation: Activation::Identity,
        };
        ClfParams {
            net: MlpParams::from_layers(vec![layer]).unwrap(),
            class_count: 2,
            scaling: None,
        }
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let params = identity_clf();
        let x = Tensor::vector(vec![2.0, -1.0]).unwrap();
        let (loss, grad) = clf_input_grad(&params, &x, &[0]).unwrap();
        // softmax(2, -1): p0 = e^2/(e^2 + e^-1)
        let p0 = (2.0f64).exp() / ((2.0f64).exp() + (-1.0f64).exp());
        assert!((loss + p0.ln()).abs() < 1e-12);
        // identity net: input grad equals (p - onehot)
        assert!((grad.data()[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((grad.data()[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one_and_match_logits() {
        let params = identity_clf();
        let x = Tensor::from_vec(vec![2, 2], vec![3.0, 1.0, -4.0, 2.0]).unwrap();
        let p = clf_probs(&params, &x).unwrap();
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p.at(&[0, 0]) > p.at(&[0, 1]));
        assert!(p.at(&[1, 1]) > p.at(&[1, 0]));
    }

    #[test]
    fn equal_logits_pick_the_lowest_class() {
        let layer = Layer {
            weight: Tensor::zeros(vec![3, 2]),
            bias: Tensor::zeros(vec![3]),
            activation: Activation::Identity,
        };
        let params = ClfParams {
            net: MlpParams::from_layers(vec![layer]).unwrap(),
            class_count: 3,
            scaling: None,
        };
        let x = Tensor::vector(vec![0.7, -0.3]).unwrap();
        assert_eq!(predict(&params, &x).unwrap(), 0);
    }

    #[test]
    fn input_gradient_matches_finite_differences_with_scaling() {
        let mut d = StreamKey::new(40, 0).draws();
        let net = MlpParams::init(&[3, 16, 4], Activation::SmoothGate, &mut d).unwrap();
        let params = ClfParams {
            net,
            class_count: 4,
            scaling: Some(InputScaling {
                mean: Tensor::vector(vec![0.5, -0.1, 0.2]).unwrap(),
                std: Tensor::vector(vec![2.0, 0.5, 1.5]).unwrap(),
            }),
        };
        let x = Tensor::vector(vec![0.4, 0.9, -1.2]).unwrap();
        let (_, grad) = clf_input_grad(&params, &x, &[2]).unwrap();
        let err = finite_diff_check(
            |p| clf_input_grad(&params, p, &[2]).map(|(l, _)| l),
            &grad,
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "input gradient error {err}");
    }

    #[test]
    fn batch_gradient_averages_per_sample_losses() {
        let mut d = StreamKey::new(41, 0).draws();
        let net = MlpParams::init(&[2, 8, 3], Activation::SmoothGate, &mut d).unwrap();
        let params = ClfParams {
            net,
            class_count: 3,
            scaling: None,
        };
        let batch = Tensor::from_vec(vec![2, 2], vec![0.3, -0.8, 1.1, 0.5]).unwrap();
        let (loss, grad) = clf_input_grad(&params, &batch, &[1, 2]).unwrap();
        let (l0, g0) =
            clf_input_grad(&params, &Tensor::vector(vec![0.3, -0.8]).unwrap(), &[1]).unwrap();
        let (l1, g1) =
            clf_input_grad(&params, &Tensor::vector(vec![1.1, 0.5]).unwrap(), &[2]).unwrap();
        assert!((loss - 0.5 * (l0 + l1)).abs() < 1e-12);
        for (i, g) in g0.data().iter().enumerate() {
            assert!((grad.data()[i] - 0.5 * g).abs() < 1e-12);
        }
        for (i, g) in g1.data().iter().enumerate() {
            assert!((grad.data()[2 + i] - 0.5 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_gaussians_reach_high_accuracy() {
        let spec = GaussianSpec {
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            sigma_x: 0.4,
            count: 400,
            seed: 7,
        };
        let data = gen_gaussian(&spec).unwrap();
        let (train, test) = data.split(300).unwrap();
        let cfg = ClfTrainConfig {
            hidden: vec![16],
            steps: 300,
            batch_size: 32,
            log_stride: 50,
            ..Default::default()
        };
        let mut draws = StreamKey::new(50, 0).draws();
        let (params, log) = train_clf(&cfg, &train, &mut draws).unwrap();
        assert!(!log.losses.is_empty());
        assert!(log.losses.last().unwrap().1 < log.losses[0].1);
        assert!(accuracy(&params, &test).unwrap() > 0.97);
    }

    #[test]
    fn shape_images_reach_the_accuracy_gate() {
        let spec = ShapeImageSpec {
            count: 1200,
            seed: 3,
            ..Default::default()
        };
        let data = gen_shape_images(&spec).unwrap();
        let (train, test) = data.split(900).unwrap();
        let cfg = ClfTrainConfig {
            steps: 900,
            batch_size: 64,
            ..Default::default()
        };
        let mut draws = StreamKey::new(51, 0).draws();
        let (params, _) = train_clf(&cfg, &train, &mut draws).unwrap();
        let acc = accuracy(&params, &test).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn snapshot_round_trip_and_foreign_format_rejection() {
        let mut d = StreamKey::new(42, 0).draws();
        let net = MlpParams::init(&[2, 8, 3], Activation::SmoothGate, &mut d).unwrap();
        let params = ClfParams {
            net,
            class_count: 3,
            scaling: Some(InputScaling {
                mean: Tensor::vector(vec![0.1, 0.2]).unwrap(),
                std: Tensor::vector(vec![1.0, 2.0]).unwrap(),
            }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        save_clf(&params, &path).unwrap();
        let back = load_clf(&path).unwrap();
        let x = Tensor::vector(vec![0.25, -0.75]).unwrap();
        assert_eq!(
            clf_logits(&params, &x).unwrap().data(),
            clf_logits(&back, &x).unwrap().data()
        );
        std::fs::write(&path, r#"{"format":"other","version":1}"#).unwrap();
        assert!(load_clf(&path).is_err());
    }
}
