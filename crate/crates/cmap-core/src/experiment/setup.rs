//! Builds the concrete objects a run works on: dataset, split, generator,
//! classifier, and the resolved defense/attack settings.
//!
//! Randomness layout: every stage draws from `StreamKey::new(seed, STAGE)`
//! with replica, context, and sample indices appended as child lanes. Keys
//! are derived per work item before any parallel dispatch, which is what
//! keeps results identical across worker counts.

use std::path::Path;

use crate::attack::PgdConfig;
use crate::classifier::{accuracy, load_clf, train_clf, ClfParams, ClfTrainLog};
use crate::cm::{load_cm, train_consistency, CmParams, TrainLog};
use crate::data::{gen_gaussian, gen_shape_images, load_dataset, Dataset};
use crate::error::{invalid, Result};
use crate::purify::PurifyConfig;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

use super::config::{validate_against_data, CmSource, ClfSource, DataSource, RunConfig};

/// Stage identifiers for the master-seeded stream keys.
pub mod streams {
    /// Generator training draws.
    pub const TRAIN_CM: u64 = 0x10;
    /// Classifier training draws.
    pub const TRAIN_CLF: u64 = 0x11;
    /// Defense randomness (latent inits, surrogate noise) on the defender's
    /// side of an evaluation.
    pub const DEFENSE: u64 = 0x20;
    /// Attacker randomness, including the defense draws an adaptive
    /// attacker simulates.
    pub const ATTACK: u64 = 0x21;
    /// Distribution-probe noise draws.
    pub const OBSERVE: u64 = 0x30;
    /// Perturbation realizations for bound replays.
    pub const BOUND: u64 = 0x31;
}

/// Everything a replica evaluates against.
pub struct Pipeline {
    pub dataset: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub cm: CmParams,
    pub clf: ClfParams,
    pub cm_log: Option<TrainLog>,
    pub clf_log: Option<ClfTrainLog>,
    /// Training accuracy of the classifier, for run summaries.
    pub clf_train_acc: f64,
}

pub fn build_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Gaussian(spec) => gen_gaussian(spec),
        DataSource::Shapes(spec) => gen_shape_images(spec),
        DataSource::Load { dir } => load_dataset(Path::new(dir)),
    }
}

/// Broadcasts the scalar mean of an analytic source over the sample shape.
fn broadcast_mu(mu: f64, shape: &[usize]) -> Result<Tensor> {
    let len = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), vec![mu; len])
}

pub fn acquire_cm(
    source: &CmSource,
    train: &Dataset,
    seed: u64,
    replica: u64,
) -> Result<(CmParams, Option<TrainLog>)> {
    match source {
        CmSource::Analytic {
            schedule,
            mu,
            sigma_x,
        } => {
            let mu = broadcast_mu(*mu, &train.sample_shape())?;
            Ok((CmParams::analytic(*schedule, mu, *sigma_x)?, None))
        }
        CmSource::Train(cfg) => {
            let mut draws = StreamKey::new(seed, streams::TRAIN_CM).child(replica).draws();
            let (params, log) = train_consistency(cfg, &train.samples, &mut draws)?;
            Ok((params, Some(log)))
        }
        CmSource::Load { path } => Ok((load_cm(Path::new(path))?, None)),
    }
}

pub fn acquire_clf(
    source: &ClfSource,
    train: &Dataset,
    seed: u64,
    replica: u64,
) -> Result<(ClfParams, Option<ClfTrainLog>)> {
    match source {
        ClfSource::Train(cfg) => {
            let mut draws = StreamKey::new(seed, streams::TRAIN_CLF).child(replica).draws();
            let (params, log) = train_clf(cfg, train, &mut draws)?;
            Ok((params, Some(log)))
        }
        ClfSource::Load { path } => Ok((load_clf(Path::new(path))?, None)),
    }
}

/// Assembles one replica's pipeline. Loaded or analytic models are shared
/// across replicas; trained ones redraw their initialization and batches.
pub fn build_pipeline(cfg: &RunConfig, replica: u64) -> Result<Pipeline> {
    let dataset = build_dataset(&cfg.data.source)?;
    validate_against_data(cfg, &dataset)?;
    let (train, test) = dataset.split(cfg.data.train_count)?;
    let (cm, cm_log) = acquire_cm(&cfg.cm, &train, cfg.seed, replica)?;
    if cm.sample_dim() != Some(dataset.sample_dim()) {
        return Err(invalid(format!(
            "generator dimension {:?} does not match data dimension {}",
            cm.sample_dim(),
            dataset.sample_dim()
        )));
    }
    let (clf, clf_log) = acquire_clf(&cfg.clf, &train, cfg.seed, replica)?;
    if clf.class_count != dataset.class_count {
        return Err(invalid(format!(
            "classifier has {} classes, data has {}",
            clf.class_count, dataset.class_count
        )));
    }
    let clf_train_acc = accuracy(&clf, &train)?;
    Ok(Pipeline {
        dataset,
        train,
        test,
        cm,
        clf,
        cm_log,
        clf_log,
        clf_train_acc,
    })
}

/// Purifier settings with the classification clamp defaulted to the data's
/// value range.
pub fn resolved_purify(cfg: &RunConfig, dataset: &Dataset) -> PurifyConfig {
    let mut p = cfg.purify.clone();
    if p.clamp.is_none() {
        p.clamp = dataset.value_range();
    }
    p
}

/// Ball projection with the value box defaulted to the data's range.
pub fn resolved_pgd(cfg: &RunConfig, dataset: &Dataset) -> PgdConfig {
    let mut p = cfg.attack.pgd.clone();
    if p.range.is_none() {
        p.range = dataset.value_range();
    }
    p
}
