//! Dataset generation and ingestion.
//!
//! Two synthetic families cover the experiments: labeled isotropic Gaussian
//! mixtures in low dimension, and 16x16 grayscale images of procedural
//! patterns (filled disc, horizontal split, vertical split) whose class
//! manifolds are smooth and low-dimensional. External corpora arrive through
//! the big-endian IDX format; internal snapshots are a JSON manifest plus a
//! raw little-endian `f64` payload so round trips are bit-exact.

use crate::error::{invalid, Error, Result};
use crate::rng::{Draws, StreamKey};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Unbounded point clouds.
    Points,
    /// Grayscale images with values in `[0, 1]`.
    Images { height: usize, width: usize },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DataKind,
    /// `[n, d]`, one flattened sample per row.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(kind: DataKind, samples: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.ndim() != 2 {
            return Err(invalid("dataset samples must be [n, d]"));
        }
        if samples.shape()[0] != labels.len() {
            return Err(invalid(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let DataKind::Images { height, width } = kind {
            if height * width != samples.shape()[1] {
                return Err(invalid("image dimensions do not match sample width"));
            }
            if samples.min() < 0.0 || samples.max() > 1.0 {
                return Err(invalid("image values must lie in [0, 1]"));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid(format!("label {bad} outside {class_count} classes")));
        }
        Ok(Self {
            kind,
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dim(&self) -> usize {
        self.samples.shape()[1]
    }

    /// Sample `i`, shaped `[d]` for points and `[h, w]` for images.
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        let flat = self.samples.subtensor(i)?;
        match self.kind {
            DataKind::Points => Ok(flat),
            DataKind::Images { height, width } => flat.reshape(vec![height, width]),
        }
    }

    /// The shape a single sample carries, per `sample`.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.kind {
            DataKind::Points => vec![self.sample_dim()],
            DataKind::Images { height, width } => vec![height, width],
        }
    }

    pub fn value_range(&self) -> Option<(f64, f64)> {
        match self.kind {
            DataKind::Points => None,
            DataKind::Images { .. } => Some((0.0, 1.0)),
        }
    }

    /// Head/tail split: the first `n_train` rows and the rest. The halves
    /// are disjoint by construction and together exhaust the dataset.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(invalid(format!(
                "split point {n_train} must fall strictly inside {} samples",
                self.len()
            )));
        }
        let train = self.subset(&(0..n_train).collect::<Vec<_>>())?;
        let test = self.subset(&(n_train..self.len()).collect::<Vec<_>>())?;
        Ok((train, test))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("subset index {i} out of bounds")));
            }
            data.extend_from_slice(self.samples.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            self.kind,
            Tensor::from_vec(vec![indices.len(), d], data)?,
            labels,
            self.class_count,
        )
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixtures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSpec {
    /// One mean per class; all must share a dimension.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation shared by every component.
    pub sigma_x: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            means: vec![vec![1.5, 1.5], vec![-1.5, -1.5]],
            sigma_x: 0.35,
            count: 600,
            seed: 0,
        }
    }
}

/// Draws `count` samples from an equal-weight isotropic Gaussian mixture.
/// The label of a sample is the index of the component that generated it.
pub fn gen_gaussian(spec: &GaussianSpec) -> Result<Dataset> {
    if spec.means.is_empty() {
        return Err(invalid("mixture needs at least one component"));
    }
    let d = spec.means[0].len();
    if d == 0 || spec.means.iter().any(|m| m.len() != d) {
        return Err(invalid("component means must share a positive dimension"));
    }
    if spec.sigma_x <= 0.0 {
        return Err(invalid("sigma_x must be positive"));
    }
    if spec.count == 0 {
        return Err(invalid("count must be positive"));
    }
    let mut draws = StreamKey::new(spec.seed, 0xd47a).draws();
    let mut data = Vec::with_capacity(spec.count * d);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let c = draws.index(spec.means.len());
        labels.push(c);
        for &m in &spec.means[c] {
            data.push(m + spec.sigma_x * draws.normal());
        }
    }
    Dataset::new(
        DataKind::Points,
        Tensor::from_vec(vec![spec.count, d], data)?,
        labels,
        spec.means.len(),
    )
}

// ---------------------------------------------------------------------------
// Procedural shape images
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeImageSpec {
    pub side: usize,
    pub count: usize,
    /// Per-pixel additive Gaussian texture noise before clamping.
    pub noise: f64,
    /// Pattern amplitude in `(0, 1]`: intensities are compressed toward
    /// mid-gray by this factor before noise. Classification margins scale
    /// with it, so it sets how much a fixed-budget attack can bite.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for ShapeImageSpec {
    fn default() -> Self {
        Self {
            side: 16,
            count: 5000,
            noise: 0.01,
            contrast: 1.0,
            seed: 0,
        }
    }
}

pub const SHAPE_CLASS_COUNT: usize = 3;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn render_shape(
    class: usize,
    side: usize,
    draws: &mut Draws,
    noise: f64,
    contrast: f64,
    out: &mut Vec<f64>,
) {
    let s = side as f64;
    let mut fg = draws.uniform_in(0.75, 1.0);
    let mut bg = draws.uniform_in(0.0, 0.12);
    if contrast != 1.0 {
        fg = 0.5 + contrast * (fg - 0.5);
        bg = 0.5 + contrast * (bg - 0.5);
    }
    let span = fg - bg;
    match class {
        0 => {
            // Filled disc with a soft one-pixel edge. The radius range keeps
            // the bright area comparable to the split classes so no class
            // dominates the pixel statistics.
            let cx = draws.uniform_in(0.42 * s, 0.58 * s);
            let cy = draws.uniform_in(0.42 * s, 0.58 * s);
            let r = draws.uniform_in(0.24 * s, 0.34 * s);
            for y in 0..side {
                for x in 0..side {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let dist = (dx * dx + dy * dy).sqrt();
                    out.push(bg + span * sigmoid((r - dist) / 0.75));
                }
            }
        }
        1 => {
            // Horizontal split: dark above a soft boundary row, bright below.
            // The boundary position varies continuously, never the polarity,
            // so the class manifold has no disconnected components.
            let b = draws.uniform_in(0.3 * s, 0.7 * s);
            for y in 0..side {
                let v = bg + span * sigmoid((y as f64 + 0.5 - b) / 0.75);
                for _ in 0..side {
                    out.push(v);
                }
            }
        }
        _ => {
            // Vertical split: dark left of a soft boundary column, bright right.
            let b = draws.uniform_in(0.3 * s, 0.7 * s);
            let mut row = Vec::with_capacity(side);
            for x in 0..side {
                row.push(bg + span * sigmoid((x as f64 + 0.5 - b) / 0.75));
            }
            for _ in 0..side {
                out.extend_from_slice(&row);
            }
        }
    }
    if noise > 0.0 {
        let n = side * side;
        let start = out.len() - n;
        for v in &mut out[start..] {
            *v += noise * draws.normal();
        }
    }
    let n = side * side;
    let start = out.len() - n;
    for v in &mut out[start..] {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Generates grayscale pattern images in `[0, 1]`, classes cycling through
/// disc (0), horizontal split (1), vertical split (2) in round-robin order
/// so any prefix split stays balanced.
pub fn gen_shape_images(spec: &ShapeImageSpec) -> Result<Dataset> {
    if spec.side < 8 {
        return Err(invalid("image side must be at least 8"));
    }
    if spec.count == 0 {
        return Err(invalid("count must be positive"));
    }
    if spec.noise < 0.0 {
        return Err(invalid("noise amplitude must be >= 0"));
    }
    if !(spec.contrast > 0.0 && spec.contrast <= 1.0) {
        return Err(invalid("contrast must lie in (0, 1]"));
    }
    let mut draws = StreamKey::new(spec.seed, 0x1a6e).draws();
    let d = spec.side * spec.side;
    let mut data = Vec::with_capacity(spec.count * d);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % SHAPE_CLASS_COUNT;
        labels.push(class);
        render_shape(class, spec.side, &mut draws, spec.noise, spec.contrast, &mut data);
    }
    Dataset::new(
        DataKind::Images {
            height: spec.side,
            width: spec.side,
        },
        Tensor::from_vec(vec![spec.count, d], data)?,
        labels,
        SHAPE_CLASS_COUNT,
    )
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader {
    bytes: Vec<u8>,
    pos: usize,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Ok(Self { bytes, pos: 0 })
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("file truncated while reading {what}"),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn take_bytes(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!(
                    "file truncated: {what} needs {} bytes past offset {}",
                    n, self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Reads a big-endian IDX image file (magic `0x00000803`) into `[n, rows*cols]`
/// with bytes rescaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<(Tensor, usize, usize)> {
    let mut r = IdxReader::open(path)?;
    let magic = r.take_u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.take_u32("image count")? as usize;
    let rows = r.take_u32("row count")? as usize;
    let cols = r.take_u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            offset: 8,
            message: "image dimensions must be positive".to_string(),
        });
    }
    let body = r.take_bytes(n * rows * cols, "pixel data")?;
    let data: Vec<f64> = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Tensor::from_vec(vec![n, rows * cols], data)?, rows, cols))
}

/// Reads a big-endian IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = IdxReader::open(path)?;
    let magic = r.take_u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.take_u32("label count")? as usize;
    let body = r.take_bytes(n, "label data")?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Pairs an IDX image file with an IDX label file.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (samples, rows, cols) = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if samples.shape()[0] != labels.len() {
        return Err(invalid(format!(
            "{} images but {} labels",
            samples.shape()[0],
            labels.len()
        )));
    }
    let class_count = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(
        DataKind::Images {
            height: rows,
            width: cols,
        },
        samples,
        labels,
        class_count,
    )
}

/// Writes images as IDX, quantizing values to bytes via `round(v * 255)`.
pub fn write_idx_images(path: &Path, samples: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if samples.ndim() != 2 || samples.shape()[1] != rows * cols {
        return Err(invalid("samples must be [n, rows*cols]"));
    }
    let n = samples.shape()[0];
    let mut bytes = Vec::with_capacity(16 + n * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in samples.data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(invalid(format!("label {bad} does not fit in one byte")));
    }
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Snapshot format: manifest.json + raw little-endian f64 payload
// ---------------------------------------------------------------------------

const DATASET_FORMAT: &str = "dataset";
const DATASET_VERSION: u32 = 1;
const PAYLOAD_NAME: &str = "samples.f64le";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    kind: DataKind,
    class_count: usize,
    count: usize,
    sample_dim: usize,
    payload: String,
    labels: Vec<usize>,
}

/// Saves a dataset under `dir` as `manifest.json` plus a raw payload.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        kind: ds.kind,
        class_count: ds.class_count,
        count: ds.len(),
        sample_dim: ds.sample_dim(),
        payload: PAYLOAD_NAME.to_string(),
        labels: ds.labels.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut bytes = Vec::with_capacity(ds.samples.len() * 8);
    for &v in ds.samples.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(PAYLOAD_NAME), bytes)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected format '{DATASET_FORMAT}', found '{}'", manifest.format),
        });
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported dataset version {}", manifest.version),
        });
    }
    let bytes = std::fs::read(dir.join(&manifest.payload))?;
    let expected = manifest.count * manifest.sample_dim * 8;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected) as u64,
            message: format!("payload holds {} bytes, manifest implies {expected}", bytes.len()),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Dataset::new(
        manifest.kind,
        Tensor::from_vec(vec![manifest.count, manifest.sample_dim], data)?,
        manifest.labels,
        manifest.class_count,
    )
}
