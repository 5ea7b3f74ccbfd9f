//! Binary tensor container, dataset loading, and synthetic dataset
//! generators for oracle-grade tests.
//!
//! Container layout (little-endian): magic `SNNT`, version u32 (= 1),
//! dtype u8 (0 = f32, 1 = f64, 2 = u8), ndim u8, ndim u64 dims, then the
//! row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Dtype> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Serialize a tensor. F32/U8 dtypes require the values to be exactly
/// representable (U8: integers in 0..=255), so a write/read roundtrip is
/// bit-exact.
pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let bytes = encode_tensor(tensor, dtype)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, Dtype)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn encode_tensor(tensor: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 + 4 + 2 + 8 * tensor.ndim() + tensor.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    if tensor.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("too many dimensions: {}", tensor.ndim())));
    }
    out.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        match dtype {
            Dtype::F32 => {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Format(format!("value {v} is not exactly representable as f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::U8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::Format(format!("value {v} does not fit dtype u8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 10 {
        return Err(Error::Format("container shorter than header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dtype = Dtype::from_code(bytes[8])?;
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("container truncated inside dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 10 + 8 * i;
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    let expected = header + count * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length {} does not match dims {:?} ({} bytes expected)",
            bytes.len() - header,
            shape,
            expected - header
        )));
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

// -------------------------------------------------------------- dataset

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Static,
    Event,
}

/// In-memory dataset: static samples (N, F) / (N, C, H, W) or event-frame
/// sequences (N, T_raw, C, H, W), with optional integer class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub kind: DatasetKind,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>, kind: DatasetKind) -> Result<Dataset> {
        let ds = Dataset { inputs, labels, kind };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Static => {
                if !(self.inputs.ndim() == 2 || self.inputs.ndim() == 4) {
                    return Err(Error::Invalid(format!(
                        "static dataset inputs must be (N, F) or (N, C, H, W), got {:?}",
                        self.inputs.shape()
                    )));
                }
            }
            DatasetKind::Event => {
                if self.inputs.ndim() != 5 || self.inputs.shape()[1] < 1 {
                    return Err(Error::Invalid(format!(
                        "event dataset inputs must be (N, T, C, H, W), got {:?}",
                        self.inputs.shape()
                    )));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Invalid(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample shape (without the leading N).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Copy of sample `i` with the leading axis removed.
    pub fn sample(&self, i: usize) -> Tensor {
        let inner: usize = self.sample_shape().iter().product();
        let data = self.inputs.data()[i * inner..(i + 1) * inner].to_vec();
        Tensor::new(self.sample_shape().to_vec(), data).expect("consistent sample shape")
    }

    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Raw timestep count of an event dataset.
    pub fn raw_timesteps(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::Event => Some(self.inputs.shape()[1]),
            DatasetKind::Static => None,
        }
    }

    /// Load from container files; labels must hold integer class ids.
    pub fn from_files(inputs: &Path, labels: Option<&Path>, kind: DatasetKind) -> Result<Dataset> {
        let (inputs, _) = read_tensor(inputs)?;
        let labels = match labels {
            Some(path) => {
                let (t, _) = read_tensor(path)?;
                let mut out = Vec::with_capacity(t.len());
                for &v in t.data() {
                    if v.fract() != 0.0 || v < 0.0 {
                        return Err(Error::Format(format!("label {v} is not a class id")));
                    }
                    out.push(v as usize);
                }
                Some(out)
            }
            None => None,
        };
        Dataset::new(inputs, labels, kind)
    }
}

/// Uniformly subsample an event sequence down to `timesteps` frames,
/// taking the center-strided frames; T = 1 picks the middle frame.
pub fn load_event_sequence(dataset: &Dataset, index: usize, timesteps: usize) -> Result<Vec<Tensor>> {
    let t_raw = dataset
        .raw_timesteps()
        .ok_or_else(|| Error::Invalid("event sequence requested from a static dataset".into()))?;
    if t_raw < timesteps {
        return Err(Error::Invalid(format!(
            "event sequence has {t_raw} raw frames, requested {timesteps}"
        )));
    }
    let sample = dataset.sample(index); // (T_raw, C, H, W)
    let frame_shape: Vec<usize> = sample.shape()[1..].to_vec();
    let inner: usize = frame_shape.iter().product();
    let mut frames = Vec::with_capacity(timesteps);
    for i in 0..timesteps {
        let src = (((i as f64 + 0.5) * t_raw as f64 / timesteps as f64).floor() as usize).min(t_raw - 1);
        let data = sample.data()[src * inner..(src + 1) * inner].to_vec();
        frames.push(Tensor::new(frame_shape.clone(), data)?);
    }
    Ok(frames)
}

/// Deterministic shuffled split into (train, held-out) index sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::substream(seed, &[0x5011]).shuffle(&mut idx);
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(cut);
    (idx, test)
}

// ---------------------------------------------------------- checkpoints

/// Save named parameters as one container file per tensor plus a manifest
/// (`manifest.tsv`: name, filename, one pair per line).
pub fn save_params(dir: &Path, params: &crate::network::Parameters) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (name, tensor)) in params.values().iter().enumerate() {
        let file = format!("t{i:04}.snnt");
        write_tensor(&dir.join(&file), tensor, Dtype::F64)?;
        manifest.push_str(&format!("{name}\t{file}\n"));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<crate::network::Parameters> {
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut values = crate::tape::ParamMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let (name, file) = match (parts.next(), parts.next()) {
            (Some(n), Some(f)) => (n, f),
            _ => {
                return Err(Error::Format(format!(
                    "manifest line {} is not `name<TAB>file`",
                    lineno + 1
                )))
            }
        };
        let (tensor, _) = read_tensor(&dir.join(file))?;
        values.insert(name.to_string(), tensor);
    }
    if values.is_empty() {
        return Err(Error::Format("checkpoint manifest holds no tensors".into()));
    }
    Ok(crate::network::Parameters::from_map(values))
}

// ----------------------------------------------------------- synthetics

/// Gaussian class clusters with means on the unit sphere: a desk-scale
/// stand-in for an image corpus. Samples are ordered class-major.
pub fn synth_clusters(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::Invalid(format!(
            "cluster dataset needs >= 2 classes and >= 2 dims, got {n_classes} and {dim}"
        )));
    }
    let mut means = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut rng = Rng::substream(seed, &[0xc1a5, c as u64]);
        let raw: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means.push(raw.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for j in 0..n_per_class {
            let mut rng = Rng::substream(seed, &[0x5a31, c as u64, j as u64]);
            for d in 0..dim {
                data.push(means[c][d] + spread * rng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, Some(labels), DatasetKind::Static)
}

/// Labeled synthetic images: each class is an oriented sinusoidal grating
/// with a random per-sample phase, plus pixel noise. Classes differ by
/// orientation (and cycle count), so class identity is phase-invariant
/// structure rather than raw pixel values.
pub fn synth_images(
    n_per_class: usize,
    n_classes: usize,
    height: usize,
    width: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || height < 4 || width < 4 {
        return Err(Error::Invalid(
            "image dataset needs >= 2 classes and at least 4x4 images".into(),
        ));
    }
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * height * width);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        let angle = std::f64::consts::PI * c as f64 / n_classes as f64;
        let cycles = 2.0 + (c % 3) as f64;
        let (dy, dx) = (angle.sin(), angle.cos());
        for j in 0..n_per_class {
            let mut rng = Rng::substream(seed, &[0x1a65, c as u64, j as u64]);
            let phase = rng.range(0.0, std::f64::consts::TAU);
            for y in 0..height {
                for x in 0..width {
                    let proj = (x as f64 * dx + y as f64 * dy) / width.max(height) as f64;
                    let v = 0.5
                        + 0.45 * (std::f64::consts::TAU * cycles * proj + phase).sin()
                        + noise * rng.normal();
                    data.push(v);
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 1, height, width], data)?,
        Some(labels),
        DatasetKind::Static,
    )
}

/// Labeled synthetic event sequences: oriented gratings whose phase
/// drifts frame to frame at a random per-sample rate. Class identity
/// (orientation and cycle count) is invariant to the drift, so temporal
/// alignment has real structure to exploit.
pub fn synth_event_images(
    n_per_class: usize,
    n_classes: usize,
    frames: usize,
    height: usize,
    width: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || height < 4 || width < 4 || frames < 1 {
        return Err(Error::Invalid(
            "event image dataset needs >= 2 classes, >= 1 frame, and at least 4x4 images".into(),
        ));
    }
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * frames * height * width);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        let angle = std::f64::consts::PI * c as f64 / n_classes as f64;
        let cycles = 2.0 + (c % 3) as f64;
        let (dy, dx) = (angle.sin(), angle.cos());
        for j in 0..n_per_class {
            let mut rng = Rng::substream(seed, &[0xe7e47, c as u64, j as u64]);
            let phase = rng.range(0.0, std::f64::consts::TAU);
            // random drift rate and direction, bounded away from zero
            let drift = rng.range(0.3, 1.0) * if rng.chance(0.5) { 1.0 } else { -1.0 };
            for k in 0..frames {
                let frame_phase = phase + drift * k as f64;
                for y in 0..height {
                    for x in 0..width {
                        let proj = (x as f64 * dx + y as f64 * dy) / width.max(height) as f64;
                        let v = 0.5
                            + 0.45 * (std::f64::consts::TAU * cycles * proj + frame_phase).sin()
                            + noise * rng.normal();
                        data.push(v);
                    }
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, frames, 1, height, width], data)?,
        Some(labels),
        DatasetKind::Event,
    )
}
