//! IDX tensors, datasets and input standardization.
//!
//! The bundled sample holds 1000 MNIST training digits (100 per class, labels
//! cycling 0..9), stored as gzipped IDX files.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Objective;
use crate::numeric::{Matrix, Rng};

const SAMPLE_IMAGES: &[u8] = include_bytes!("../data/mnist-1k-images-idx3-ubyte.gz");
const SAMPLE_LABELS: &[u8] = include_bytes!("../data/mnist-1k-labels-idx1-ubyte.gz");

pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    pub fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

/// A decoded IDX tensor. Values are kept as stored (bytes stay in 0..=255);
/// scaling is left to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxTensor {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.starts_with(&[0x1f, 0x8b])
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| parse_err(0, format!("gzip: {e}")))?;
    Ok(out)
}

/// Reads only the magic and dimension sizes. Gzipped input is decompressed
/// just far enough to cover the header.
pub fn parse_idx_header(bytes: &[u8]) -> Result<IdxHeader> {
    if is_gzip(bytes) {
        let mut prefix = Vec::new();
        GzDecoder::new(bytes)
            .take(4 + 4 * 255)
            .read_to_end(&mut prefix)
            .map_err(|e| parse_err(0, format!("gzip: {e}")))?;
        return header(&prefix);
    }
    header(bytes)
}

fn header(bytes: &[u8]) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    let dtype = IdxType::from_code(bytes[2]).ok_or_else(|| parse_err(2, format!("unsupported type code 0x{:02x}", bytes[2])))?;
    let rank = bytes[3] as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let b = bytes.get(at..at + 4).ok_or_else(|| parse_err(bytes.len(), format!("truncated size of dimension {i}")))?;
        dims.push(u32::from_be_bytes(b.try_into().unwrap()) as usize);
    }
    Ok(IdxHeader { dtype, dims })
}

/// Decodes an IDX byte string, gzipped or not. Error offsets count bytes of
/// the decompressed stream.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if is_gzip(bytes) {
        return parse_raw(&gunzip(bytes)?);
    }
    parse_raw(bytes)
}

fn parse_raw(bytes: &[u8]) -> Result<IdxTensor> {
    let h = header(bytes)?;
    let start = h.byte_len();
    let count = h
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "dimension product overflows"))?;
    let size = h.dtype.size();
    let payload = &bytes[start..];
    let need = count.checked_mul(size).ok_or_else(|| parse_err(4, "payload size overflows"))?;
    if payload.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes present", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(parse_err(start + need, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(size)
        .map(|c| match h.dtype {
            IdxType::U8 => c[0] as f64,
            IdxType::I8 => c[0] as i8 as f64,
            IdxType::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
            IdxType::I32 => i32::from_be_bytes(c.try_into().unwrap()) as f64,
            IdxType::F32 => f32::from_be_bytes(c.try_into().unwrap()) as f64,
            IdxType::F64 => f64::from_be_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok(IdxTensor { dtype: h.dtype, dims: h.dims, data })
}

/// Encodes a tensor as uncompressed IDX. Values must be representable in the
/// tensor's type.
pub fn encode_idx(t: &IdxTensor) -> Result<Vec<u8>> {
    if t.dims.len() > 255 {
        return Err(Error::invalid("IDX rank is limited to 255"));
    }
    if t.dims.iter().product::<usize>() != t.data.len() {
        return Err(Error::invalid("tensor data does not match its dimensions"));
    }
    let mut out = vec![0, 0, t.dtype.code(), t.dims.len() as u8];
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX dimension exceeds u32"))?;
        out.extend(d.to_be_bytes());
    }
    for &x in &t.data {
        let exact = |lo: f64, hi: f64| x.fract() == 0.0 && (lo..=hi).contains(&x);
        let ok = match t.dtype {
            IdxType::U8 => exact(0.0, 255.0),
            IdxType::I8 => exact(-128.0, 127.0),
            IdxType::I16 => exact(i16::MIN as f64, i16::MAX as f64),
            IdxType::I32 => exact(i32::MIN as f64, i32::MAX as f64),
            IdxType::F32 => x.is_nan() || (x as f32) as f64 == x,
            IdxType::F64 => true,
        };
        if !ok {
            return Err(Error::invalid(format!("{x} is not representable as {:?}", t.dtype)));
        }
        match t.dtype {
            IdxType::U8 => out.push(x as u8),
            IdxType::I8 => out.push(x as i8 as u8),
            IdxType::I16 => out.extend((x as i16).to_be_bytes()),
            IdxType::I32 => out.extend((x as i32).to_be_bytes()),
            IdxType::F32 => out.extend((x as f32).to_be_bytes()),
            IdxType::F64 => out.extend(x.to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Per-dimension `(mean, std)` fitted on one set and applicable to others.
/// Constant dimensions carry std 1, so they map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const CONSTANT_STD: f64 = 1e-12;

impl Normalization {
    /// Population statistics of the columns of `x`.
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::invalid("normalization needs at least two examples"));
        }
        let n = x.rows() as f64;
        let mut mean = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > CONSTANT_STD { sd } else { 1.0 }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "normalization",
                expected: self.mean.len(),
                found: x.cols(),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * x.cols());
        for i in 0..x.rows() {
            data.extend(x.row(i).iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| {
                let y = (v - m) / s;
                if y == 0.0 { 0.0 } else { y }
            }));
        }
        Matrix::from_vec(x.rows(), x.cols(), data)
    }
}

/// Examples as rows of `inputs` and `targets`. Classification sets carry
/// integer labels and one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Matrix,
    labels: Option<Vec<usize>>,
    normalization: Option<Normalization>,
    objective: Objective,
}

impl Dataset {
    pub fn classification(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classification needs at least two classes"));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                context: "labels",
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let mut t = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            t[i * classes + l] = 1.0;
        }
        let targets = Matrix::from_vec(labels.len(), classes, t)?;
        Ok(Dataset { inputs, targets, labels: Some(labels), normalization: None, objective: Objective::CrossEntropy })
    }

    pub fn reconstruction(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if targets.rows() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                context: "reconstruction targets",
                expected: inputs.rows(),
                found: targets.rows(),
            });
        }
        Ok(Dataset { inputs, targets, labels: None, normalization: None, objective: Objective::MeanSquaredError })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    /// The first `n` examples (all of them if `n` exceeds the size).
    pub fn truncate(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let head = |m: &Matrix| Matrix::from_vec(n, m.cols(), m.as_slice()[..n * m.cols()].to_vec());
        Ok(Dataset {
            inputs: head(&self.inputs)?,
            targets: head(&self.targets)?,
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            normalization: self.normalization.clone(),
            objective: self.objective,
        })
    }

    /// Standardizes every input dimension with statistics fitted on this set.
    pub fn normalize(&self) -> Result<Self> {
        let norm = Normalization::fit(&self.inputs)?;
        self.normalize_with(norm)
    }

    /// Applies an existing transform, e.g. one fitted on a training split.
    pub fn normalize_with(&self, norm: Normalization) -> Result<Self> {
        Ok(Dataset { inputs: norm.apply(&self.inputs)?, normalization: Some(norm), ..self.clone() })
    }
}

pub fn normalize(dataset: &Dataset) -> Result<Dataset> {
    dataset.normalize()
}

/// Balanced Gaussian clusters: class `c` is centred at `separation · u_c`
/// with `u_c` a random direction of roughly unit length, plus `N(0, I)`
/// noise.
pub fn synthetic_classification(
    n_examples: usize,
    dims: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dims == 0 || n_examples == 0 {
        return Err(Error::invalid("synthetic data needs classes >= 2, dims >= 1 and examples >= 1"));
    }
    let root = Rng::new(seed);
    let mut centre_rng = root.child_named("centres");
    let scale = separation / (dims as f64).sqrt();
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| centre_rng.normal_vec(dims).into_iter().map(|x| x * scale).collect())
        .collect();
    let mut labels: Vec<usize> = (0..n_examples).map(|i| i % classes).collect();
    root.child_named("order").shuffle(&mut labels);
    let mut noise = root.child_named("noise");
    let mut data = Vec::with_capacity(n_examples * dims);
    for &l in &labels {
        data.extend(centres[l].iter().map(|&c| c + noise.standard_normal()));
    }
    Dataset::classification(Matrix::from_vec(n_examples, dims, data)?, labels, classes)
}

fn mnist_images(t: IdxTensor) -> Result<Matrix> {
    if t.dtype != IdxType::U8 || t.dims.len() != 3 {
        return Err(Error::invalid(format!("expected a u8 rank-3 image tensor, found {:?} with dims {:?}", t.dtype, t.dims)));
    }
    let (n, pixels) = (t.dims[0], t.dims[1] * t.dims[2]);
    Matrix::from_vec(n, pixels, t.data.into_iter().map(|v| v / 255.0).collect())
}

fn mnist_labels(t: IdxTensor) -> Result<Vec<usize>> {
    if t.dtype != IdxType::U8 || t.dims.len() != 1 {
        return Err(Error::invalid(format!("expected a u8 rank-1 label tensor, found {:?} with dims {:?}", t.dtype, t.dims)));
    }
    Ok(t.data.into_iter().map(|v| v as usize).collect())
}

fn mnist_from(images: IdxTensor, labels: IdxTensor, limit: Option<usize>, autoencoder: bool) -> Result<Dataset> {
    let x = mnist_images(images)?;
    let y = mnist_labels(labels)?;
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch { context: "MNIST labels", expected: x.rows(), found: y.len() });
    }
    let d = if autoencoder {
        Dataset::reconstruction(x.clone(), x)?
    } else {
        Dataset::classification(x, y, MNIST_CLASSES)?
    };
    match limit {
        Some(n) => d.truncate(n),
        None => Ok(d),
    }
}

/// MNIST images (pixels scaled to [0, 1], not yet standardized) with labels.
/// With `autoencoder` set, the targets are the scaled pixels themselves.
pub fn load_mnist(images: &Path, labels: &Path, limit: Option<usize>, autoencoder: bool) -> Result<Dataset> {
    mnist_from(read_idx_file(images)?, read_idx_file(labels)?, limit, autoencoder)
}

/// The bundled 1000-digit MNIST sample, in the same form as [`load_mnist`].
pub fn mnist_sample(limit: Option<usize>, autoencoder: bool) -> Result<Dataset> {
    mnist_from(parse_idx(SAMPLE_IMAGES)?, parse_idx(SAMPLE_LABELS)?, limit, autoencoder)
}

/// Writes a gzip-free IDX file; test and fixture helper.
pub fn write_idx_file(path: &Path, t: &IdxTensor) -> Result<()> {
    let bytes = encode_idx(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
