//! Log-space primitives shared by every model in the crate.
//!
//! Probabilities of zero are represented by `ln(1e-40)` ([`LOG_ZERO`]) rather
//! than `-inf`, so sums, differences and products of log-probabilities never
//! produce NaN. The extreme values are filtered out by later `log_sum_exp`
//! calls.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::math;
use crate::{Error, Result};

/// The clamp used in place of a zero probability.
pub const ZERO_CLAMP: f64 = 1e-40;

/// `ln(1e-40)`, the log-space sentinel for a zero probability.
pub const LOG_ZERO: f64 = -92.103_403_719_761_84;

/// Lower bound on uniform noise drawn for Gumbel sampling.
pub const UNIFORM_EPS: f64 = 1e-10;

/// `log(e^a + e^b)` via the max-shift trick.
///
/// Symmetric in its arguments bit for bit, and exact when one side is `-inf`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + math::ln_1p(math::exp(lo - hi))
}

/// `log sum_k e^{x_k}`, max-shifted. Returns `-inf` for an empty slice.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = x.iter().map(|&v| math::exp(v - max)).sum();
    max + math::ln(s)
}

/// `log(1 - e^a + 1e-40)` for `a <= 0`.
///
/// `a = 0` yields `ln(1e-40)`, never NaN.
#[inline]
pub fn log_1_min_a(a: f64) -> f64 {
    math::ln(-math::expm1(a) + ZERO_CLAMP)
}

/// Argmax with ties resolved towards the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Integer class indices, shape `(batch, dims)`, values in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CategoricalBatch {
    batch: usize,
    dims: usize,
    classes: usize,
    data: Vec<usize>,
}

impl CategoricalBatch {
    pub fn new(batch: usize, dims: usize, classes: usize, data: Vec<usize>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("a categorical batch needs at least one class"));
        }
        if data.len() != batch * dims {
            return Err(Error::shape(
                "CategoricalBatch::new",
                alloc::format!("{} values for shape ({batch}, {dims})", data.len()),
            ));
        }
        if let Some(&index) = data.iter().find(|&&v| v >= classes) {
            return Err(Error::IndexOutOfRange { index, classes });
        }
        Ok(Self { batch, dims, classes, data })
    }

    /// Build from rows of equal length.
    pub fn from_rows(rows: &[Vec<usize>], classes: usize) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::shape("CategoricalBatch::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), dims, classes, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.data
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.data[b * self.dims..(b + 1) * self.dims]
    }

    pub fn get(&self, b: usize, d: usize) -> usize {
        self.data[b * self.dims + d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.data.chunks(self.dims.max(1)).take(self.batch)
    }

    /// Rows `start..end` as a new batch.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            batch: end - start,
            dims: self.dims,
            classes: self.classes,
            data: self.data[start * self.dims..end * self.dims].to_vec(),
        }
    }

    /// Pick rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dims);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { batch: idx.len(), dims: self.dims, classes: self.classes, data }
    }

    /// One-hot rows of width `dims * classes`, in linear space.
    pub fn one_hot(&self) -> Vec<f64> {
        let k = self.classes;
        let mut out = vec![0.0; self.data.len() * k];
        for (i, &c) in self.data.iter().enumerate() {
            out[i * k + c] = 1.0;
        }
        out
    }
}

/// Log-probability vectors over the last axis, shape `(batch, dims, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbTensor {
    batch: usize,
    dims: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogProbTensor {
    pub fn new(batch: usize, dims: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * dims * classes {
            return Err(Error::shape(
                "LogProbTensor::new",
                alloc::format!("{} values for shape ({batch}, {dims}, {classes})", data.len()),
            ));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("log-probability tensor contains NaN"));
        }
        Ok(Self { batch, dims, classes, data })
    }

    /// Uniform `log(1/K)` everywhere.
    pub fn uniform(batch: usize, dims: usize, classes: usize) -> Self {
        let v = -math::ln(classes as f64);
        Self { batch, dims, classes, data: vec![v; batch * dims * classes] }
    }

    /// Row-wise `log_softmax` of raw logits with the same layout.
    pub fn from_logits(batch: usize, dims: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != batch * dims * classes {
            return Err(Error::shape("LogProbTensor::from_logits", "logit count"));
        }
        let mut data = logits.to_vec();
        for row in data.chunks_mut(classes) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Self::new(batch, dims, classes, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The class vector at `(b, d)`.
    pub fn row(&self, b: usize, d: usize) -> &[f64] {
        let start = (b * self.dims + d) * self.classes;
        &self.data[start..start + self.classes]
    }

    /// Class vectors in `(batch, dims)` order.
    pub fn class_rows(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    /// Apply `f` to every class vector, producing a tensor of the same shape.
    pub fn map_rows(&self, mut f: impl FnMut(usize, &[f64], &mut [f64])) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for (i, (src, dst)) in self
            .data
            .chunks_exact(self.classes)
            .zip(data.chunks_exact_mut(self.classes))
            .enumerate()
        {
            f(i, src, dst);
        }
        Self { data, ..*self }
    }

    /// `log_sum_exp` over the class axis, one value per `(batch, dim)`.
    pub fn log_sum_exp(&self) -> Vec<f64> {
        self.class_rows().map(log_sum_exp).collect()
    }

    /// True when every class vector sums to one within `tol` in linear space.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.class_rows()
            .all(|row| (row.iter().map(|&v| math::exp(v)).sum::<f64>() - 1.0).abs() <= tol)
    }

    pub fn probs(&self) -> Vec<f64> {
        self.data.iter().map(|&v| math::exp(v)).collect()
    }

    pub(crate) fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch && self.dims == other.dims && self.classes == other.classes
    }
}

/// Log one-hot encoding with zeros clamped to `1e-40` before the log.
pub fn index_to_log_onehot(x: &CategoricalBatch) -> LogProbTensor {
    let k = x.classes;
    let mut data = vec![LOG_ZERO; x.data.len() * k];
    for (i, &c) in x.data.iter().enumerate() {
        data[i * k + c] = 0.0;
    }
    LogProbTensor { batch: x.batch, dims: x.dims, classes: k, data }
}

/// Checked variant for raw indices, rejecting values outside `[0, classes)`.
pub fn index_to_log_onehot_checked(
    batch: usize,
    dims: usize,
    classes: usize,
    indices: &[usize],
) -> Result<LogProbTensor> {
    let x = CategoricalBatch::new(batch, dims, classes, indices.to_vec())?;
    Ok(index_to_log_onehot(&x))
}

/// Argmax over the class axis, lowest index on ties.
pub fn log_onehot_to_index(log_x: &LogProbTensor) -> CategoricalBatch {
    let data = log_x.class_rows().map(argmax).collect();
    CategoricalBatch { batch: log_x.batch, dims: log_x.dims, classes: log_x.classes, data }
}

/// Per `(batch, dim)` KL divergence `sum_k e^{a_k} (a_k - b_k)`.
pub fn categorical_kl(log_a: &LogProbTensor, log_b: &LogProbTensor) -> Result<Vec<f64>> {
    if !log_a.same_shape(log_b) {
        return Err(Error::shape("categorical_kl", "operands differ in shape"));
    }
    Ok(log_a
        .class_rows()
        .zip(log_b.class_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(&a, &b)| math::exp(a) * (a - b)).sum())
        .collect())
}

/// Sum a per-`(batch, dim)` quantity over `dim`, one value per sample.
pub fn sum_over_dims(values: &[f64], dims: usize) -> Vec<f64> {
    values.chunks(dims.max(1)).map(|c| c.iter().sum()).collect()
}

/// A standard Gumbel draw using uniform noise in `(eps, 1 - eps)`.
pub fn standard_gumbel(rng: &mut crate::Rng) -> f64 {
    let u = uniform_open(rng);
    -math::ln(-math::ln(u))
}

/// Uniform draw in `(UNIFORM_EPS, 1 - UNIFORM_EPS)`.
pub fn uniform_open(rng: &mut crate::Rng) -> f64 {
    let u: f64 = rng.gen();
    UNIFORM_EPS + u * (1.0 - 2.0 * UNIFORM_EPS)
}

/// Draw one class per `(batch, dim)` by the Gumbel-max trick.
pub fn sample_categorical(log_p: &LogProbTensor, rng: &mut crate::Rng) -> CategoricalBatch {
    let mut perturbed = vec![0.0; log_p.classes];
    let data = log_p
        .class_rows()
        .map(|row| {
            for (dst, &lp) in perturbed.iter_mut().zip(row) {
                *dst = lp + standard_gumbel(rng);
            }
            argmax(&perturbed)
        })
        .collect();
    CategoricalBatch { batch: log_p.batch, dims: log_p.dims, classes: log_p.classes, data }
}
