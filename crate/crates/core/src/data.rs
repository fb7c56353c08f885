//! Toy datasets: quantized eight Gaussians and a small character corpus.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::math;
use crate::numerics::CategoricalBatch;
use crate::{Error, Result};

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 3.0;
pub const EIGHT_GAUSSIANS_SIGMA: f64 = 0.3;
/// Default quantization range; with 8 bins the bin centres fall on integers.
pub const DEFAULT_RANGE: (f64, f64) = (-4.5, 3.5);

/// Character alphabet: space, then `a..=z`.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz";

/// Phrases repeated to fill each corpus line.
pub const DEFAULT_PATTERNS: &[&str] = &[
    "the cat sat on the mat ",
    "a dog ran far ",
    "hello world ",
    "sunny day ",
    "green tea ",
    "quick brown fox ",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    EightGaussians,
    CharCorpus,
    /// Data read from a file elsewhere; only its shape (`classes`, `length`) is recorded.
    External,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::EightGaussians => "eight-gaussians",
            Self::CharCorpus => "char-corpus",
            Self::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eight-gaussians" | "eight_gaussians" => Ok(Self::EightGaussians),
            "char-corpus" | "char_corpus" => Ok(Self::CharCorpus),
            "external" => Ok(Self::External),
            _ => Err(Error::invalid(alloc::format!("unknown dataset kind '{s}'"))),
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    pub kind: DatasetKind,
    /// Classes per dimension.
    pub classes: usize,
    /// Line length for the corpus; eight Gaussians is always 2-D.
    pub length: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub range: (f64, f64),
    pub seed: u64,
}

impl ToyDatasetSpec {
    pub fn eight_gaussians(classes: usize, n_train: usize, n_val: usize, seed: u64) -> Self {
        Self { kind: DatasetKind::EightGaussians, classes, length: 2, n_train, n_val, range: DEFAULT_RANGE, seed }
    }

    pub fn char_corpus(length: usize, n_train: usize, n_val: usize, seed: u64) -> Self {
        Self { kind: DatasetKind::CharCorpus, classes: ALPHABET.len(), length, n_train, n_val, range: DEFAULT_RANGE, seed }
    }

    /// Shape-only spec for data that comes from a file.
    pub fn external(classes: usize, dims: usize) -> Self {
        Self { kind: DatasetKind::External, classes, length: dims, n_train: 1, n_val: 0, range: DEFAULT_RANGE, seed: 0 }
    }

    pub fn dims(&self) -> usize {
        match self.kind {
            DatasetKind::EightGaussians => 2,
            DatasetKind::CharCorpus | DatasetKind::External => self.length,
        }
    }

    /// `(train, validation)`; a pure function of the spec.
    pub fn generate(&self) -> Result<(CategoricalBatch, CategoricalBatch)> {
        let mut rng = crate::rng_from_seed(self.seed);
        let make = |n: usize, rng: &mut crate::Rng| match self.kind {
            DatasetKind::EightGaussians => eight_gaussians(n, self.classes, self.range, rng),
            DatasetKind::CharCorpus => {
                if self.classes != ALPHABET.len() {
                    return Err(Error::invalid("the character corpus uses exactly 27 classes"));
                }
                char_corpus(DEFAULT_PATTERNS, self.length, n, rng)
            }
            DatasetKind::External => Err(Error::invalid("an external dataset has to be read from its file")),
        };
        let train = make(self.n_train, &mut rng)?;
        let val = make(self.n_val, &mut rng)?;
        Ok((train, val))
    }
}

/// Bin index of `x` among `classes` equal bins over `range`, clamped at the edges.
pub fn quantize(x: f64, classes: usize, range: (f64, f64)) -> usize {
    let u = (x - range.0) / (range.1 - range.0) * classes as f64;
    if !(u > 0.0) {
        return 0;
    }
    (math::floor(u) as usize).min(classes - 1)
}

/// Quantized mixture of eight Gaussians on a circle, `D = 2`.
pub fn eight_gaussians(n: usize, classes: usize, range: (f64, f64), rng: &mut crate::Rng) -> Result<CategoricalBatch> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !(range.0 < range.1) || !range.0.is_finite() || !range.1.is_finite() {
        return Err(Error::invalid("quantization range must be finite and increasing"));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let k = rng.gen_range(0..8);
        let angle = 2.0 * math::PI * k as f64 / 8.0;
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        let x = EIGHT_GAUSSIANS_RADIUS * math::cos(angle) + EIGHT_GAUSSIANS_SIGMA * ex;
        let y = EIGHT_GAUSSIANS_RADIUS * math::sin(angle) + EIGHT_GAUSSIANS_SIGMA * ey;
        data.push(quantize(x, classes, range));
        data.push(quantize(y, classes, range));
    }
    CategoricalBatch::new(n, 2, classes, data)
}

pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            ALPHABET
                .find(c)
                .ok_or_else(|| Error::invalid(alloc::format!("character {c:?} is outside the alphabet")))
        })
        .collect()
}

pub fn decode_text(indices: &[usize]) -> String {
    indices.iter().map(|&i| ALPHABET.as_bytes().get(i).map_or('?', |&b| b as char)).collect()
}

/// Lines of `length` characters, each a randomly chosen pattern repeated
/// from a random starting offset.
pub fn char_corpus(patterns: &[&str], length: usize, n: usize, rng: &mut crate::Rng) -> Result<CategoricalBatch> {
    if patterns.is_empty() || length == 0 {
        return Err(Error::invalid("need at least one pattern and a positive length"));
    }
    let encoded: Vec<Vec<usize>> = patterns.iter().map(|p| encode_text(p)).collect::<Result<_>>()?;
    if encoded.iter().any(Vec::is_empty) {
        return Err(Error::invalid("patterns must be non-empty"));
    }
    let mut data = Vec::with_capacity(n * length);
    for _ in 0..n {
        let p = &encoded[rng.gen_range(0..encoded.len())];
        let offset = rng.gen_range(0..p.len());
        data.extend((0..length).map(|i| p[(offset + i) % p.len()]));
    }
    CategoricalBatch::new(n, length, ALPHABET.len(), data)
}

/// Each position is replaced, with probability `rate`, by a uniform draw
/// over the other `K - 1` classes.
pub fn corrupt(x: &CategoricalBatch, rate: f64, rng: &mut crate::Rng) -> Result<CategoricalBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("corruption rate must lie in [0, 1]"));
    }
    let k = x.classes();
    let data = x
        .as_slice()
        .iter()
        .map(|&v| {
            if rng.gen::<f64>() < rate {
                let r = rng.gen_range(0..k - 1);
                if r >= v {
                    r + 1
                } else {
                    r
                }
            } else {
                v
            }
        })
        .collect();
    CategoricalBatch::new(x.batch(), x.dims(), k, data)
}

/// Normalized histogram of a 2-D batch, row-major `[x0 * K + x1]`.
pub fn empirical_pmf(x: &CategoricalBatch) -> Result<Vec<f64>> {
    if x.dims() != 2 {
        return Err(Error::shape("empirical_pmf", "needs D = 2"));
    }
    let k = x.classes();
    let mut pmf = vec![0.0; k * k];
    for row in x.rows() {
        pmf[row[0] * k + row[1]] += 1.0;
    }
    let n = x.batch().max(1) as f64;
    pmf.iter_mut().for_each(|p| *p /= n);
    Ok(pmf)
}

/// Total-variation distance `0.5 * sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("tv_distance", "pmfs differ in size"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn eight_gaussians_has_eight_modes() {
        let x = eight_gaussians(50_000, 8, DEFAULT_RANGE, &mut rng_from_seed(1)).unwrap();
        assert!(x.as_slice().iter().all(|&v| v < 8));
        let pmf = empirical_pmf(&x).unwrap();
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Mode centres (3cos, 3sin) rounded to the nearest integer bin centre.
        let mut modes = 0;
        for k in 0..8 {
            let a = 2.0 * core::f64::consts::PI * k as f64 / 8.0;
            let bx = quantize(3.0 * a.cos(), 8, DEFAULT_RANGE);
            let by = quantize(3.0 * a.sin(), 8, DEFAULT_RANGE);
            assert!(pmf[bx * 8 + by] > 0.05, "mode {k}: {}", pmf[bx * 8 + by]);
            modes += 1;
        }
        assert_eq!(modes, 8);
        let again = eight_gaussians(50_000, 8, DEFAULT_RANGE, &mut rng_from_seed(1)).unwrap();
        assert_eq!(x, again);
    }

    #[test]
    fn quantize_clamps() {
        assert_eq!(quantize(-100.0, 8, DEFAULT_RANGE), 0);
        assert_eq!(quantize(100.0, 8, DEFAULT_RANGE), 7);
        assert_eq!(quantize(f64::NAN, 8, DEFAULT_RANGE), 0);
        assert_eq!(quantize(0.0, 8, DEFAULT_RANGE), 4);
        assert_eq!(quantize(-0.51, 8, DEFAULT_RANGE), 3);
    }

    #[test]
    fn corpus_respects_alphabet_and_seed() {
        let x = char_corpus(DEFAULT_PATTERNS, 16, 100, &mut rng_from_seed(2)).unwrap();
        assert!(x.as_slice().iter().all(|&v| v < 27));
        let y = char_corpus(DEFAULT_PATTERNS, 16, 100, &mut rng_from_seed(2)).unwrap();
        assert_eq!(x, y);
        let line = decode_text(x.row(0));
        assert_eq!(encode_text(&line).unwrap(), x.row(0));
        assert!(char_corpus(&["Hi"], 4, 1, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn corruption_rates() {
        let x = char_corpus(DEFAULT_PATTERNS, 20, 500, &mut rng_from_seed(3)).unwrap();
        let mut rng = rng_from_seed(4);
        assert_eq!(corrupt(&x, 0.0, &mut rng).unwrap(), x);
        let all = corrupt(&x, 1.0, &mut rng).unwrap();
        assert!(all.as_slice().iter().zip(x.as_slice()).all(|(a, b)| a != b && *a < 27));
        let rate = 0.1;
        let some = corrupt(&x, rate, &mut rng).unwrap();
        let n = x.as_slice().len() as f64;
        let flips = some.as_slice().iter().zip(x.as_slice()).filter(|(a, b)| a != b).count() as f64;
        let sd = (rate * (1.0 - rate) / n).sqrt();
        assert!((flips / n - rate).abs() < 3.0 * sd);
        assert!(corrupt(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn spec_generation_is_pure() {
        let spec = ToyDatasetSpec::eight_gaussians(8, 100, 50, 9);
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
        let (tr, va) = ToyDatasetSpec::char_corpus(12, 10, 5, 9).generate().unwrap();
        assert_eq!((tr.batch(), va.batch(), tr.dims()), (10, 5, 12));
    }

    #[test]
    fn tv_distance_bounds() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    }
}
