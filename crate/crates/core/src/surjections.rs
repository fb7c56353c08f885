//! The argmax surjection, its probabilistic right-inverses, dequantization
//! and base-`M` re-encoding of large alphabets.
//!
//! A posterior `q(v | x)` must only produce `v` with `argmax v = x` (the
//! argmax constraint); then `log p(v) - log q(v | x)` is a lower bound on
//! `log P(x)` with no extra likelihood term.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::math;
use crate::numerics::{argmax, log_sum_exp, uniform_open, CategoricalBatch};
use crate::{Error, Result};

/// Lower bound on `softplus(T - u)` in the threshold map; keeps `v < T`
/// strict in floating point.
pub const THRESHOLD_FLOOR: f64 = 1e-12;

/// Continuous lift `v` of a categorical batch, shape `(batch, dims, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousLatent {
    batch: usize,
    dims: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ContinuousLatent {
    pub fn new(batch: usize, dims: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * dims * classes {
            return Err(Error::shape("ContinuousLatent::new", "value count"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ContinuousLatent::new", context: String::from("v") });
        }
        Ok(Self { batch, dims, classes, data })
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

    pub fn row(&self, b: usize, d: usize) -> &[f64] {
        let s = (b * self.dims + d) * self.classes;
        &self.data[s..s + self.classes]
    }

    /// As a `(batch, dims * classes)` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.batch, self.dims * self.classes, self.data.clone()).expect("shape is consistent")
    }
}

/// `x_d = argmax_k v_dk`, lowest index on ties.
pub fn argmax_map(v: &ContinuousLatent) -> CategoricalBatch {
    let data = v.data.chunks_exact(v.classes).map(argmax).collect();
    CategoricalBatch::new(v.batch, v.dims, v.classes, data).expect("argmax is in range")
}

/// Map `u` below the threshold `T`: `v = T - softplus(T - u)`.
/// Returns `(v, log dv/du)` with `dv/du = sigmoid(T - u)`.
pub fn softplus_threshold(u: f64, t: f64) -> (f64, f64) {
    let v = t - math::softplus(t - u).max(THRESHOLD_FLOOR);
    (v, math::log_sigmoid(t - u))
}

/// Inverse of [`softplus_threshold`] for `v < T`: `u = T - log(e^{T - v} - 1)`.
pub fn softplus_threshold_inverse(v: f64, t: f64) -> f64 {
    let y = t - v;
    // softplus^{-1}(y) = y + log(1 - e^{-y})
    t - (y + math::ln(-math::expm1(-y)))
}

/// Thresholding posterior applied to one class vector: `v_x = u_x`, the other
/// entries pushed below `u_x`. Returns `v` and `sum log dv_i/du_i`.
pub fn threshold_transform(u: &[f64], x: usize) -> (Vec<f64>, f64) {
    let t = u[x];
    let mut log_det = 0.0;
    let v = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| {
            if i == x {
                ui
            } else {
                let (vi, ld) = softplus_threshold(ui, t);
                log_det += ld;
                vi
            }
        })
        .collect();
    (v, log_det)
}

/// Standard Gumbel location family helpers (scale 1).
pub mod gumbel {
    use super::*;

    /// `g = phi - log(-log u)`.
    pub fn sample(phi: f64, rng: &mut crate::Rng) -> f64 {
        phi - math::ln(-math::ln(uniform_open(rng)))
    }

    /// Gumbel(phi) truncated to `(-inf, T)`: `phi - log(e^{phi - T} - log u)`.
    pub fn sample_truncated(phi: f64, t: f64, rng: &mut crate::Rng) -> f64 {
        phi - math::ln(math::exp(phi - t) - math::ln(uniform_open(rng)))
    }

    pub fn log_pdf(v: f64, phi: f64) -> f64 {
        let z = v - phi;
        -z - math::exp(-z)
    }

    pub fn cdf(v: f64, phi: f64) -> f64 {
        math::exp(-math::exp(-(v - phi)))
    }

    /// Density of the truncated Gumbel for `v < T`: `Gumbel(v) / CDF(T)`.
    pub fn truncated_log_pdf(v: f64, phi: f64, t: f64) -> f64 {
        if v >= t {
            return f64::NEG_INFINITY;
        }
        log_pdf(v, phi) + math::exp(-(t - phi))
    }

    /// `P(G <= v | G < T)`.
    pub fn truncated_cdf(v: f64, phi: f64, t: f64) -> f64 {
        if v >= t {
            return 1.0;
        }
        math::exp(math::exp(-(t - phi)) - math::exp(-(v - phi)))
    }
}

/// Gumbel posterior on one class vector from exponential noise `c = -log u`:
/// `v_x = phi_max - log c_x`, `v_i = phi_i - log(e^{phi_i - v_x} + c_i)`.
pub fn gumbel_transform(phi: &[f64], x: usize, c: &[f64]) -> Vec<f64> {
    let t = log_sum_exp(phi) - math::ln(c[x]);
    phi.iter()
        .zip(c)
        .enumerate()
        .map(|(i, (&p, &ci))| if i == x { t } else { p - math::ln(math::exp(p - t) + ci) })
        .collect()
}

/// `log q(v | x)` of the Gumbel posterior, written as the explicit product
/// `Gumbel(v_x | phi_max) * prod_{i != x} TruncGumbel(v_i | phi_i, v_x)`.
pub fn gumbel_posterior_log_density(phi: &[f64], x: usize, v: &[f64]) -> f64 {
    let t = v[x];
    let mut lq = gumbel::log_pdf(t, log_sum_exp(phi));
    for (i, (&vi, &p)) in v.iter().zip(phi).enumerate() {
        if i != x {
            lq += gumbel::truncated_log_pdf(vi, p, t);
        }
    }
    lq
}

/// Draw from the Gumbel posterior for every `(b, d)`; returns `v` and
/// per-sample `log q(v | x)` summed over dimensions.
pub fn gumbel_posterior_sample(
    x: &CategoricalBatch,
    phi: &GumbelParams,
    rng: &mut crate::Rng,
) -> Result<(ContinuousLatent, Vec<f64>)> {
    phi.check(x)?;
    let k = x.classes();
    let mut data = Vec::with_capacity(x.batch() * x.dims() * k);
    let mut log_q = vec![0.0; x.batch()];
    let mut c = vec![0.0; k];
    for b in 0..x.batch() {
        for d in 0..x.dims() {
            c.iter_mut().for_each(|ci| *ci = -math::ln(uniform_open(rng)));
            let row = phi.row(d);
            let v = gumbel_transform(row, x.get(b, d), &c);
            log_q[b] += gumbel_posterior_log_density(row, x.get(b, d), &v);
            data.extend(v);
        }
    }
    let v = ContinuousLatent::new(x.batch(), x.dims(), k, data)?;
    check_support(&v, x)?;
    Ok((v, log_q))
}

/// Gumbel location parameters, one row of `K` per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelParams {
    dims: usize,
    classes: usize,
    phi: Vec<f64>,
}

impl GumbelParams {
    pub fn new(dims: usize, classes: usize, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != dims * classes {
            return Err(Error::shape("GumbelParams::new", "value count"));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "GumbelParams::new", context: String::from("phi") });
        }
        Ok(Self { dims, classes, phi })
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.phi[d * self.classes..(d + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phi
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims, self.classes, self.phi.clone()).expect("shape is consistent")
    }

    fn check(&self, x: &CategoricalBatch) -> Result<()> {
        if x.dims() != self.dims || x.classes() != self.classes {
            return Err(Error::shape("GumbelParams", "data does not match phi's (D, K)"));
        }
        Ok(())
    }
}

/// Laplace smoothing used by [`init_gumbel_locations`].
pub const LAPLACE_LAMBDA: f64 = 1.0;

/// `phi_dk = log(count_dk + lambda) - log(n + K lambda)` from the first minibatch,
/// so that `softmax(phi)` matches the smoothed empirical class frequencies.
pub fn init_gumbel_locations(first_batch: &CategoricalBatch, lambda: f64) -> Result<GumbelParams> {
    if first_batch.batch() == 0 {
        return Err(Error::invalid("cannot initialize Gumbel locations from an empty batch"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("Laplace smoothing must be positive"));
    }
    let (dims, k) = (first_batch.dims(), first_batch.classes());
    let mut counts = vec![0.0; dims * k];
    for row in first_batch.rows() {
        for (d, &c) in row.iter().enumerate() {
            counts[d * k + c] += 1.0;
        }
    }
    let denom = math::ln(first_batch.batch() as f64 + k as f64 * lambda);
    GumbelParams::new(dims, k, counts.iter().map(|&n| math::ln(n + lambda) - denom).collect())
}

/// Fail with [`Error::SupportViolation`] unless `argmax v = x` everywhere.
pub fn check_support(v: &ContinuousLatent, x: &CategoricalBatch) -> Result<()> {
    for (i, (row, &xi)) in v.data.chunks_exact(v.classes).zip(x.as_slice()).enumerate() {
        let got = argmax(row);
        if got != xi {
            return Err(Error::SupportViolation(alloc::format!(
                "sample {}, dimension {}: argmax {} but class {}",
                i / v.dims,
                i % v.dims,
                got,
                xi
            )));
        }
    }
    Ok(())
}

/// `floor(v)` recovers the one-hot vector for dequantized samples.
pub fn floor_map(v: &ContinuousLatent) -> Vec<f64> {
    v.data.iter().map(|&x| math::floor(x)).collect()
}

/// Uniform dequantization `v = onehot(x) + u`, `u ~ U(0, 1)^K`, `log q = 0`.
pub fn uniform_dequantize(x: &CategoricalBatch, rng: &mut crate::Rng) -> Result<(ContinuousLatent, Vec<f64>)> {
    let data = x.one_hot().into_iter().map(|o| o + uniform_open(rng)).collect();
    Ok((ContinuousLatent::new(x.batch(), x.dims(), x.classes(), data)?, vec![0.0; x.batch()]))
}

/// Which right-inverse of the argmax (or rounding) a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosteriorKind {
    /// Conditional Gaussian `u`, non-maximal entries softplus-thresholded.
    Softplus,
    /// Learned Gumbel locations with truncated-Gumbel non-maximal entries.
    Gumbel,
    /// Conditional Gaussian squashed to `(0, 1)` and pushed through the Gumbel inverse CDFs.
    GumbelThreshold,
    /// `onehot + U(0, 1)`.
    UniformDequant,
    /// `onehot + sigmoid(a)` with a conditional Gaussian `a`.
    VariationalDequant,
}

impl PosteriorKind {
    pub const ALL: [PosteriorKind; 5] = [
        PosteriorKind::Softplus,
        PosteriorKind::Gumbel,
        PosteriorKind::GumbelThreshold,
        PosteriorKind::UniformDequant,
        PosteriorKind::VariationalDequant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosteriorKind::Softplus => "softplus",
            PosteriorKind::Gumbel => "gumbel",
            PosteriorKind::GumbelThreshold => "gumbel-threshold",
            PosteriorKind::UniformDequant => "uniform-deq",
            PosteriorKind::VariationalDequant => "variational-deq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown posterior `{s}`")))
    }

    fn has_gaussian(self) -> bool {
        matches!(
            self,
            PosteriorKind::Softplus | PosteriorKind::GumbelThreshold | PosteriorKind::VariationalDequant
        )
    }

    fn has_phi(self) -> bool {
        matches!(self, PosteriorKind::Gumbel | PosteriorKind::GumbelThreshold)
    }
}

/// `-log(1 - 1e-10)`: smallest exponential noise `c = -log u` allowed.
const MIN_EXP_NOISE: f64 = 1.000_000_000_05e-10;

/// Trainable `q(v | x)`.
///
/// The Gaussian noise model is a per-`(dimension, class)` table: dimension
/// `d` with class `x_d` reads row `d * K + x_d` of a `(D*K, K)` mean and
/// log-std table.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    kind: PosteriorKind,
    dims: usize,
    classes: usize,
    mean: Option<ParamId>,
    log_std: Option<ParamId>,
    phi: Option<ParamId>,
}

/// A reparametrized posterior draw on a tape.
pub struct PosteriorSample {
    /// `(batch, dims * classes)`.
    pub v: Var,
    /// `(batch, 1)`, summed over dimensions.
    pub log_q: Var,
}

impl Posterior {
    pub fn new(kind: PosteriorKind, store: &mut ParamStore, dims: usize, classes: usize) -> Result<Self> {
        if dims == 0 || classes < 2 {
            return Err(Error::invalid("posterior needs D >= 1 and K >= 2"));
        }
        let (mut mean, mut log_std, mut phi) = (None, None, None);
        if kind.has_gaussian() {
            mean = Some(store.add("posterior.mean", Tensor::zeros(dims * classes, classes)));
            log_std = Some(store.add("posterior.log_std", Tensor::zeros(dims * classes, classes)));
        }
        if kind.has_phi() {
            phi = Some(store.add("posterior.phi", Tensor::zeros(dims, classes)));
        }
        Ok(Self { kind, dims, classes, mean, log_std, phi })
    }

    pub fn kind(&self) -> PosteriorKind {
        self.kind
    }

    /// Set Gumbel locations from the first minibatch (no-op for other kinds).
    pub fn init_from_batch(&self, store: &mut ParamStore, first_batch: &CategoricalBatch) -> Result<()> {
        if let Some(id) = self.phi {
            *store.get_mut(id) = init_gumbel_locations(first_batch, LAPLACE_LAMBDA)?.to_tensor();
        }
        Ok(())
    }

    /// Current Gumbel locations, if this posterior has them.
    pub fn gumbel_params(&self, store: &ParamStore) -> Option<GumbelParams> {
        self.phi.map(|id| GumbelParams::new(self.dims, self.classes, store.get(id).as_slice().to_vec()).unwrap())
    }

    /// Draw `v ~ q(v | x)` with `log q`, differentiable in the posterior's parameters.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &CategoricalBatch,
        rng: &mut crate::Rng,
    ) -> Result<PosteriorSample> {
        if x.dims() != self.dims || x.classes() != self.classes {
            return Err(Error::shape("Posterior", "data does not match the posterior's (D, K)"));
        }
        let (batch, k) = (x.batch(), self.classes);
        let rows = batch * self.dims;
        let xs: Vec<usize> = x.as_slice().to_vec();
        let onehot = x.one_hot();
        let inv: Vec<f64> = onehot.iter().map(|o| 1.0 - o).collect();
        let mask = tape.constant(Tensor::new(rows, k, onehot)?);
        let inv_mask = tape.constant(Tensor::new(rows, k, inv)?);

        let (v, log_q_rows) = match self.kind {
            PosteriorKind::Softplus => {
                let (u, log_n) = self.gaussian(tape, store, x, rng)?;
                let t = tape.gather(u, xs)?;
                let t = tape.repeat_cols(t, k)?;
                let gap = tape.sub(t, u)?;
                let sp = tape.softplus(gap)?;
                let sp = tape.clamp_min(sp, THRESHOLD_FLOOR)?;
                let below = tape.sub(t, sp)?;
                let v = select(tape, mask, u, inv_mask, below)?;
                let ld = tape.log_sigmoid(gap)?;
                let ld = tape.mul(ld, inv_mask)?;
                let ld = tape.sum_cols(ld)?;
                (v, tape.sub(log_n, ld)?)
            }
            PosteriorKind::Gumbel => {
                let phi = self.phi_rows(tape, store, rows)?;
                let mut c = Vec::with_capacity(rows * k);
                for _ in 0..rows * k {
                    c.push(-math::ln(uniform_open(rng)));
                }
                let c = tape.constant(Tensor::new(rows, k, c)?);
                let v = gumbel_on_tape(tape, phi, c, &xs, mask, inv_mask)?;
                // log q = sum_i log Gumbel(v_i | phi_i) - log softmax(phi)_x.
                let z = tape.sub(v, phi)?;
                let nz = tape.neg(z)?;
                let e = tape.exp(nz)?;
                let lp = tape.sub(nz, e)?;
                let lp = tape.sum_cols(lp)?;
                let ls = tape.log_softmax(phi)?;
                let ls = tape.gather(ls, xs)?;
                (v, tape.sub(lp, ls)?)
            }
            PosteriorKind::GumbelThreshold => {
                let (a, log_n) = self.gaussian(tape, store, x, rng)?;
                let phi = self.phi_rows(tape, store, rows)?;
                let na = tape.neg(a)?;
                let c = tape.softplus(na)?;
                let c = tape.clamp_min(c, MIN_EXP_NOISE)?;
                let v = gumbel_on_tape(tape, phi, c, &xs, mask, inv_mask)?;
                // dv_x/da_x = sigmoid(-a_x) / c_x and dv_i/da_i = sigmoid(-a_i) / (e^{phi_i - v_x} + c_i);
                // the logs of the denominators are v_x - phi_max and phi_i - v_i.
                let ls = tape.log_sigmoid(na)?;
                let ls = tape.sum_cols(ls)?;
                let vx = tape.gather(v, xs)?;
                let phi_max = tape.log_sum_exp(phi)?;
                let head = tape.sub(vx, phi_max)?;
                let tail = tape.sub(phi, v)?;
                let tail = tape.mul(tail, inv_mask)?;
                let tail = tape.sum_cols(tail)?;
                let ld = tape.add(ls, head)?;
                let ld = tape.sub(ld, tail)?;
                (v, tape.sub(log_n, ld)?)
            }
            PosteriorKind::UniformDequant => {
                let mut u = Vec::with_capacity(rows * k);
                for _ in 0..rows * k {
                    u.push(uniform_open(rng));
                }
                let u = tape.constant(Tensor::new(rows, k, u)?);
                let v = tape.add(mask, u)?;
                (v, tape.constant(Tensor::zeros(rows, 1)))
            }
            PosteriorKind::VariationalDequant => {
                let (a, log_n) = self.gaussian(tape, store, x, rng)?;
                let u = tape.sigmoid(a)?;
                let v = tape.add(mask, u)?;
                // d sigmoid(a)/da = sigmoid(a) sigmoid(-a)
                let l1 = tape.log_sigmoid(a)?;
                let na = tape.neg(a)?;
                let l2 = tape.log_sigmoid(na)?;
                let ld = tape.add(l1, l2)?;
                let ld = tape.sum_cols(ld)?;
                (v, tape.sub(log_n, ld)?)
            }
        };

        let latent = ContinuousLatent::new(batch, self.dims, k, tape.value(v).as_slice().to_vec())?;
        check_support(&latent, x)?;
        let lq = tape.reshape(log_q_rows, batch, self.dims)?;
        let log_q = tape.sum_cols(lq)?;
        let v = tape.reshape(v, batch, self.dims * k)?;
        Ok(PosteriorSample { v, log_q })
    }

    /// Plain draw: `(v, log q(v | x))` per sample.
    pub fn sample(
        &self,
        store: &ParamStore,
        x: &CategoricalBatch,
        rng: &mut crate::Rng,
    ) -> Result<(ContinuousLatent, Vec<f64>)> {
        let mut tape = Tape::new();
        let s = self.sample_on_tape(&mut tape, store, x, rng)?;
        let v = ContinuousLatent::new(x.batch(), self.dims, self.classes, tape.value(s.v).as_slice().to_vec())?;
        Ok((v, tape.value(s.log_q).as_slice().to_vec()))
    }

    /// Reparametrized `a = mean + exp(log_std) * eps`, and `log N(a)` per row.
    fn gaussian(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &CategoricalBatch,
        rng: &mut crate::Rng,
    ) -> Result<(Var, Var)> {
        let k = self.classes;
        let rows = x.batch() * self.dims;
        let idx: Vec<usize> = (0..rows).map(|r| (r % self.dims) * k + x.as_slice()[r]).collect();
        let mean = tape.param(store, self.mean.expect("gaussian posterior has a mean"));
        let log_std = tape.param(store, self.log_std.expect("gaussian posterior has a log-std"));
        let mu = tape.index_rows(mean, idx.clone())?;
        let ls = tape.index_rows(log_std, idx)?;
        let mut eps = Vec::with_capacity(rows * k);
        let mut sq = vec![0.0; rows];
        for r in 0..rows {
            for _ in 0..k {
                let e: f64 = StandardNormal.sample(rng);
                sq[r] += e * e;
                eps.push(e);
            }
        }
        let eps = tape.constant(Tensor::new(rows, k, eps)?);
        let sd = tape.exp(ls)?;
        let noise = tape.mul(sd, eps)?;
        let a = tape.add(mu, noise)?;
        let half_log_2pi = 0.5 * math::ln(2.0 * math::PI);
        let base = tape.constant(Tensor::column(
            sq.iter().map(|s| -0.5 * s - k as f64 * half_log_2pi).collect(),
        ));
        let sum_ls = tape.sum_cols(ls)?;
        let log_n = tape.sub(base, sum_ls)?;
        Ok((a, log_n))
    }

    fn phi_rows(&self, tape: &mut Tape, store: &ParamStore, rows: usize) -> Result<Var> {
        let phi = tape.param(store, self.phi.expect("gumbel posterior has locations"));
        tape.index_rows(phi, (0..rows).map(|r| r % self.dims).collect())
    }
}

fn select(tape: &mut Tape, mask: Var, a: Var, inv_mask: Var, b: Var) -> Result<Var> {
    let a = tape.mul(a, mask)?;
    let b = tape.mul(b, inv_mask)?;
    tape.add(a, b)
}

/// Tape version of [`gumbel_transform`].
fn gumbel_on_tape(tape: &mut Tape, phi: Var, c: Var, xs: &[usize], mask: Var, inv_mask: Var) -> Result<Var> {
    let k = tape.value(phi).cols();
    let phi_max = tape.log_sum_exp(phi)?;
    let log_c = tape.log(c)?;
    let cx = tape.gather(log_c, xs.to_vec())?;
    let t = tape.sub(phi_max, cx)?;
    let t = tape.repeat_cols(t, k)?;
    // log(e^{phi - T} + c) = log_add_exp(phi - T, log c)
    let shifted = tape.sub(phi, t)?;
    let denom = tape.log_add_exp(shifted, log_c)?;
    let below = tape.sub(phi, denom)?;
    select(tape, mask, t, inv_mask, below)
}

/// Number of base-`M` digits for a `K`-symbol alphabet: `ceil(log_M K)`, at least one.
pub fn cartesian_digits(classes: usize, base: usize) -> Result<usize> {
    if base < 2 || classes < 1 {
        return Err(Error::invalid("Cartesian encoding needs M >= 2 and K >= 1"));
    }
    let mut digits = 1;
    let mut cap = base;
    while cap < classes {
        cap = cap.saturating_mul(base);
        digits += 1;
    }
    Ok(digits)
}

/// Re-encode each symbol as base-`M` digits, most significant first.
pub fn cartesian_encode(x: &CategoricalBatch, base: usize) -> Result<CategoricalBatch> {
    let digits = cartesian_digits(x.classes(), base)?;
    let mut data = Vec::with_capacity(x.as_slice().len() * digits);
    for &v in x.as_slice() {
        let start = data.len();
        data.resize(start + digits, 0);
        let mut rest = v;
        for slot in data[start..].iter_mut().rev() {
            *slot = rest % base;
            rest /= base;
        }
    }
    CategoricalBatch::new(x.batch(), x.dims() * digits, base, data)
}

/// Decode base-`M` digits back to symbols; `None` for a sample containing a
/// value `>= K` (an unused code).
pub fn cartesian_decode_rows(digits: &CategoricalBatch, classes: usize) -> Result<Vec<Option<Vec<usize>>>> {
    let base = digits.classes();
    let per = cartesian_digits(classes, base)?;
    if digits.dims() % per != 0 {
        return Err(Error::shape("cartesian_decode", "digit count is not a multiple of the code length"));
    }
    Ok(digits
        .rows()
        .map(|row| {
            row.chunks(per)
                .map(|code| {
                    let v = code.iter().fold(0usize, |acc, &d| acc * base + d);
                    (v < classes).then_some(v)
                })
                .collect::<Option<Vec<usize>>>()
        })
        .collect())
}

/// Exact left inverse of [`cartesian_encode`]; fails on out-of-alphabet codes.
pub fn cartesian_decode(digits: &CategoricalBatch, classes: usize) -> Result<CategoricalBatch> {
    let rows = cartesian_decode_rows(digits, classes)?;
    let mut data = Vec::new();
    for r in rows {
        data.extend(r.ok_or(Error::OutOfAlphabet { retries: 0 })?);
    }
    let per = cartesian_digits(classes, digits.classes())?;
    CategoricalBatch::new(digits.batch(), digits.dims() / per, classes, data)
}

/// Draw `n` decoded samples, resampling any out-of-alphabet rows up to
/// `max_retries` extra rounds.
pub fn sample_decoded(
    n: usize,
    classes: usize,
    max_retries: usize,
    mut sample_digits: impl FnMut(usize) -> Result<CategoricalBatch>,
) -> Result<CategoricalBatch> {
    let mut accepted: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut rounds = 0;
    while accepted.len() < n {
        if rounds > max_retries {
            return Err(Error::OutOfAlphabet { retries: max_retries });
        }
        let digits = sample_digits(n - accepted.len())?;
        accepted.extend(cartesian_decode_rows(&digits, classes)?.into_iter().flatten());
        rounds += 1;
    }
    CategoricalBatch::from_rows(&accepted, classes)
}
