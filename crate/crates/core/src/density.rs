//! Continuous densities `p(v)` and the argmax-flow bound.
//!
//! [`FlowModel`] is a stack of LU-parametrized linear maps and affine
//! couplings over `R^{D*K}` with a standard Gaussian base. Layers are written
//! in the density direction `v -> z`, which is the one training needs;
//! sampling runs the inverse in plain arithmetic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::nn::ResidualMlp;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::math;
use crate::numerics::{argmax, log_sum_exp, CategoricalBatch};
use crate::surjections::{Posterior, PosteriorKind};
use crate::{Error, Result};

/// A density over `R^n` with parameters in a [`ParamStore`].
pub trait Density {
    fn dim(&self) -> usize;

    /// `log p(v)` for each row of `v` (shape `(batch, n)`), as a `(batch, 1)` node.
    fn log_prob_on_tape(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var>;

    /// `n` draws, shape `(n, dim)`.
    fn sample(&self, store: &ParamStore, n: usize, rng: &mut crate::Rng) -> Result<Tensor>;

    fn log_prob(&self, store: &ParamStore, v: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(v.clone());
        let lp = self.log_prob_on_tape(&mut tape, store, v)?;
        Ok(tape.value(lp).as_slice().to_vec())
    }
}

fn half_log_2pi() -> f64 {
    0.5 * math::ln(2.0 * math::PI)
}

/// Standard normal `log N(z; 0, I)` per row.
fn std_normal_on_tape(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).cols();
    let sq = tape.mul(z, z)?;
    let sq = tape.sum_cols(sq)?;
    let lp = tape.scale(sq, -0.5)?;
    tape.add_scalar(lp, -(n as f64) * half_log_2pi())
}

/// Fixed diagonal Gaussian; has no trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return Err(Error::shape("DiagonalGaussian::new", "mean and log-std lengths differ"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(n: usize) -> Self {
        Self { mean: vec![0.0; n], log_std: vec![0.0; n] }
    }
}

impl Density for DiagonalGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_prob_on_tape(&self, tape: &mut Tape, _store: &ParamStore, v: Var) -> Result<Var> {
        let mean = tape.constant(Tensor::row_vector(self.mean.clone()));
        let inv = tape.constant(Tensor::row_vector(self.log_std.iter().map(|&l| math::exp(-l)).collect()));
        let centred = tape.sub(v, mean)?;
        let z = tape.mul(centred, inv)?;
        let lp = std_normal_on_tape(tape, z)?;
        tape.add_scalar(lp, -self.log_std.iter().sum::<f64>())
    }

    fn sample(&self, _store: &ParamStore, n: usize, rng: &mut crate::Rng) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for i in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                data.push(self.mean[i] + math::exp(self.log_std[i]) * e);
            }
        }
        Tensor::new(n, d, data)
    }
}

/// Flow hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Number of (linear mixing, affine coupling) pairs.
    pub layers: usize,
    pub hidden: usize,
    /// Residual blocks per coupling conditioner.
    pub blocks: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { layers: 4, hidden: 64, blocks: 1 }
    }
}

/// Soft clamp on coupling log-scales: `s = c tanh(raw / c)`.
pub const LOG_SCALE_CLAMP: f64 = 2.0;

/// `z = v W` with `W = P L U`: `P` a fixed permutation, `L` unit lower
/// triangular, `U` upper triangular with diagonal `sign * exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LuLinear {
    n: usize,
    perm: Tensor,
    sign: Vec<f64>,
    lower: ParamId,
    upper: ParamId,
    log_scale: ParamId,
}

impl LuLinear {
    /// Initialized at a random rotation, so `|det W| = 1`.
    pub fn new(store: &mut ParamStore, name: &str, n: usize, rng: &mut crate::Rng) -> Self {
        let q = random_orthogonal(n, rng);
        let (p, l, u) = lu_decompose(&q);
        let sign = (0..n).map(|i| if u.get(i, i) < 0.0 { -1.0 } else { 1.0 }).collect();
        let log_scale = Tensor::row_vector((0..n).map(|i| math::ln(u.get(i, i).abs())).collect());
        let strict_lower = Tensor::from_fn(n, n, |r, c| if r > c { l.get(r, c) } else { 0.0 });
        let strict_upper = Tensor::from_fn(n, n, |r, c| if r < c { u.get(r, c) } else { 0.0 });
        Self {
            n,
            perm: p,
            sign,
            lower: store.add(&format!("{name}.lower"), strict_lower),
            upper: store.add(&format!("{name}.upper"), strict_upper),
            log_scale: store.add(&format!("{name}.log_scale"), log_scale),
        }
    }

    fn weight_on_tape(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let n = self.n;
        let lower_mask = tape.constant(Tensor::from_fn(n, n, |r, c| f64::from(u8::from(r > c))));
        let upper_mask = tape.constant(Tensor::from_fn(n, n, |r, c| f64::from(u8::from(r < c))));
        let eye = tape.constant(Tensor::identity(n));
        let sign = tape.constant(Tensor::row_vector(self.sign.clone()));
        let l = tape.param(store, self.lower);
        let l = tape.mul(l, lower_mask)?;
        let l = tape.add(l, eye)?;
        let u = tape.param(store, self.upper);
        let u = tape.mul(u, upper_mask)?;
        let ls = tape.param(store, self.log_scale);
        let s = tape.exp(ls)?;
        let s = tape.mul(s, sign)?;
        let diag = tape.mul(eye, s)?;
        let u = tape.add(u, diag)?;
        let p = tape.constant(self.perm.clone());
        let pl = tape.matmul(p, l)?;
        tape.matmul(pl, u)
    }

    fn weight(&self, store: &ParamStore) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.weight_on_tape(&mut tape, store)?;
        Ok(tape.value(w).clone())
    }

    /// `(z, log|det dz/dv|)`; the log-determinant is a `(1, 1)` node.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<(Var, Var)> {
        let w = self.weight_on_tape(tape, store)?;
        let z = tape.matmul(v, w)?;
        let ls = tape.param(store, self.log_scale);
        Ok((z, tape.sum(ls)?))
    }

    fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, f64)> {
        let w_inv = invert(&self.weight(store)?)?;
        let ld: f64 = store.get(self.log_scale).as_slice().iter().sum();
        Ok((z.matmul(&w_inv)?, -ld))
    }
}

/// Affine coupling: half `a` passes through and conditions
/// `z_b = (v_b - t(v_a)) * exp(-s(v_a))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoupling {
    n: usize,
    /// Whether the first half is the conditioning half.
    first_conditions: bool,
    net: ResidualMlp,
}

impl AffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        first_conditions: bool,
        config: FlowConfig,
        rng: &mut crate::Rng,
    ) -> Self {
        let h = n / 2;
        let (na, nb) = if first_conditions { (h, n - h) } else { (n - h, h) };
        let net = ResidualMlp::new(store, name, na, config.hidden, config.blocks, 2 * nb, true, rng);
        Self { n, first_conditions, net }
    }

    fn ranges(&self) -> ((usize, usize), (usize, usize)) {
        let h = self.n / 2;
        if self.first_conditions {
            ((0, h), (h, self.n))
        } else {
            ((h, self.n), (0, h))
        }
    }

    fn scale_shift(&self, tape: &mut Tape, store: &ParamStore, a: Var) -> Result<(Var, Var)> {
        let ((_, _), (b0, b1)) = self.ranges();
        let nb = b1 - b0;
        let h = self.net.forward(tape, store, a)?;
        let raw = tape.slice(h, 0, nb)?;
        let shift = tape.slice(h, nb, 2 * nb)?;
        let s = tape.scale(raw, 1.0 / LOG_SCALE_CLAMP)?;
        let s = tape.tanh(s)?;
        let s = tape.scale(s, LOG_SCALE_CLAMP)?;
        Ok((s, shift))
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<(Var, Var)> {
        let ((a0, a1), (b0, b1)) = self.ranges();
        let va = tape.slice(v, a0, a1)?;
        let vb = tape.slice(v, b0, b1)?;
        let (s, shift) = self.scale_shift(tape, store, va)?;
        let centred = tape.sub(vb, shift)?;
        let ns = tape.neg(s)?;
        let inv = tape.exp(ns)?;
        let zb = tape.mul(centred, inv)?;
        let z = if self.first_conditions { tape.concat(&[va, zb])? } else { tape.concat(&[zb, va])? };
        let ld = tape.sum_cols(ns)?;
        Ok((z, ld))
    }

    fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let ((a0, a1), (b0, b1)) = self.ranges();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let za = tape.slice(zv, a0, a1)?;
        let (s, shift) = self.scale_shift(&mut tape, store, za)?;
        let (s, shift) = (tape.value(s).clone(), tape.value(shift).clone());
        let mut v = z.clone();
        let mut ld = vec![0.0; z.rows()];
        for r in 0..z.rows() {
            for (j, c) in (b0..b1).enumerate() {
                let sv = s.get(r, j);
                v.set(r, c, z.get(r, c) * math::exp(sv) + shift.get(r, j));
                ld[r] += sv;
            }
        }
        Ok((v, ld))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Linear(LuLinear),
    Coupling(AffineCoupling),
}

/// Normalizing flow with a standard Gaussian base.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    n: usize,
    layers: Vec<Layer>,
}

impl FlowModel {
    pub fn new(store: &mut ParamStore, n: usize, config: FlowConfig, rng: &mut crate::Rng) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("a coupling flow needs at least two dimensions"));
        }
        let mut layers = Vec::with_capacity(2 * config.layers);
        for i in 0..config.layers {
            layers.push(Layer::Linear(LuLinear::new(store, &format!("flow.{i}.mix"), n, rng)));
            layers.push(Layer::Coupling(AffineCoupling::new(
                store,
                &format!("flow.{i}.coupling"),
                n,
                i % 2 == 0,
                config,
                rng,
            )));
        }
        Ok(Self { n, layers })
    }

    /// `z = g^{-1}(v)` and `log|det dz/dv|` per row.
    pub fn forward_on_tape(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<(Var, Var)> {
        let rows = tape.value(v).rows();
        let mut z = v;
        let mut ld = tape.constant(Tensor::zeros(rows, 1));
        for layer in &self.layers {
            let (next, l) = match layer {
                Layer::Linear(m) => m.forward(tape, store, z)?,
                Layer::Coupling(c) => c.forward(tape, store, z)?,
            };
            z = next;
            ld = tape.add(ld, l)?;
        }
        Ok((z, ld))
    }

    /// `v = g(z)` and `log|det dv/dz|` per row.
    pub fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut v = z.clone();
        let mut ld = vec![0.0; z.rows()];
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Linear(m) => {
                    let (next, l) = m.inverse(store, &v)?;
                    v = next;
                    ld.iter_mut().for_each(|x| *x += l);
                }
                Layer::Coupling(c) => {
                    let (next, l) = c.inverse(store, &v)?;
                    v = next;
                    ld.iter_mut().zip(l).for_each(|(x, l)| *x += l);
                }
            }
        }
        Ok((v, ld))
    }
}

impl Density for FlowModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn log_prob_on_tape(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        let (z, ld) = self.forward_on_tape(tape, store, v)?;
        let base = std_normal_on_tape(tape, z)?;
        tape.add(base, ld)
    }

    fn sample(&self, store: &ParamStore, n: usize, rng: &mut crate::Rng) -> Result<Tensor> {
        let z = Tensor::from_fn(n, self.n, |_, _| StandardNormal.sample(rng));
        Ok(self.inverse(store, &z)?.0)
    }
}

/// A density `p(v)` over `R^{D*K}` with a posterior `q(v | x)`.
#[derive(Clone, Debug)]
pub struct ArgmaxFlow<Dn> {
    pub density: Dn,
    pub posterior: Posterior,
    pub store: ParamStore,
    dims: usize,
    classes: usize,
}

/// Samples per chunk when evaluating bounds, to bound tape size.
const EVAL_CHUNK_ROWS: usize = 4096;

impl ArgmaxFlow<FlowModel> {
    /// A trainable flow density with the given posterior.
    pub fn with_flow(
        dims: usize,
        classes: usize,
        kind: PosteriorKind,
        config: FlowConfig,
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let density = FlowModel::new(&mut store, dims * classes, config, rng)?;
        let posterior = Posterior::new(kind, &mut store, dims, classes)?;
        Ok(Self { density, posterior, store, dims, classes })
    }
}

impl<Dn: Density> ArgmaxFlow<Dn> {
    /// Pair an existing density (whose parameters, if any, are in `store`) with a new posterior.
    pub fn new(density: Dn, mut store: ParamStore, dims: usize, classes: usize, kind: PosteriorKind) -> Result<Self> {
        if density.dim() != dims * classes {
            return Err(Error::shape("ArgmaxFlow::new", "density dimension must be D * K"));
        }
        let posterior = Posterior::new(kind, &mut store, dims, classes)?;
        Ok(Self { density, posterior, store, dims, classes })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check(&self, x: &CategoricalBatch) -> Result<()> {
        if x.dims() != self.dims || x.classes() != self.classes {
            return Err(Error::shape(
                "ArgmaxFlow",
                format!(
                    "data has D={}, K={} but the model has D={}, K={}",
                    x.dims(),
                    x.classes(),
                    self.dims,
                    self.classes
                ),
            ));
        }
        Ok(())
    }

    /// Single-sample bound `log p(v) - log q(v | x)`, `v ~ q(v | x)`, as `(batch, 1)`.
    pub fn elbo_on_tape(&self, tape: &mut Tape, x: &CategoricalBatch, rng: &mut crate::Rng) -> Result<Var> {
        self.check(x)?;
        let s = self.posterior.sample_on_tape(tape, &self.store, x, rng)?;
        let lp = self.density.log_prob_on_tape(tape, &self.store, s.v)?;
        tape.sub(lp, s.log_q)
    }

    /// Single-sample ELBO per data point, in nats.
    pub fn elbo(&self, x: &CategoricalBatch, rng: &mut crate::Rng) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.batch());
        let chunk = EVAL_CHUNK_ROWS.max(1);
        let mut start = 0;
        while start < x.batch() {
            let end = (start + chunk).min(x.batch());
            let mut tape = Tape::new();
            let e = self.elbo_on_tape(&mut tape, &x.slice_rows(start, end), rng)?;
            out.extend_from_slice(tape.value(e).as_slice());
            start = end;
        }
        Ok(out)
    }

    /// Importance-weighted bound `log (1/S) sum_s p(v_s) / q(v_s | x)` per data point.
    pub fn iwbo(&self, x: &CategoricalBatch, samples: usize, rng: &mut crate::Rng) -> Result<Vec<f64>> {
        if samples == 0 {
            return Err(Error::invalid("IWBO needs at least one sample"));
        }
        self.check(x)?;
        let mut out = Vec::with_capacity(x.batch());
        let mut weights = Vec::with_capacity(samples);
        for b in 0..x.batch() {
            weights.clear();
            let row = x.row(b);
            let mut left = samples;
            while left > 0 {
                let n = left.min(EVAL_CHUNK_ROWS);
                let rows: Vec<Vec<usize>> = (0..n).map(|_| row.to_vec()).collect();
                let rep = CategoricalBatch::from_rows(&rows, self.classes)?;
                let mut tape = Tape::new();
                let e = self.elbo_on_tape(&mut tape, &rep, rng)?;
                weights.extend_from_slice(tape.value(e).as_slice());
                left -= n;
            }
            out.push(log_sum_exp(&weights) - math::ln(samples as f64));
        }
        Ok(out)
    }

    /// `v ~ p(v)`, then `x = argmax v` per dimension.
    pub fn sample(&self, n: usize, rng: &mut crate::Rng) -> Result<CategoricalBatch> {
        let v = self.density.sample(&self.store, n, rng)?;
        let data = v.as_slice().chunks_exact(self.classes).map(argmax).collect();
        CategoricalBatch::new(n, self.dims, self.classes, data)
    }
}

/// A random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
pub(crate) fn random_orthogonal(n: usize, rng: &mut crate::Rng) -> Tensor {
    loop {
        let mut q = Tensor::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|c| q.get(i, c) * q.get(j, c)).sum();
                for c in 0..n {
                    let v = q.get(i, c) - dot * q.get(j, c);
                    q.set(i, c, v);
                }
            }
            let norm = math::sqrt((0..n).map(|c| q.get(i, c) * q.get(i, c)).sum());
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for c in 0..n {
                let v = q.get(i, c) / norm;
                q.set(i, c, v);
            }
        }
        if ok {
            return q;
        }
    }
}

/// `A = P L U` with partial pivoting; `P` is a permutation matrix.
pub(crate) fn lu_decompose(a: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = a.rows();
    let mut u = a.clone();
    let mut l = Tensor::identity(n);
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| u.get(i, k).abs().total_cmp(&u.get(j, k).abs()))
            .expect("non-empty range");
        if pivot != k {
            for c in 0..n {
                let (x, y) = (u.get(k, c), u.get(pivot, c));
                u.set(k, c, y);
                u.set(pivot, c, x);
            }
            for c in 0..k {
                let (x, y) = (l.get(k, c), l.get(pivot, c));
                l.set(k, c, y);
                l.set(pivot, c, x);
            }
            order.swap(k, pivot);
        }
        for i in k + 1..n {
            let f = u.get(i, k) / u.get(k, k);
            l.set(i, k, f);
            for c in k..n {
                let v = u.get(i, c) - f * u.get(k, c);
                u.set(i, c, v);
            }
        }
    }
    // Row i of L U is row order[i] of A, so A = P (L U) with P[order[i], i] = 1.
    let mut p = Tensor::zeros(n, n);
    for (i, &o) in order.iter().enumerate() {
        p.set(o, i, 1.0);
    }
    (p, l, u)
}

/// Gauss-Jordan inverse with partial pivoting.
pub(crate) fn invert(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Tensor::identity(n);
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| m.get(i, k).abs().total_cmp(&m.get(j, k).abs()))
            .expect("non-empty range");
        if m.get(pivot, k).abs() < 1e-300 {
            return Err(Error::invalid("singular matrix"));
        }
        for c in 0..n {
            let (x, y) = (m.get(k, c), m.get(pivot, c));
            m.set(k, c, y);
            m.set(pivot, c, x);
            let (x, y) = (inv.get(k, c), inv.get(pivot, c));
            inv.set(k, c, y);
            inv.set(pivot, c, x);
        }
        let d = m.get(k, k);
        for c in 0..n {
            m.set(k, c, m.get(k, c) / d);
            inv.set(k, c, inv.get(k, c) / d);
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let f = m.get(i, k);
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m.set(i, c, m.get(i, c) - f * m.get(k, c));
                inv.set(i, c, inv.get(i, c) - f * inv.get(k, c));
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng_from_seed;
    use rand::Rng as _;

    fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
        let mut rng = rng_from_seed(seed);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).as_mut_slice() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn lu_reconstructs_matrix() {
        let mut rng = rng_from_seed(1);
        let q = random_orthogonal(5, &mut rng);
        let qqt = q.matmul(&q.transpose()).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert!((qqt.get(r, c) - f64::from(u8::from(r == c))).abs() < 1e-12);
            }
        }
        let (p, l, u) = lu_decompose(&q);
        let back = p.matmul(&l).unwrap().matmul(&u).unwrap();
        for (a, b) in back.as_slice().iter().zip(q.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let inv = invert(&q).unwrap();
        for (a, b) in inv.as_slice().iter().zip(q.transpose().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_flow_is_a_rotation_with_gaussian_density() {
        let mut rng = rng_from_seed(2);
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, 4, FlowConfig { layers: 3, hidden: 8, blocks: 1 }, &mut rng).unwrap();
        let v = Tensor::from_fn(6, 4, |r, c| (r as f64 - 2.5) * 0.7 + c as f64 * 0.3);
        let lp = flow.log_prob(&store, &v).unwrap();
        let std = DiagonalGaussian::standard(4).log_prob(&ParamStore::new(), &v).unwrap();
        for (a, b) in lp.iter().zip(&std) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn known_scale_shifts_log_prob() {
        let mut rng = rng_from_seed(3);
        let mut store = ParamStore::new();
        let config = FlowConfig { layers: 1, hidden: 4, blocks: 0 };
        let coupling = AffineCoupling::new(&mut store, "c", 4, true, config, &mut rng);
        // Output bias sets a constant raw log-scale per transformed coordinate.
        let bias = store.find("c.out.bias").unwrap();
        let raw = [0.4, -0.3];
        for (j, r) in raw.iter().enumerate() {
            store.get_mut(bias).set(0, j, *r);
        }
        let v = Tensor::from_fn(3, 4, |r, c| 0.1 * (r * 4 + c) as f64);
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let (_, ld) = coupling.forward(&mut tape, &store, vv).unwrap();
        let s: f64 = raw.iter().map(|r| LOG_SCALE_CLAMP * (r / LOG_SCALE_CLAMP).tanh()).sum();
        for &l in tape.value(ld).as_slice() {
            assert!((l + s).abs() < 1e-14);
        }
    }

    #[test]
    fn flow_roundtrip_and_log_det_antisymmetry() {
        let mut rng = rng_from_seed(4);
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, 6, FlowConfig { layers: 3, hidden: 8, blocks: 1 }, &mut rng).unwrap();
        perturb(&mut store, 0.3, 5);
        let z = Tensor::from_fn(10, 6, |_, _| StandardNormal.sample(&mut rng));
        let (v, ld_inv) = flow.inverse(&store, &z).unwrap();
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let (z2, ld_fwd) = flow.forward_on_tape(&mut tape, &store, vv).unwrap();
        for (a, b) in tape.value(z2).as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in tape.value(ld_fwd).as_slice().iter().zip(&ld_inv) {
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_density_integrates_to_one() {
        let mut rng = rng_from_seed(6);
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, 2, FlowConfig { layers: 2, hidden: 8, blocks: 1 }, &mut rng).unwrap();
        perturb(&mut store, 0.4, 7);
        let h = 0.05;
        let m = 320;
        let grid = Tensor::from_fn(m * m, 2, |r, c| {
            let i = if c == 0 { r / m } else { r % m };
            -8.0 + (i as f64 + 0.5) * h
        });
        let total: f64 = flow.log_prob(&store, &grid).unwrap().iter().map(|l| l.exp() * h * h).sum();
        assert!((total - 1.0).abs() < 1e-2, "{total}");
    }

    #[test]
    fn identity_flow_samples_are_standard_normal() {
        let mut rng = rng_from_seed(8);
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, 3, FlowConfig { layers: 2, hidden: 8, blocks: 1 }, &mut rng).unwrap();
        let n = 20_000;
        let s = flow.sample(&store, n, &mut rng_from_seed(9)).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..n).map(|r| s.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 / (n as f64).sqrt());
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
        }
        let again = flow.sample(&store, n, &mut rng_from_seed(9)).unwrap();
        assert_eq!(s, again);
        assert!(flow.log_prob(&store, &s).unwrap().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(10);
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, 4, FlowConfig { layers: 2, hidden: 5, blocks: 1 }, &mut rng).unwrap();
        perturb(&mut store, 0.3, 11);
        let v = Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
        let check = check_gradients(&store, 1e-5, 1, |tape, store| {
            let vv = tape.constant(v.clone());
            let lp = flow.log_prob_on_tape(tape, store, vv)?;
            tape.sum(lp)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(12);
        for kind in [PosteriorKind::Softplus, PosteriorKind::Gumbel, PosteriorKind::GumbelThreshold] {
            let mut model =
                ArgmaxFlow::with_flow(2, 3, kind, FlowConfig { layers: 1, hidden: 4, blocks: 1 }, &mut rng).unwrap();
            perturb(&mut model.store, 0.2, 13);
            let x = CategoricalBatch::new(3, 2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
            let store = model.store.clone();
            let check = check_gradients(&store, 1e-5, 1, |tape, store| {
                let mut m = model.clone();
                m.store = store.clone();
                let e = m.elbo_on_tape(tape, &x, &mut rng_from_seed(14))?;
                tape.mean(e)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{kind:?}: {}", check.max_rel_error);
        }
    }

    #[test]
    fn symmetric_gaussian_bound_is_below_log_half() {
        let mut rng = rng_from_seed(15);
        let model = ArgmaxFlow::new(DiagonalGaussian::standard(2), ParamStore::new(), 1, 2, PosteriorKind::Softplus)
            .unwrap();
        let x = CategoricalBatch::new(4000, 1, 2, vec![0; 4000]).unwrap();
        let e = model.elbo(&x, &mut rng).unwrap();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        assert!(mean <= (0.5f64).ln());
        let iw = model.iwbo(&x.slice_rows(0, 20), 200, &mut rng).unwrap();
        let iw_mean = iw.iter().sum::<f64>() / iw.len() as f64;
        assert!(iw_mean > mean);
    }
}
