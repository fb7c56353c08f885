//! Multinomial diffusion.
//!
//! Time indexing: data lives at `t = 0`, forward steps are `t = 1..=T`.
//! [`q_posterior`] at step `t` is the distribution of `x_{t-1}` given `x_t`
//! and `x_0`; at `t = 1` it is `x_0` itself (the delta branch), which is also
//! how the reverse model's last step `p(x_0 | x_1) = Cat(x_0 | x̂_0)` arises.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::nn::ResidualMlp;
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::math;
use crate::numerics::{
    argmax, categorical_kl, index_to_log_onehot, log_add_exp, log_sum_exp, sample_categorical,
    sum_over_dims, CategoricalBatch, LogProbTensor, LOG_ZERO,
};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

fn check_steps(schedule: &NoiseSchedule, ts: &[usize], allow_zero: bool) -> Result<()> {
    for &t in ts {
        if t > schedule.steps() || (t == 0 && !allow_zero) {
            return Err(Error::invalid(alloc::format!(
                "timestep {t} outside {}..={}",
                if allow_zero { 0 } else { 1 },
                schedule.steps()
            )));
        }
    }
    Ok(())
}

fn check_batch_len(log_x: &LogProbTensor, ts: &[usize]) -> Result<()> {
    if ts.len() != log_x.batch() {
        return Err(Error::shape("diffusion", alloc::format!("{} timesteps for batch {}", ts.len(), log_x.batch())));
    }
    Ok(())
}

/// `log(w * x + (1 - w) / K)` per row, with `(log w, log(1 - w))` chosen by the row's step.
fn mix_uniform(log_x: &LogProbTensor, ts: &[usize], coef: impl Fn(usize) -> (f64, f64)) -> LogProbTensor {
    let per_sample = log_x.dims();
    let log_k = math::ln(log_x.classes() as f64);
    log_x.map_rows(|i, src, dst| {
        let (lw, l1w) = coef(ts[i / per_sample]);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = log_add_exp(s + lw, l1w - log_k);
        }
    })
}

/// One forward step `q(x_t | x_{t-1}) = Cat(alpha_t x_{t-1} + (1 - alpha_t) / K)`.
pub fn q_forward_one_step(schedule: &NoiseSchedule, log_x_tm1: &LogProbTensor, t: usize) -> Result<LogProbTensor> {
    q_forward_one_step_per_sample(schedule, log_x_tm1, &vec![t; log_x_tm1.batch()])
}

/// [`q_forward_one_step`] with one step per batch row.
pub fn q_forward_one_step_per_sample(
    schedule: &NoiseSchedule,
    log_x_tm1: &LogProbTensor,
    ts: &[usize],
) -> Result<LogProbTensor> {
    check_batch_len(log_x_tm1, ts)?;
    check_steps(schedule, ts, false)?;
    Ok(mix_uniform(log_x_tm1, ts, |t| (schedule.log_alpha(t), schedule.log_1_min_alpha(t))))
}

/// Marginal `q(x_t | x_0) = Cat(alpha_bar_t x_0 + (1 - alpha_bar_t) / K)`; `t = 0` is allowed.
pub fn q_marginal(schedule: &NoiseSchedule, log_x0: &LogProbTensor, t: usize) -> Result<LogProbTensor> {
    q_marginal_per_sample(schedule, log_x0, &vec![t; log_x0.batch()])
}

pub fn q_marginal_per_sample(schedule: &NoiseSchedule, log_x0: &LogProbTensor, ts: &[usize]) -> Result<LogProbTensor> {
    check_batch_len(log_x0, ts)?;
    check_steps(schedule, ts, true)?;
    Ok(mix_uniform(log_x0, ts, |t| (schedule.log_cumprod_alpha(t), schedule.log_1_min_cumprod_alpha(t))))
}

/// Posterior `q(x_{t-1} | x_t, x_0)`, normalized.
///
/// `log_x0` may be a soft prediction (non-negative, summing to one). At
/// `t = 1` the result is `log_x0` unchanged.
pub fn q_posterior(
    schedule: &NoiseSchedule,
    log_x0: &LogProbTensor,
    log_x_t: &LogProbTensor,
    t: usize,
) -> Result<LogProbTensor> {
    q_posterior_per_sample(schedule, log_x0, log_x_t, &vec![t; log_x0.batch()])
}

pub fn q_posterior_per_sample(
    schedule: &NoiseSchedule,
    log_x0: &LogProbTensor,
    log_x_t: &LogProbTensor,
    ts: &[usize],
) -> Result<LogProbTensor> {
    if !log_x0.same_shape(log_x_t) {
        return Err(Error::shape("q_posterior", "x0 and x_t differ in shape"));
    }
    check_batch_len(log_x0, ts)?;
    check_steps(schedule, ts, false)?;
    let tm1: Vec<usize> = ts.iter().map(|&t| t - 1).collect();
    let prev = q_marginal_per_sample(schedule, log_x0, &tm1)?;
    // q(x_t | x_{t-1}) read as a function of x_{t-1} is the one-step kernel
    // applied to x_t, since the kernel is symmetric.
    let step = q_forward_one_step_per_sample(schedule, log_x_t, ts)?;
    let per_sample = log_x0.dims();
    let k = log_x0.classes();
    let x0 = log_x0.as_slice();
    let step = step.as_slice();
    Ok(prev.map_rows(|i, src, dst| {
        if ts[i / per_sample] == 1 {
            dst.copy_from_slice(&x0[i * k..(i + 1) * k]);
            return;
        }
        for ((d, &a), &b) in dst.iter_mut().zip(src).zip(&step[i * k..(i + 1) * k]) {
            *d = a + b;
        }
        let lse = log_sum_exp(dst);
        dst.iter_mut().for_each(|v| *v -= lse);
    }))
}

/// The network `mu(x_t, t)` producing logits for `x̂_0`.
pub trait Denoiser {
    fn dims(&self) -> usize;
    fn classes(&self) -> usize;
    /// Raw logits laid out as `(batch, dims, classes)`; `t[b]` is row `b`'s step.
    fn logits(&self, x_t: &CategoricalBatch, t: &[usize]) -> Result<Vec<f64>>;
}

/// A denoiser whose parameters can be trained on a [`Tape`].
pub trait TrainableDenoiser: Denoiser {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Logits as a `(batch * dims, classes)` tape node.
    fn logits_on_tape(&self, tape: &mut Tape, x_t: &CategoricalBatch, t: &[usize]) -> Result<Var>;
}

/// A denoiser given by a plain function of one row and its step.
pub struct FnDenoiser<F> {
    dims: usize,
    classes: usize,
    f: F,
}

impl<F: Fn(&[usize], usize) -> Vec<f64>> FnDenoiser<F> {
    /// `f(x_t_row, t)` must return `dims * classes` logits.
    pub fn new(dims: usize, classes: usize, f: F) -> Self {
        Self { dims, classes, f }
    }
}

impl<F: Fn(&[usize], usize) -> Vec<f64>> Denoiser for FnDenoiser<F> {
    fn dims(&self) -> usize {
        self.dims
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, x_t: &CategoricalBatch, t: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x_t.batch() * self.dims * self.classes);
        for (row, &t) in x_t.rows().zip(t) {
            let l = (self.f)(row, t);
            if l.len() != self.dims * self.classes {
                return Err(Error::shape("FnDenoiser", "logit count"));
            }
            out.extend(l);
        }
        Ok(out)
    }
}

/// Hyperparameters of [`MlpDenoiser`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpDenoiserConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub time_embedding: usize,
}

impl Default for MlpDenoiserConfig {
    fn default() -> Self {
        Self { hidden: 64, blocks: 2, time_embedding: 16 }
    }
}

/// Residual MLP on `[one_hot(x_t), sinusoidal(t)]`, output `(D, K)` logits.
///
/// The output layer starts at zero, so an untrained model predicts uniform `x̂_0`.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    net: ResidualMlp,
    store: ParamStore,
    dims: usize,
    classes: usize,
    embedding: usize,
}

impl MlpDenoiser {
    pub fn new(dims: usize, classes: usize, config: MlpDenoiserConfig, rng: &mut crate::Rng) -> Result<Self> {
        if dims == 0 || classes < 2 || config.hidden == 0 || config.time_embedding % 2 != 0 {
            return Err(Error::invalid("denoiser needs D >= 1, K >= 2, hidden > 0 and an even time embedding"));
        }
        let mut store = ParamStore::new();
        let net = ResidualMlp::new(
            &mut store,
            "denoiser",
            dims * classes + config.time_embedding,
            config.hidden,
            config.blocks,
            dims * classes,
            true,
            rng,
        );
        Ok(Self { net, store, dims, classes, embedding: config.time_embedding })
    }

    fn input(&self, x_t: &CategoricalBatch, t: &[usize]) -> Result<Tensor> {
        if x_t.dims() != self.dims || x_t.classes() != self.classes || t.len() != x_t.batch() {
            return Err(Error::shape("MlpDenoiser", "input does not match the model's D, K or batch"));
        }
        let width = self.dims * self.classes + self.embedding;
        let mut data = vec![0.0; x_t.batch() * width];
        let half = self.embedding / 2;
        for (b, (row, &t)) in x_t.rows().zip(t).enumerate() {
            let out = &mut data[b * width..(b + 1) * width];
            for (d, &c) in row.iter().enumerate() {
                out[d * self.classes + c] = 1.0;
            }
            let emb = &mut out[self.dims * self.classes..];
            for i in 0..half {
                let freq = math::exp(-math::ln(1000.0) * i as f64 / half as f64);
                emb[2 * i] = math::sin(t as f64 * freq);
                emb[2 * i + 1] = math::cos(t as f64 * freq);
            }
        }
        Tensor::new(x_t.batch(), width, data)
    }
}

impl Denoiser for MlpDenoiser {
    fn dims(&self) -> usize {
        self.dims
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, x_t: &CategoricalBatch, t: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.logits_on_tape(&mut tape, x_t, t)?;
        Ok(tape.value(out).as_slice().to_vec())
    }
}

impl TrainableDenoiser for MlpDenoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits_on_tape(&self, tape: &mut Tape, x_t: &CategoricalBatch, t: &[usize]) -> Result<Var> {
        let input = tape.constant(self.input(x_t, t)?);
        let out = self.net.forward(tape, &self.store, input)?;
        tape.reshape(out, x_t.batch() * self.dims, self.classes)
    }
}

/// Evaluate the denoiser once per distinct `(x_t, t)` pair. Rows are
/// computed independently, so this matches a full-batch call exactly.
fn dedup_logits<Dn: Denoiser + ?Sized>(den: &Dn, x_t: &CategoricalBatch, ts: &[usize]) -> Result<Vec<f64>> {
    let mut index: BTreeMap<(&[usize], usize), usize> = BTreeMap::new();
    let mut slot = Vec::with_capacity(ts.len());
    let mut unique_rows = Vec::new();
    let mut unique_ts = Vec::new();
    for (row, &t) in x_t.rows().zip(ts) {
        let next = index.len();
        let id = *index.entry((row, t)).or_insert_with(|| {
            unique_rows.extend_from_slice(row);
            unique_ts.push(t);
            next
        });
        slot.push(id);
    }
    if unique_ts.len() == ts.len() {
        return den.logits(x_t, ts);
    }
    let unique = CategoricalBatch::new(unique_ts.len(), x_t.dims(), x_t.classes(), unique_rows)?;
    let logits = den.logits(&unique, &unique_ts)?;
    let width = x_t.dims() * x_t.classes();
    let mut out = Vec::with_capacity(ts.len() * width);
    for id in slot {
        out.extend_from_slice(&logits[id * width..(id + 1) * width]);
    }
    Ok(out)
}

/// How [`DiffusionModel::elbo`] treats the sum over timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElboMode {
    /// Every step. `x_t` is enumerated exactly when `K^D <= 256` and
    /// `T * K^D <= 32768`, otherwise one `x_t` is drawn per step.
    Full,
    /// One importance-sampled step per sample, reweighted by `1/q(t)`.
    Sampled,
}

/// Largest `K^D` for which the full ELBO enumerates `x_t`.
pub const ENUMERATE_MAX_STATES: usize = 256;
/// Largest `T * K^D` for which the full ELBO enumerates `x_t`.
pub const ENUMERATE_MAX_ROWS: usize = 32_768;

/// Per-timestep history of squared losses for importance sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory {
    buffers: Vec<Vec<f64>>,
    next: Vec<usize>,
}

/// Ring buffer length per timestep.
pub const HISTORY_PER_STEP: usize = 10;

impl LossHistory {
    pub fn new(steps: usize) -> Self {
        Self { buffers: vec![Vec::with_capacity(HISTORY_PER_STEP); steps], next: vec![0; steps] }
    }

    pub fn steps(&self) -> usize {
        self.buffers.len()
    }

    /// Record the loss `L_t` of one sample at step `t` (stored squared).
    pub fn record(&mut self, t: usize, loss: f64) {
        let i = t - 1;
        let sq = loss * loss;
        if self.buffers[i].len() < HISTORY_PER_STEP {
            self.buffers[i].push(sq);
        } else {
            self.buffers[i][self.next[i]] = sq;
        }
        self.next[i] = (self.next[i] + 1) % HISTORY_PER_STEP;
    }

    /// Whether every step has a full buffer.
    pub fn is_warm(&self) -> bool {
        self.buffers.iter().all(|b| b.len() == HISTORY_PER_STEP)
    }

    /// `q(t)` for `t = 1..=T` (index `t - 1`): uniform until warm, then
    /// proportional to `sqrt(mean L_t^2)`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.buffers.len();
        if !self.is_warm() {
            return vec![1.0 / n as f64; n];
        }
        let raw: Vec<f64> = self
            .buffers
            .iter()
            .map(|b| math::sqrt(b.iter().sum::<f64>() / b.len() as f64))
            .collect();
        let max = raw.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0 && max.is_finite()) {
            return vec![1.0 / n as f64; n];
        }
        // Keep every step reachable.
        let floored: Vec<f64> = raw.iter().map(|&w| w.max(max * 1e-12)).collect();
        let total: f64 = floored.iter().sum();
        floored.iter().map(|w| w / total).collect()
    }

    /// Raw buffers, for checkpointing: `(squared losses, next write slot)` per step.
    pub fn buffers(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.buffers.iter().map(Vec::as_slice).zip(self.next.iter().copied())
    }
}

/// Draw `t` from the history's importance distribution; returns `(t, 1/q(t))`.
pub fn sample_t_importance(history: &LossHistory, rng: &mut crate::Rng) -> (usize, f64) {
    let w = history.weights();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut pick = w.len() - 1;
    for (i, &p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            pick = i;
            break;
        }
    }
    (pick + 1, 1.0 / w[pick])
}

/// Output of [`DiffusionModel::training_loss`].
pub struct TrainingLoss {
    /// Scalar objective: mean over the batch of `L_t / q(t)`.
    pub loss: Var,
    pub timesteps: Vec<usize>,
    /// Unweighted `L_t` per sample.
    pub terms: Vec<f64>,
    /// Per-sample single-step ELBO estimate `-(prior_kl + L_t / q(t))`.
    pub elbo: Vec<f64>,
}

/// Schedule plus denoiser.
#[derive(Clone, Debug)]
pub struct DiffusionModel<Dn> {
    pub schedule: NoiseSchedule,
    pub denoiser: Dn,
}

impl<Dn: Denoiser> DiffusionModel<Dn> {
    pub fn new(schedule: NoiseSchedule, denoiser: Dn) -> Self {
        Self { schedule, denoiser }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn dims(&self) -> usize {
        self.denoiser.dims()
    }

    pub fn classes(&self) -> usize {
        self.denoiser.classes()
    }

    fn check_data(&self, x: &CategoricalBatch) -> Result<()> {
        if x.dims() != self.dims() || x.classes() != self.classes() {
            return Err(Error::shape(
                "diffusion",
                alloc::format!(
                    "data has D={}, K={} but the model has D={}, K={}",
                    x.dims(),
                    x.classes(),
                    self.dims(),
                    self.classes()
                ),
            ));
        }
        Ok(())
    }

    /// `log x̂_0 = log_softmax(mu(x_t, t))`.
    pub fn predict_x0(&self, x_t: &CategoricalBatch, ts: &[usize]) -> Result<LogProbTensor> {
        self.check_data(x_t)?;
        check_steps(&self.schedule, ts, false)?;
        let logits = dedup_logits(&self.denoiser, x_t, ts)?;
        LogProbTensor::from_logits(x_t.batch(), x_t.dims(), x_t.classes(), &logits)
    }

    /// Reverse step `p(x_{t-1} | x_t)`; at `t = 1` this is `x̂_0`.
    pub fn p_pred(&self, x_t: &CategoricalBatch, t: usize) -> Result<LogProbTensor> {
        self.p_pred_per_sample(x_t, &vec![t; x_t.batch()])
    }

    pub fn p_pred_per_sample(&self, x_t: &CategoricalBatch, ts: &[usize]) -> Result<LogProbTensor> {
        let x0_hat = self.predict_x0(x_t, ts)?;
        q_posterior_per_sample(&self.schedule, &x0_hat, &index_to_log_onehot(x_t), ts)
    }

    /// `L_{t-1}` per sample: `KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))` summed
    /// over dimensions; at `t = 1` this is `-log x̂_0[x_0]`.
    pub fn loss_term(&self, x0: &CategoricalBatch, x_t: &CategoricalBatch, t: usize) -> Result<Vec<f64>> {
        self.loss_terms(x0, x_t, &vec![t; x0.batch()])
    }

    pub fn loss_terms(&self, x0: &CategoricalBatch, x_t: &CategoricalBatch, ts: &[usize]) -> Result<Vec<f64>> {
        self.check_data(x0)?;
        if x0.batch() != x_t.batch() {
            return Err(Error::shape("loss_term", "x0 and x_t batch sizes differ"));
        }
        let q = q_posterior_per_sample(&self.schedule, &index_to_log_onehot(x0), &index_to_log_onehot(x_t), ts)?;
        let p = self.p_pred_per_sample(x_t, ts)?;
        Ok(sum_over_dims(&categorical_kl(&q, &p)?, x0.dims()))
    }

    /// `KL(q(x_T | x_0) || uniform)` per sample.
    pub fn prior_kl(&self, x0: &CategoricalBatch) -> Result<Vec<f64>> {
        self.check_data(x0)?;
        let q = q_marginal(&self.schedule, &index_to_log_onehot(x0), self.steps())?;
        let u = LogProbTensor::uniform(x0.batch(), x0.dims(), x0.classes());
        Ok(sum_over_dims(&categorical_kl(&q, &u)?, x0.dims()))
    }

    /// Sample `x_t ~ q(x_t | x_0)`, one step per row.
    pub fn q_sample(&self, x0: &CategoricalBatch, ts: &[usize], rng: &mut crate::Rng) -> Result<CategoricalBatch> {
        let q = q_marginal_per_sample(&self.schedule, &index_to_log_onehot(x0), ts)?;
        Ok(sample_categorical(&q, rng))
    }

    /// Evidence lower bound `log p(x_0) >= ...` in nats, one value per sample.
    pub fn elbo(
        &self,
        x0: &CategoricalBatch,
        mode: ElboMode,
        history: Option<&LossHistory>,
        rng: &mut crate::Rng,
    ) -> Result<Vec<f64>> {
        self.check_data(x0)?;
        let prior = self.prior_kl(x0)?;
        let steps = self.steps();
        let mut total = prior;
        match mode {
            ElboMode::Sampled => {
                let uniform = LossHistory::new(steps);
                let history = history.unwrap_or(&uniform);
                let mut ts = Vec::with_capacity(x0.batch());
                let mut w = Vec::with_capacity(x0.batch());
                for _ in 0..x0.batch() {
                    let (t, inv_q) = sample_t_importance(history, rng);
                    ts.push(t);
                    w.push(inv_q);
                }
                let x_t = self.q_sample(x0, &ts, rng)?;
                let terms = self.loss_terms(x0, &x_t, &ts)?;
                for ((acc, l), w) in total.iter_mut().zip(terms).zip(w) {
                    *acc += l * w;
                }
            }
            ElboMode::Full => {
                let states = self.classes().checked_pow(self.dims() as u32);
                match states {
                    Some(s) if s <= ENUMERATE_MAX_STATES && steps * s <= ENUMERATE_MAX_ROWS => {
                        // Deterministic given x_0, so computed once per distinct row.
                        let mut cache: BTreeMap<&[usize], f64> = BTreeMap::new();
                        for (b, acc) in total.iter_mut().enumerate() {
                            let row = x0.row(b);
                            let v = match cache.get(row) {
                                Some(&v) => v,
                                None => {
                                    let v = self.expected_terms_enumerated(&x0.slice_rows(b, b + 1), s)?;
                                    cache.insert(row, v);
                                    v
                                }
                            };
                            *acc += v;
                        }
                    }
                    _ => {
                        for t in 1..=steps {
                            let ts = vec![t; x0.batch()];
                            let x_t = self.q_sample(x0, &ts, rng)?;
                            for (acc, l) in total.iter_mut().zip(self.loss_terms(x0, &x_t, &ts)?) {
                                *acc += l;
                            }
                        }
                    }
                }
            }
        }
        Ok(total.into_iter().map(|v| -v).collect())
    }

    /// `sum_t E_{q(x_t|x_0)} L_t` for a single sample by enumerating every `x_t`.
    fn expected_terms_enumerated(&self, x0: &CategoricalBatch, states: usize) -> Result<f64> {
        let (dims, k, steps) = (self.dims(), self.classes(), self.steps());
        let all = enumerate_states(dims, k, states);
        let rows = steps * states;
        let mut x0_rows = Vec::with_capacity(rows * dims);
        let mut ts = Vec::with_capacity(rows);
        for t in 1..=steps {
            for _ in 0..states {
                x0_rows.extend_from_slice(x0.row(0));
                ts.push(t);
            }
        }
        let x0_rep = CategoricalBatch::new(rows, dims, k, x0_rows)?;
        let mut xt_rows = Vec::with_capacity(rows * dims);
        for _ in 0..steps {
            xt_rows.extend_from_slice(all.as_slice());
        }
        let x_t = CategoricalBatch::new(rows, dims, k, xt_rows)?;
        let terms = self.loss_terms(&x0_rep, &x_t, &ts)?;
        let mut total = 0.0;
        for t in 1..=steps {
            let marg = q_marginal(&self.schedule, &index_to_log_onehot(x0), t)?;
            for s in 0..states {
                let row = all.row(s);
                let logp: f64 = row.iter().enumerate().map(|(d, &c)| marg.row(0, d)[c]).sum();
                total += math::exp(logp) * terms[(t - 1) * states + s];
            }
        }
        Ok(total)
    }

    /// Ancestral sampling from a uniform `x_T` down to `x_0`.
    pub fn ancestral_sample(&self, n: usize, rng: &mut crate::Rng) -> Result<CategoricalBatch> {
        let (dims, k) = (self.dims(), self.classes());
        let uniform = LogProbTensor::uniform(n, dims, k);
        let mut x = sample_categorical(&uniform, rng);
        let mut data = Vec::with_capacity(n * dims);
        for t in (1..=self.steps()).rev() {
            // The reverse step depends only on the row, so work per distinct row.
            let mut index: BTreeMap<&[usize], usize> = BTreeMap::new();
            let mut unique = Vec::new();
            let slots: Vec<usize> = x
                .rows()
                .map(|row| {
                    let next = index.len();
                    *index.entry(row).or_insert_with(|| {
                        unique.extend_from_slice(row);
                        next
                    })
                })
                .collect();
            let unique = CategoricalBatch::new(index.len(), dims, k, unique)?;
            let probs = self.p_pred(&unique, t)?.probs();
            data.clear();
            for &slot in &slots {
                for d in 0..dims {
                    let p = &probs[(slot * dims + d) * k..(slot * dims + d + 1) * k];
                    let total: f64 = p.iter().sum();
                    let mut u = rng.gen::<f64>() * total;
                    let mut c = k - 1;
                    for (i, &pi) in p.iter().enumerate() {
                        if u < pi {
                            c = i;
                            break;
                        }
                        u -= pi;
                    }
                    data.push(c);
                }
            }
            x = CategoricalBatch::new(n, dims, k, data.clone())?;
        }
        Ok(x)
    }

    /// Single-pass denoising: the most likely `x_0` under `x̂_0(x_1, 1)`.
    pub fn denoise_once(&self, x1: &CategoricalBatch) -> Result<CategoricalBatch> {
        let x0_hat = self.predict_x0(x1, &vec![1; x1.batch()])?;
        let data = x0_hat.class_rows().map(argmax).collect();
        CategoricalBatch::new(x1.batch(), x1.dims(), x1.classes(), data)
    }
}

/// All `K^D` states in lexicographic order (last dimension fastest).
pub fn enumerate_states(dims: usize, classes: usize, states: usize) -> CategoricalBatch {
    let mut data = Vec::with_capacity(states * dims);
    for s in 0..states {
        let mut rest = s;
        let start = data.len();
        data.resize(start + dims, 0);
        for d in (0..dims).rev() {
            data[start + d] = rest % classes;
            rest /= classes;
        }
    }
    CategoricalBatch::new(states, dims, classes, data).expect("state enumeration is in range")
}

impl<Dn: TrainableDenoiser> DiffusionModel<Dn> {
    /// Build the stochastic training objective on `tape`.
    ///
    /// Each sample gets its own `t ~ q(t)` from `history` and contributes
    /// `L_t / q(t)`, an unbiased estimate of `sum_t L_t`.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        x0: &CategoricalBatch,
        history: &LossHistory,
        rng: &mut crate::Rng,
    ) -> Result<TrainingLoss> {
        self.check_data(x0)?;
        let (batch, dims, k) = (x0.batch(), x0.dims(), x0.classes());
        let rows = batch * dims;
        let mut ts = Vec::with_capacity(batch);
        let mut inv_q = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (t, w) = sample_t_importance(history, rng);
            ts.push(t);
            inv_q.push(w);
        }
        let x_t = self.q_sample(x0, &ts, rng)?;
        let log_x0 = index_to_log_onehot(x0);
        let log_x_t = index_to_log_onehot(&x_t);
        let q = q_posterior_per_sample(&self.schedule, &log_x0, &log_x_t, &ts)?;
        let step = q_forward_one_step_per_sample(&self.schedule, &log_x_t, &ts)?;
        let log_k = math::ln(k as f64);

        let logits = self.denoiser.logits_on_tape(tape, &x_t, &ts)?;
        let x0_hat = tape.log_softmax(logits)?;

        // Posterior with x̂_0, for rows with t >= 2.
        let mut c1 = Vec::with_capacity(rows * k);
        let mut c2 = Vec::with_capacity(rows * k);
        let mut keep = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let t = ts[r / dims];
            let (a, b) = if t == 1 {
                (0.0, LOG_ZERO)
            } else {
                (self.schedule.log_cumprod_alpha(t - 1), self.schedule.log_1_min_cumprod_alpha(t - 1) - log_k)
            };
            let m = if t == 1 { 1.0 } else { 0.0 };
            for _ in 0..k {
                c1.push(a);
                c2.push(b);
                keep.push(m);
            }
        }
        let c1 = tape.constant(Tensor::new(rows, k, c1)?);
        let c2 = tape.constant(Tensor::new(rows, k, c2)?);
        let c3 = tape.constant(Tensor::new(rows, k, step.into_vec())?);
        let drop = tape.constant(Tensor::new(rows, k, keep.iter().map(|m| 1.0 - m).collect())?);
        let keep = tape.constant(Tensor::new(rows, k, keep)?);
        let scaled = tape.add(x0_hat, c1)?;
        let floor = tape.constant(Tensor::new(rows, k, vec![0.0; rows * k])?);
        let floor = tape.add(floor, c2)?;
        let prev = tape.log_add_exp(scaled, floor)?;
        let unnormed = tape.add(prev, c3)?;
        let post = tape.log_softmax(unnormed)?;
        let a = tape.mul(x0_hat, keep)?;
        let b = tape.mul(post, drop)?;
        let log_p = tape.add(a, b)?;

        // KL(q || p) = sum_k q_k log q_k - sum_k q_k log p_k, with q constant.
        let q_lin: Vec<f64> = q.probs();
        let neg_entropy: Vec<f64> = q
            .class_rows()
            .map(|row| row.iter().map(|&v| math::exp(v) * v).sum())
            .collect();
        let q_lin = tape.constant(Tensor::new(rows, k, q_lin)?);
        let cross = tape.mul(log_p, q_lin)?;
        let cross = tape.sum_cols(cross)?;
        let neg_entropy = tape.constant(Tensor::column(neg_entropy));
        let kl = tape.sub(neg_entropy, cross)?;
        let kl = tape.reshape(kl, batch, dims)?;
        let per_sample = tape.sum_cols(kl)?;
        let weights = tape.constant(Tensor::column(inv_q.clone()));
        let weighted = tape.mul(per_sample, weights)?;
        let loss = tape.mean(weighted)?;

        let terms: Vec<f64> = tape.value(per_sample).as_slice().to_vec();
        let prior = self.prior_kl(x0)?;
        let elbo = terms.iter().zip(&inv_q).zip(&prior).map(|((l, w), p)| -(p + l * w)).collect();
        Ok(TrainingLoss { loss, timesteps: ts, terms, elbo })
    }
}
