//! Training loops, evaluation and pmf reports for both model families.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{Adam, ParamStore, Tape, Var};
use crate::data::{empirical_pmf, DatasetKind, ToyDatasetSpec};
use crate::density::{ArgmaxFlow, FlowConfig, FlowModel};
use crate::diffusion::{DiffusionModel, ElboMode, LossHistory, MlpDenoiser, MlpDenoiserConfig, TrainableDenoiser};
use crate::math;
use crate::numerics::CategoricalBatch;
use crate::schedule::{NoiseSchedule, COSINE_S};
use crate::surjections::PosteriorKind;
use crate::{Error, Result};

/// Seed for evaluation randomness; fixed so metrics are comparable across configs.
pub const EVAL_SEED: u64 = 0x5eed_e7a1;

/// Window (in epochs) of the smoothed training ELBO.
pub const SMOOTHING_EPOCHS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    ArgmaxFlow,
    MultinomialDiffusion,
    /// Independent uniform categorical; a reference point with no parameters.
    Uniform,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ArgmaxFlow => "argmax-flow",
            Self::MultinomialDiffusion => "multinomial-diffusion",
            Self::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "argmax-flow" => Ok(Self::ArgmaxFlow),
            "multinomial-diffusion" => Ok(Self::MultinomialDiffusion),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::invalid(format!(
                "unknown model '{s}' (expected argmax-flow, multinomial-diffusion or uniform)"
            ))),
        }
    }
}

/// Every knob of a training run. Round-trips through [`TrainConfig::to_text`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dataset: ToyDatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub cosine_s: f64,
    pub posterior: PosteriorKind,
    pub iwbo_samples: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub flow_layers: usize,
    pub time_embedding: usize,
    /// Round parameters (and the schedule) to 32-bit floats after every update.
    pub f32_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::MultinomialDiffusion,
            dataset: ToyDatasetSpec::eight_gaussians(8, 20_000, 2_000, 0),
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.995,
            seed: 0,
            steps: 100,
            cosine_s: COSINE_S,
            posterior: PosteriorKind::Softplus,
            iwbo_samples: 1000,
            hidden: 64,
            blocks: 2,
            flow_layers: 4,
            time_embedding: 16,
            f32_params: false,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> usize {
        self.dataset.dims()
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("iwbo_samples", self.iwbo_samples),
            ("hidden", self.hidden),
            ("flow_layers", self.flow_layers),
            ("n_train", self.dataset.n_train),
            ("length", self.dataset.length),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("`{k}` must be positive")));
        }
        if self.dataset.classes < 2 {
            return Err(Error::invalid("`classes` must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("`lr` must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("`lr_decay` must lie in (0, 1]"));
        }
        if !(self.cosine_s >= 0.0 && self.cosine_s.is_finite()) {
            return Err(Error::invalid("`cosine_s` must be non-negative"));
        }
        if self.time_embedding == 0 || self.time_embedding % 2 != 0 {
            return Err(Error::invalid("`time_embedding` must be a positive even number"));
        }
        if !(self.dataset.range.0 < self.dataset.range.1) {
            return Err(Error::invalid("`range_lo` must be below `range_hi`"));
        }
        Ok(())
    }

    /// Canonical `key = value` form, one key per line, fixed order.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("model", self.model.name().to_string());
        line("dataset", d.kind.name().to_string());
        line("classes", d.classes.to_string());
        line("length", d.length.to_string());
        line("n_train", d.n_train.to_string());
        line("n_val", d.n_val.to_string());
        line("range_lo", format!("{:?}", d.range.0));
        line("range_hi", format!("{:?}", d.range.1));
        line("data_seed", d.seed.to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr", format!("{:?}", self.lr));
        line("lr_decay", format!("{:?}", self.lr_decay));
        line("seed", self.seed.to_string());
        line("steps", self.steps.to_string());
        line("cosine_s", format!("{:?}", self.cosine_s));
        line("posterior", self.posterior.name().to_string());
        line("iwbo_samples", self.iwbo_samples.to_string());
        line("hidden", self.hidden.to_string());
        line("blocks", self.blocks.to_string());
        line("flow_layers", self.flow_layers.to_string());
        line("time_embedding", self.time_embedding.to_string());
        line("f32_params", self.f32_params.to_string());
        s
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::invalid(format!("`{key}`: cannot parse '{v}'")))
        }
        let d = &mut self.dataset;
        match key {
            "model" => self.model = ModelKind::parse(value)?,
            "dataset" => {
                d.kind = DatasetKind::parse(value)?;
                if d.kind == DatasetKind::EightGaussians {
                    d.length = 2;
                }
            }
            "classes" => d.classes = num(key, value)?,
            "length" => d.length = num(key, value)?,
            "n_train" => d.n_train = num(key, value)?,
            "n_val" => d.n_val = num(key, value)?,
            "range_lo" => d.range.0 = num(key, value)?,
            "range_hi" => d.range.1 = num(key, value)?,
            "data_seed" => d.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "steps" | "T" => self.steps = num(key, value)?,
            "cosine_s" => self.cosine_s = num(key, value)?,
            "posterior" => self.posterior = PosteriorKind::parse(value)?,
            "iwbo_samples" => self.iwbo_samples = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "flow_layers" => self.flow_layers = num(key, value)?,
            "time_embedding" => self.time_embedding = num(key, value)?,
            "f32_params" => self.f32_params = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::invalid(format!("line {}: `{key}` given twice", i + 1)));
            }
            config.set(key, value).map_err(|e| match e {
                Error::InvalidArgument(msg) => Error::invalid(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
            seen.push(key.to_string());
        }
        config.validate()?;
        Ok(config)
    }
}

/// A model of either family (or the uniform reference).
#[derive(Clone, Debug)]
pub enum Model {
    Flow(ArgmaxFlow<FlowModel>),
    Diffusion(DiffusionModel<MlpDenoiser>),
    Uniform { dims: usize, classes: usize, store: ParamStore },
}

impl Model {
    /// Fresh model; initialization draws from `rng`.
    pub fn build(config: &TrainConfig, rng: &mut crate::Rng) -> Result<Self> {
        config.validate()?;
        let (dims, classes) = (config.dims(), config.classes());
        let mut model = match config.model {
            ModelKind::ArgmaxFlow => {
                let flow = FlowConfig { layers: config.flow_layers, hidden: config.hidden, blocks: config.blocks };
                Model::Flow(ArgmaxFlow::with_flow(dims, classes, config.posterior, flow, rng)?)
            }
            ModelKind::MultinomialDiffusion => {
                let mut schedule = NoiseSchedule::cosine(config.steps, config.cosine_s)?;
                if config.f32_params {
                    schedule = schedule.to_f32_precision();
                }
                let den = MlpDenoiserConfig {
                    hidden: config.hidden,
                    blocks: config.blocks,
                    time_embedding: config.time_embedding,
                };
                Model::Diffusion(DiffusionModel::new(schedule, MlpDenoiser::new(dims, classes, den, rng)?))
            }
            ModelKind::Uniform => Model::Uniform { dims, classes, store: ParamStore::new() },
        };
        if config.f32_params {
            model.params_mut().round_to_f32();
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Flow(_) => ModelKind::ArgmaxFlow,
            Model::Diffusion(_) => ModelKind::MultinomialDiffusion,
            Model::Uniform { .. } => ModelKind::Uniform,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Model::Flow(m) => m.dims(),
            Model::Diffusion(m) => m.dims(),
            Model::Uniform { dims, .. } => *dims,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Flow(m) => m.classes(),
            Model::Diffusion(m) => m.classes(),
            Model::Uniform { classes, .. } => *classes,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Flow(m) => &m.store,
            Model::Diffusion(m) => m.denoiser.params(),
            Model::Uniform { store, .. } => store,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Flow(m) => &mut m.store,
            Model::Diffusion(m) => m.denoiser.params_mut(),
            Model::Uniform { store, .. } => store,
        }
    }

    pub fn schedule(&self) -> Option<&NoiseSchedule> {
        match self {
            Model::Diffusion(m) => Some(&m.schedule),
            _ => None,
        }
    }

    pub fn schedule_mut(&mut self) -> Option<&mut NoiseSchedule> {
        match self {
            Model::Diffusion(m) => Some(&mut m.schedule),
            _ => None,
        }
    }

    pub fn check_data(&self, x: &CategoricalBatch) -> Result<()> {
        if x.dims() != self.dims() || x.classes() != self.classes() {
            return Err(Error::shape(
                "model",
                format!(
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

    /// Single-sample lower bound on `log p(x)` per data point.
    pub fn elbo(&self, x: &CategoricalBatch, rng: &mut crate::Rng) -> Result<Vec<f64>> {
        self.check_data(x)?;
        match self {
            Model::Flow(m) => m.elbo(x, rng),
            Model::Diffusion(m) => m.elbo(x, ElboMode::Full, None, rng),
            Model::Uniform { .. } => Ok(vec![self.uniform_log_prob(); x.batch()]),
        }
    }

    /// Importance-weighted bound (argmax flows; exact for the uniform model).
    pub fn iwbo(&self, x: &CategoricalBatch, samples: usize, rng: &mut crate::Rng) -> Result<Vec<f64>> {
        self.check_data(x)?;
        match self {
            Model::Flow(m) => m.iwbo(x, samples, rng),
            Model::Diffusion(_) => Err(Error::invalid("IWBO is only available for argmax flows")),
            Model::Uniform { .. } => Ok(vec![self.uniform_log_prob(); x.batch()]),
        }
    }

    fn uniform_log_prob(&self) -> f64 {
        -(self.dims() as f64) * math::ln(self.classes() as f64)
    }

    pub fn sample(&self, n: usize, rng: &mut crate::Rng) -> Result<CategoricalBatch> {
        match self {
            Model::Flow(m) => m.sample(n, rng),
            Model::Diffusion(m) => m.ancestral_sample(n, rng),
            Model::Uniform { dims, classes, .. } => {
                let u = crate::numerics::LogProbTensor::uniform(n, *dims, *classes);
                Ok(crate::numerics::sample_categorical(&u, rng))
            }
        }
    }
}

/// Per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean minibatch objective.
    pub loss: f64,
    /// Mean per-sample training ELBO estimate, nats.
    pub elbo: f64,
    /// Mean of `elbo` over the last [`SMOOTHING_EPOCHS`] epochs.
    pub smoothed_elbo: f64,
}

/// Owns the model, optimizer and generator of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    history: LossHistory,
    rng: crate::Rng,
    epoch: usize,
    recent: VecDeque<f64>,
    log: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut rng = crate::rng_from_seed(config.seed);
        let model = Model::build(&config, &mut rng)?;
        let adam = Adam::new(model.params(), config.lr);
        let history = LossHistory::new(config.steps);
        Ok(Self { config, model, adam, history, rng, epoch: 0, recent: VecDeque::new(), log: Vec::new() })
    }

    pub fn rng(&self) -> &crate::Rng {
        &self.rng
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochStats] {
        &self.log
    }

    /// Objective and per-sample ELBO estimates for one minibatch.
    fn objective(&mut self, tape: &mut Tape, x: &CategoricalBatch) -> Result<(Var, Vec<f64>)> {
        match &self.model {
            Model::Flow(m) => {
                let e = m.elbo_on_tape(tape, x, &mut self.rng)?;
                let values = tape.value(e).as_slice().to_vec();
                let mean = tape.mean(e)?;
                Ok((tape.neg(mean)?, values))
            }
            Model::Diffusion(m) => {
                let out = m.training_loss(tape, x, &self.history, &mut self.rng)?;
                for (&t, &l) in out.timesteps.iter().zip(&out.terms) {
                    self.history.record(t, l);
                }
                Ok((out.loss, out.elbo))
            }
            Model::Uniform { .. } => Err(Error::invalid("the uniform model has nothing to train")),
        }
    }

    /// One optimizer update on `x`. Returns the objective value and per-sample ELBOs.
    pub fn step(&mut self, x: &CategoricalBatch) -> Result<(f64, Vec<f64>)> {
        self.model.check_data(x)?;
        if self.adam.steps() == 0 {
            if let Model::Flow(m) = &mut self.model {
                m.posterior.init_from_batch(&mut m.store, x)?;
                if self.config.f32_params {
                    m.store.round_to_f32();
                }
            }
        }
        let mut tape = Tape::new();
        let (loss, elbo) = self.objective(&mut tape, x)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            let op = tape.first_non_finite().map_or("loss", |(_, op)| op);
            return Err(Error::NonFinite {
                op,
                context: format!("training loss at update {}", self.adam.steps() + 1),
            });
        }
        let grads = tape.backward(loss)?.for_params(self.model.params());
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "backward",
                context: format!(
                    "gradient of `{}` at update {}",
                    self.model.params().named().nth(i).map_or("?", |(n, _)| n),
                    self.adam.steps() + 1
                ),
            });
        }
        self.adam.step(self.model.params_mut(), &grads);
        if self.config.f32_params {
            self.model.params_mut().round_to_f32();
        }
        Ok((value, elbo))
    }

    /// One pass over `data` in a fresh random order, then decay the learning rate.
    pub fn train_epoch(&mut self, data: &CategoricalBatch) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..data.batch()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut elbo_sum, mut batches, mut count) = (0.0, 0.0, 0usize, 0usize);
        let lr = self.adam.lr;
        for chunk in order.chunks(self.config.batch_size) {
            let x = data.select_rows(chunk);
            let (loss, elbo) = self.step(&x)?;
            loss_sum += loss;
            elbo_sum += elbo.iter().sum::<f64>();
            batches += 1;
            count += elbo.len();
        }
        self.epoch += 1;
        self.adam.lr *= self.config.lr_decay;
        let elbo = elbo_sum / count.max(1) as f64;
        self.recent.push_back(elbo);
        if self.recent.len() > SMOOTHING_EPOCHS {
            self.recent.pop_front();
        }
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            elbo,
            smoothed_elbo: self.recent.iter().sum::<f64>() / self.recent.len() as f64,
        };
        self.log.push(stats.clone());
        Ok(stats)
    }

    /// Train for the configured number of epochs, reporting each one.
    pub fn fit(&mut self, data: &CategoricalBatch, mut on_epoch: impl FnMut(&EpochStats)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch(data)?;
            on_epoch(&stats);
        }
        Ok(())
    }

    /// Whether the smoothed training ELBO dropped from one full window of
    /// [`SMOOTHING_EPOCHS`] epochs to the next (the run should be inspected).
    pub fn flagged(&self) -> bool {
        let windows: Vec<f64> = self
            .log
            .chunks_exact(SMOOTHING_EPOCHS)
            .map(|w| w.iter().map(|s| s.elbo).sum::<f64>() / w.len() as f64)
            .collect();
        windows.windows(2).any(|w| w[1] < w[0])
    }
}

/// Which bound [`evaluate`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Elbo,
    Iwbo,
    /// The ELBO, reported with bits per dimension as the headline unit.
    Bpd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Elbo => "elbo",
            Metric::Iwbo => "iwbo",
            Metric::Bpd => "bpd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(Metric::Elbo),
            "iwbo" => Ok(Metric::Iwbo),
            "bpd" => Ok(Metric::Bpd),
            _ => Err(Error::invalid(format!("unknown metric '{s}' (expected elbo, iwbo or bpd)"))),
        }
    }
}

/// Negative log-likelihood bound with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub metric: Metric,
    pub n: usize,
    pub dims: usize,
    /// Mean of `-bound`, nats per sample.
    pub nll: f64,
    pub nll_se: f64,
    /// Bits per dimension, `nll / (D ln 2)`.
    pub bpd: f64,
    pub bpd_se: f64,
    /// Per-sample bounds `log p(x) >= ...`, nats.
    pub bounds: Vec<f64>,
}

impl Report {
    pub fn from_bounds(metric: Metric, dims: usize, bounds: Vec<f64>) -> Self {
        let n = bounds.len();
        let (mean, se) = mean_and_se(&bounds);
        let per_dim = 1.0 / (dims as f64 * math::LN_2);
        Self { metric, n, dims, nll: -mean, nll_se: se, bpd: -mean * per_dim, bpd_se: se * per_dim, bounds }
    }
}

/// Sample mean and its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, math::sqrt(var / n as f64))
}

/// Evaluate `model` on `data`. Randomness comes only from `rng`.
pub fn evaluate(
    model: &Model,
    data: &CategoricalBatch,
    metric: Metric,
    iwbo_samples: usize,
    rng: &mut crate::Rng,
) -> Result<Report> {
    model.check_data(data)?;
    let bounds = match metric {
        Metric::Elbo | Metric::Bpd => model.elbo(data, rng)?,
        Metric::Iwbo => model.iwbo(data, iwbo_samples, rng)?,
    };
    Ok(Report::from_bounds(metric, model.dims(), bounds))
}

/// Probabilities over a `K x K` grid, row-major `[x0 * K + x1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PmfGrid {
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl PmfGrid {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.total();
        Self { classes: self.classes, probs: self.probs.iter().map(|p| p / t).collect() }
    }

    pub fn get(&self, x0: usize, x1: usize) -> f64 {
        self.probs[x0 * self.classes + x1]
    }

    /// Total-variation distance between the normalized grids.
    pub fn tv_distance(&self, other: &PmfGrid) -> Result<f64> {
        crate::data::tv_distance(&self.normalized().probs, &other.normalized().probs)
    }
}

/// Largest grid [`model_pmf`] and [`data_pmf`] accept.
pub const PMF_MAX_CELLS: usize = 10_000;

fn check_grid(dims: usize, classes: usize) -> Result<()> {
    if dims != 2 || classes * classes > PMF_MAX_CELLS {
        return Err(Error::invalid("pmf grids need D = 2 and K^2 <= 10000"));
    }
    Ok(())
}

pub fn data_pmf(data: &CategoricalBatch) -> Result<PmfGrid> {
    check_grid(data.dims(), data.classes())?;
    Ok(PmfGrid { classes: data.classes(), probs: empirical_pmf(data)? })
}

/// Model pmf on the full grid: a Monte-Carlo histogram of `samples`
/// ancestral draws for diffusion, an importance-weighted estimate with
/// `samples` posterior draws per cell for argmax flows.
pub fn model_pmf(model: &Model, samples: usize, rng: &mut crate::Rng) -> Result<PmfGrid> {
    let k = model.classes();
    check_grid(model.dims(), k)?;
    match model {
        Model::Flow(_) | Model::Uniform { .. } => {
            let cells: Vec<Vec<usize>> = (0..k * k).map(|i| vec![i / k, i % k]).collect();
            let grid = CategoricalBatch::from_rows(&cells, k)?;
            let lp = model.iwbo(&grid, samples.max(1), rng)?;
            Ok(PmfGrid { classes: k, probs: lp.iter().map(|&l| math::exp(l)).collect() })
        }
        Model::Diffusion(_) => {
            let mut counts = vec![0.0; k * k];
            let chunk = 10_000;
            let mut left = samples;
            while left > 0 {
                let n = left.min(chunk);
                for row in model.sample(n, rng)?.rows() {
                    counts[row[0] * k + row[1]] += 1.0;
                }
                left -= n;
            }
            let total = samples.max(1) as f64;
            Ok(PmfGrid { classes: k, probs: counts.iter().map(|c| c / total).collect() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            dataset: ToyDatasetSpec::eight_gaussians(8, 1_000, 300, 3),
            epochs: 2,
            batch_size: 100,
            lr: 3e-3,
            steps: 20,
            hidden: 32,
            blocks: 1,
            flow_layers: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_roundtrip_and_fail_closed() {
        let mut c = small(ModelKind::ArgmaxFlow);
        c.posterior = PosteriorKind::GumbelThreshold;
        c.lr = 0.1 + 0.2;
        let text = c.to_text();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), c);
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("epochs = 2\nepochs = 3").is_err());
        assert!(TrainConfig::from_text("epochs = two").is_err());
        assert!(TrainConfig::from_text("epochs 2").is_err());
        assert!(TrainConfig::from_text("epochs = 0").is_err());
        let c = TrainConfig::from_text("# comment\n\nmodel = argmax-flow  # trailing\n").unwrap();
        assert_eq!(c.model, ModelKind::ArgmaxFlow);
        assert_eq!(TrainConfig::default().lr_decay, 0.995);
    }

    #[test]
    fn uniform_baseline_is_log2_k_bits() {
        let c = TrainConfig { model: ModelKind::Uniform, ..small(ModelKind::Uniform) };
        let model = Model::build(&c, &mut crate::rng_from_seed(0)).unwrap();
        let (_, val) = c.dataset.generate().unwrap();
        let r = evaluate(&model, &val, Metric::Bpd, 1, &mut crate::rng_from_seed(EVAL_SEED)).unwrap();
        assert!((r.bpd - 3.0).abs() < 1e-12);
        assert!((r.nll - 2.0 * 8f64.ln()).abs() < 1e-12);
        assert!(r.bpd_se < 1e-12);
        let pmf = model_pmf(&model, 1, &mut crate::rng_from_seed(0)).unwrap();
        assert!((pmf.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_epoch_beats_untrained_model() {
        for kind in [ModelKind::ArgmaxFlow, ModelKind::MultinomialDiffusion] {
            let c = small(kind);
            let (train, val) = c.dataset.generate().unwrap();
            let mut t = Trainer::new(c).unwrap();
            let before = evaluate(&t.model, &val, Metric::Elbo, 1, &mut crate::rng_from_seed(EVAL_SEED)).unwrap();
            t.train_epoch(&train).unwrap();
            let after = evaluate(&t.model, &val, Metric::Elbo, 1, &mut crate::rng_from_seed(EVAL_SEED)).unwrap();
            assert!(after.nll < before.nll, "{kind:?}: {} -> {}", before.nll, after.nll);
        }
    }

    #[test]
    fn training_is_deterministic() {
        for kind in [ModelKind::ArgmaxFlow, ModelKind::MultinomialDiffusion] {
            let c = small(kind);
            let (train, _) = c.dataset.generate().unwrap();
            let run = || {
                let mut t = Trainer::new(c.clone()).unwrap();
                t.fit(&train, |_| {}).unwrap();
                (t.log().to_vec(), t.model.params().clone())
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let c = small(ModelKind::MultinomialDiffusion);
        let t = Trainer::new(c).unwrap();
        let x = CategoricalBatch::new(1, 2, 5, vec![0, 1]).unwrap();
        assert!(matches!(
            evaluate(&t.model, &x, Metric::Elbo, 1, &mut crate::rng_from_seed(0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn iwbo_is_tighter_than_elbo() {
        let c = small(ModelKind::ArgmaxFlow);
        let (train, val) = c.dataset.generate().unwrap();
        let mut t = Trainer::new(c).unwrap();
        t.train_epoch(&train).unwrap();
        let val = val.slice_rows(0, 100);
        let e = evaluate(&t.model, &val, Metric::Elbo, 1, &mut crate::rng_from_seed(EVAL_SEED)).unwrap();
        let iw = evaluate(&t.model, &val, Metric::Iwbo, 50, &mut crate::rng_from_seed(EVAL_SEED)).unwrap();
        assert!(iw.nll < e.nll);
        assert!((e.bpd - e.nll / (2.0 * core::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn f32_training_stays_on_f32_grid() {
        let mut c = small(ModelKind::MultinomialDiffusion);
        c.f32_params = true;
        c.epochs = 1;
        let (train, _) = c.dataset.generate().unwrap();
        let mut t = Trainer::new(c).unwrap();
        t.fit(&train, |_| {}).unwrap();
        for (_, p) in t.model.params().named() {
            assert!(p.as_slice().iter().all(|&v| v as f32 as f64 == v));
        }
    }
}
