use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catflow::checkpoint::Checkpoint;
use catflow::report::{self, MetricRow};
use catflow::{dataset, load_config, Error, Result};
use catflow_core::data::{self, DatasetKind, ToyDatasetSpec, ALPHABET, DEFAULT_PATTERNS, DEFAULT_RANGE};
use catflow_core::numerics::CategoricalBatch;
use catflow_core::train::{self, Metric, Model, ModelKind, TrainConfig, Trainer, EVAL_SEED};
use catflow_core::{rng_from_seed, verify, Rng};

#[derive(Parser)]
#[command(name = "catflow", version, about = "Argmax flows and multinomial diffusion for categorical data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Draw samples in the dataset file format.
    Sample(SampleArgs),
    /// Report a likelihood bound in nats and bits per dimension.
    Eval(EvalArgs),
    /// Corrupt text and restore it with a single denoising pass.
    Denoise(DenoiseArgs),
    /// Generate a toy dataset file.
    MakeData(MakeDataArgs),
    /// Run the brute-force oracle suite.
    Verify(VerifyArgs),
    /// Write a 2-D pmf grid as CSV and PGM.
    Pmf(PmfArgs),
}

/// Config file plus per-flag overrides.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` config file; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// argmax-flow, multinomial-diffusion or uniform.
    #[arg(long)]
    model: Option<String>,
    /// softplus, gumbel, gumbel-threshold, uniform-deq or variational-deq.
    #[arg(long)]
    posterior: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps.
    #[arg(long = "T", value_name = "N")]
    steps: Option<usize>,
    #[arg(long, value_name = "N")]
    iwbo_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Classes per dimension of the generated dataset.
    #[arg(long)]
    classes: Option<usize>,
    /// Line length of the generated character corpus.
    #[arg(long)]
    length: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => load_config(path)?,
            None => TrainConfig::default(),
        };
        let overrides: [(&str, Option<String>); 11] = [
            ("model", self.model.clone()),
            ("posterior", self.posterior.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("iwbo_samples", self.iwbo_samples.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("classes", self.classes.map(|v| v.to_string())),
            ("length", self.length.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, &v).map_err(usage)?;
            }
        }
        config.validate().map_err(usage)?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training data file; without it the configured toy dataset is generated.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Validation data file.
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Append per-epoch metrics to this CSV.
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Sample from a trained model; otherwise a freshly initialized one.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(short, long, default_value_t = 16)]
    n: usize,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Data file; defaults to the checkpoint's validation split.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// elbo, iwbo or bpd.
    #[arg(long, default_value = "elbo")]
    metric: String,
    #[arg(long, value_name = "N")]
    iwbo_samples: Option<usize>,
    #[arg(long, default_value_t = EVAL_SEED)]
    seed: u64,
}

#[derive(Args)]
struct DenoiseArgs {
    /// A trained multinomial-diffusion checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Clean lines to corrupt; defaults to the checkpoint's validation split.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// A single line of text instead of a data file.
    #[arg(long, conflicts_with = "dataset")]
    text: Option<String>,
    /// Fraction of positions to corrupt (default 0.05, or 0 with --text).
    #[arg(long)]
    rate: Option<f64>,
    /// Lines to print.
    #[arg(long, default_value_t = 5)]
    show: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MakeDataArgs {
    /// eight-gaussians or char-corpus.
    #[arg(long, default_value = "eight-gaussians")]
    kind: String,
    #[arg(short, long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Only the enumeration oracles and gradient checks.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct PmfArgs {
    /// Model to sample; without it only the data pmf is written.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Reference data; defaults to the checkpoint's training split.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Ancestral samples (diffusion) or posterior draws per cell (flow).
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    seed: u64,
    /// Output prefix; `.csv` and `.pgm` are appended.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
    /// Pixels per grid cell.
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

fn usage(e: impl std::fmt::Display) -> Error {
    Error::Usage(e.to_string())
}

fn read_data(path: &Path) -> Result<CategoricalBatch> {
    Ok(dataset::read(path)?.data)
}

fn write_or_print(out: Option<&Path>, data: &CategoricalBatch, seed: u64) -> Result<()> {
    match out {
        Some(path) => dataset::write(path, data, seed),
        None => {
            let stdout = io::stdout();
            dataset::write_to(stdout.lock(), data, seed).map_err(|source| Error::Io { path: "<stdout>".into(), source })
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = args.config.build()?;
    let (train_data, val) = match &args.dataset {
        Some(path) => {
            let d = read_data(path)?;
            config.dataset = ToyDatasetSpec::external(d.classes(), d.dims());
            config.dataset.n_train = d.batch();
            let val = args.val.as_deref().map(read_data).transpose()?;
            (d, val)
        }
        None => {
            let (t, v) = config.dataset.generate()?;
            let val = match args.val.as_deref() {
                Some(p) => Some(read_data(p)?),
                None => (v.batch() > 0).then_some(v),
            };
            (t, val)
        }
    };
    let mut trainer = Trainer::new(config.clone())?;
    trainer.model.check_data(&train_data)?;
    let mut rows: Vec<(usize, &'static str, &'static str, f64)> = Vec::new();
    if config.model != ModelKind::Uniform {
        trainer.fit(&train_data, |s| {
            println!(
                "epoch {:>4}  lr {:.3e}  loss {:.4}  elbo {:.4}  smoothed {:.4}",
                s.epoch, s.lr, s.loss, s.elbo, s.smoothed_elbo
            );
            rows.push((s.epoch, "train", "loss", s.loss));
            rows.push((s.epoch, "train", "elbo", s.elbo));
        })?;
        if trainer.flagged() {
            eprintln!("warning: smoothed training ELBO got worse over the last window");
        }
    }
    let epoch = trainer.epochs_done();
    if let Some(val) = &val {
        let mut metrics = vec![Metric::Elbo];
        if config.model == ModelKind::ArgmaxFlow {
            metrics.push(Metric::Iwbo);
        }
        for metric in metrics {
            let mut rng = rng_from_seed(EVAL_SEED);
            let r = train::evaluate(&trainer.model, val, metric, config.iwbo_samples, &mut rng)?;
            println!(
                "val {:<4}  nll {:.4} ± {:.4} nats  bpd {:.4} ± {:.4}",
                metric.name(),
                r.nll,
                r.nll_se,
                r.bpd,
                r.bpd_se
            );
            let (nll, bpd) = match metric {
                Metric::Iwbo => ("nll_iwbo", "bpd_iwbo"),
                _ => ("nll_elbo", "bpd_elbo"),
            };
            rows.push((epoch, "val", nll, r.nll));
            rows.push((epoch, "val", bpd, r.bpd));
        }
    }
    if let Some(path) = &args.metrics {
        let rows: Vec<MetricRow<'_>> =
            rows.iter().map(|&(epoch, split, metric, value)| MetricRow { epoch, split, metric, value }).collect();
        report::append_metrics(path, &rows)?;
    }
    let ck = Checkpoint { config, rng: trainer.rng().clone(), model: trainer.model };
    ck.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let (model, mut rng, seed) = match &args.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            match args.config.seed {
                Some(s) => (ck.model, rng_from_seed(s), s),
                None => (ck.model, ck.rng, ck.config.seed),
            }
        }
        None => {
            let config = args.config.build()?;
            let mut rng = rng_from_seed(config.seed);
            (Model::build(&config, &mut rng)?, rng, config.seed)
        }
    };
    let x = model.sample(args.n, &mut rng)?;
    write_or_print(args.out.as_deref(), &x, seed)
}

/// The split a checkpoint was trained against, regenerated from its config.
fn config_split(ck: &Checkpoint, val: bool, what: &str) -> Result<CategoricalBatch> {
    if ck.config.dataset.kind == DatasetKind::External {
        return Err(usage(format!("the checkpoint was trained on a data file; pass --dataset for {what}")));
    }
    let (t, v) = ck.config.dataset.generate()?;
    Ok(if val { v } else { t })
}

fn eval(args: EvalArgs) -> Result<()> {
    let metric = Metric::parse(&args.metric).map_err(usage)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let data = match &args.dataset {
        Some(p) => read_data(p)?,
        None => config_split(&ck, true, "evaluation")?,
    };
    let samples = args.iwbo_samples.unwrap_or(ck.config.iwbo_samples);
    let mut rng = rng_from_seed(args.seed);
    let r = train::evaluate(&ck.model, &data, metric, samples, &mut rng)?;
    println!("model {}  metric {}  n {}  D {}", ck.model.kind().name(), metric.name(), r.n, r.dims);
    println!("nll {:.6} ± {:.6} nats", r.nll, r.nll_se);
    println!("bpd {:.6} ± {:.6}", r.bpd, r.bpd_se);
    Ok(())
}

fn render(row: &[usize], classes: usize) -> String {
    if classes == ALPHABET.len() {
        data::decode_text(row)
    } else {
        row.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }
}

fn denoise(args: DenoiseArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let Model::Diffusion(model) = &ck.model else {
        return Err(usage("denoise needs a multinomial-diffusion checkpoint"));
    };
    let clean = match (&args.text, &args.dataset) {
        (Some(text), _) => {
            let row = data::encode_text(text).map_err(usage)?;
            if row.len() != model.dims() {
                return Err(usage(format!("--text has {} characters but the model expects {}", row.len(), model.dims())));
            }
            CategoricalBatch::new(1, row.len(), model.classes(), row)?
        }
        (None, Some(p)) => read_data(p)?,
        (None, None) => config_split(&ck, true, "denoising")?,
    };
    ck.model.check_data(&clean)?;
    let rate = args.rate.unwrap_or(if args.text.is_some() { 0.0 } else { 0.05 });
    if !(0.0..=1.0).contains(&rate) {
        return Err(usage("--rate must lie in [0, 1]"));
    }
    let mut rng: Rng = rng_from_seed(args.seed);
    let noisy = data::corrupt(&clean, rate, &mut rng)?;
    let fixed = model.denoise_once(&noisy)?;
    let k = model.classes();
    let mut out = io::stdout().lock();
    let pipe = |e| Error::Io { path: "<stdout>".into(), source: e };
    for b in 0..clean.batch().min(args.show) {
        writeln!(out, "original:  {}", render(clean.row(b), k)).map_err(pipe)?;
        writeln!(out, "corrupted: {}", render(noisy.row(b), k)).map_err(pipe)?;
        writeln!(out, "suggested: {}", render(fixed.row(b), k)).map_err(pipe)?;
        writeln!(out).map_err(pipe)?;
    }
    let (mut corrupted, mut restored, mut kept) = (0usize, 0usize, 0usize);
    for ((c, n), f) in clean.as_slice().iter().zip(noisy.as_slice()).zip(fixed.as_slice()) {
        if c != n {
            corrupted += 1;
            restored += usize::from(f == c);
        } else {
            kept += usize::from(f == c);
        }
    }
    let clean_total = clean.as_slice().len() - corrupted;
    let pct = |a: usize, b: usize| if b == 0 { 100.0 } else { 100.0 * a as f64 / b as f64 };
    writeln!(
        out,
        "restored {restored}/{corrupted} corrupted positions ({:.1}%); kept {kept}/{clean_total} clean positions ({:.1}%)",
        pct(restored, corrupted),
        pct(kept, clean_total)
    )
    .map_err(pipe)?;
    Ok(())
}

fn make_data(args: MakeDataArgs) -> Result<()> {
    let mut rng = rng_from_seed(args.seed);
    let x = match DatasetKind::parse(&args.kind).map_err(usage)? {
        DatasetKind::EightGaussians => data::eight_gaussians(args.n, args.classes, DEFAULT_RANGE, &mut rng)?,
        DatasetKind::CharCorpus => data::char_corpus(DEFAULT_PATTERNS, args.length, args.n, &mut rng)?,
        DatasetKind::External => return Err(usage("make-data generates eight-gaussians or char-corpus")),
    };
    write_or_print(args.out.as_deref(), &x, args.seed)
}

fn run_verify(args: VerifyArgs) -> Result<bool> {
    let results = verify::run_suite(args.quick)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{}  {:<width$}  max_error {:.3e}  tol {:.1e}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn pmf(args: PmfArgs) -> Result<()> {
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let reference = match (&args.dataset, &ck) {
        (Some(p), _) => Some(read_data(p)?),
        (None, Some(ck)) if ck.config.dataset.kind != DatasetKind::External => Some(config_split(ck, false, "pmf")?),
        _ => None,
    };
    let data_grid = reference.as_ref().map(train::data_pmf).transpose()?;
    let grid = match &ck {
        Some(ck) => {
            let mut rng = rng_from_seed(args.seed);
            train::model_pmf(&ck.model, args.samples, &mut rng)?
        }
        None => data_grid.clone().ok_or_else(|| usage("pmf needs --checkpoint or --dataset"))?,
    };
    report::write_pmf(&args.out, &grid, args.scale)?;
    println!("total mass {:.6}", grid.total());
    if let (Some(_), Some(d)) = (&ck, &data_grid) {
        println!("tv distance to data {:.6}", grid.tv_distance(d)?);
    }
    println!("wrote {} and {}", args.out.with_extension("csv").display(), args.out.with_extension("pgm").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Sample(a) => sample(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Denoise(a) => denoise(a).map(|_| true),
        Command::MakeData(a) => make_data(a).map(|_| true),
        Command::Verify(a) => run_verify(a),
        Command::Pmf(a) => pmf(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ Error::Usage(_)) => {
            eprintln!("catflow: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("catflow: {e}");
            ExitCode::FAILURE
        }
    }
}
