//! Brute-force oracles: linear-space enumeration, closed forms and
//! finite differences, each checked against the log-space implementation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::nn::{Init, Linear, ResidualMlp};
use crate::autodiff::{check_gradients, Adam, ParamStore, Tape, Tensor};
use crate::density::{ArgmaxFlow, DiagonalGaussian, FlowConfig, FlowModel};
use crate::diffusion::{
    enumerate_states, q_marginal, q_posterior, DiffusionModel, ElboMode, FnDenoiser, LossHistory, MlpDenoiser,
    MlpDenoiserConfig, TrainableDenoiser,
};
use crate::math;
use crate::numerics::{argmax, index_to_log_onehot, log_sum_exp, CategoricalBatch};
use crate::schedule::NoiseSchedule;
use crate::surjections::{gumbel, Posterior, PosteriorKind};
use crate::{rng_from_seed, Result};

/// One named check: the measured error against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn below(name: impl Into<String>, max_error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), max_error, tolerance, passed: max_error <= tolerance, detail: detail.into() }
    }
}

/// Linear-space one-step matrix `Q_t = alpha_t I + (1 - alpha_t) / K`.
fn step_matrix(alpha: f64, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| (1.0 - alpha) / k as f64 + if i == j { alpha } else { 0.0 }).collect())
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..p).map(|j| (0..m).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
}

fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// Random schedules: cosine with a random offset, and random decreasing `alpha_bar`.
fn random_schedules(steps: usize, rng: &mut crate::Rng) -> Result<Vec<NoiseSchedule>> {
    let mut out = Vec::new();
    for _ in 0..3 {
        out.push(NoiseSchedule::cosine(steps, rng.gen_range(0.001..0.2))?);
    }
    let mut ab = vec![1.0];
    for _ in 0..steps {
        let last = *ab.last().expect("non-empty");
        ab.push(last * rng.gen_range(0.3..0.97));
    }
    out.push(NoiseSchedule::from_alpha_bar(steps, 0.0, ab)?);
    Ok(out)
}

/// Closed-form marginals `q(x_t | x_0)` against products of one-step kernels.
pub fn kernel_composition() -> Result<CheckResult> {
    let mut rng = rng_from_seed(101);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for k in [2, 3, 4] {
        for steps in [2, 4, 8] {
            for sched in random_schedules(steps, &mut rng)? {
                let mut composed = identity(k);
                for t in 1..=steps {
                    composed = matmul(&composed, &step_matrix(sched.alpha(t), k));
                    for x0 in 0..k {
                        let x = CategoricalBatch::new(1, 1, k, vec![x0])?;
                        let m = q_marginal(&sched, &index_to_log_onehot(&x), t)?;
                        for j in 0..k {
                            worst = worst.max((math::exp(m.row(0, 0)[j]) - composed[x0][j]).abs());
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(CheckResult::below("kernel-composition", worst, 1e-10, format!("{cases} (K, T, t, x0) cases")))
}

/// Closed-form posterior `q(x_{t-1} | x_t, x_0)` against Bayes' rule over
/// enumerated one-hot pairs; the first step must return `x_0` exactly.
pub fn posterior_bayes() -> Result<CheckResult> {
    let mut rng = rng_from_seed(102);
    let mut worst: f64 = 0.0;
    let mut exact_first = true;
    let mut cases = 0;
    for k in [2, 3, 4] {
        for steps in [2, 4, 8] {
            for sched in random_schedules(steps, &mut rng)? {
                let mut bar = vec![identity(k)];
                for t in 1..=steps {
                    let next = matmul(&bar[t - 1], &step_matrix(sched.alpha(t), k));
                    bar.push(next);
                }
                for x0 in 0..k {
                    for xt in 0..k {
                        let l0 = index_to_log_onehot(&CategoricalBatch::new(1, 1, k, vec![x0])?);
                        let lt = index_to_log_onehot(&CategoricalBatch::new(1, 1, k, vec![xt])?);
                        let first = q_posterior(&sched, &l0, &lt, 1)?;
                        exact_first &= first.as_slice().iter().zip(l0.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
                        for t in 2..=steps {
                            let q = step_matrix(sched.alpha(t), k);
                            let w: Vec<f64> = (0..k).map(|j| bar[t - 1][x0][j] * q[j][xt]).collect();
                            let z: f64 = w.iter().sum();
                            let post = q_posterior(&sched, &l0, &lt, t)?;
                            for j in 0..k {
                                worst = worst.max((math::exp(post.row(0, 0)[j]) - w[j] / z).abs());
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    let mut r = CheckResult::below("posterior-bayes", worst, 1e-10, format!("{cases} cases; first step exact: {exact_first}"));
    r.passed &= exact_first;
    Ok(r)
}

/// Exact `p(x_0)` of a diffusion model by summing over every trajectory.
pub fn exact_log_likelihood<Dn: crate::diffusion::Denoiser>(model: &DiffusionModel<Dn>) -> Result<Vec<f64>> {
    let (dims, k) = (model.dims(), model.classes());
    let states = k.pow(dims as u32);
    let all = enumerate_states(dims, k, states);
    let mut p = vec![1.0 / states as f64; states];
    for t in (1..=model.steps()).rev() {
        let pred = model.p_pred(&all, t)?;
        let mut next = vec![0.0; states];
        for (s, &ps) in p.iter().enumerate() {
            for (s2, row) in all.rows().enumerate() {
                let lp: f64 = row.iter().enumerate().map(|(d, &c)| pred.row(s, d)[c]).sum();
                next[s2] += ps * math::exp(lp);
            }
        }
        p = next;
    }
    Ok(p.iter().map(|&v| math::ln(v)).collect())
}

/// Full-mode ELBO never exceeds the exact likelihood.
pub fn exact_likelihood_bound() -> Result<CheckResult> {
    let mut rng = rng_from_seed(103);
    let mut margin = f64::INFINITY;
    let mut mass_err: f64 = 0.0;
    let mut cases = 0;
    for (k, dims, steps) in [(2usize, 1usize, 3usize), (2, 1, 3), (2, 1, 3), (3, 1, 3), (2, 2, 3)] {
        let table: Vec<f64> = (0..(steps + 1) * k.pow(dims as u32) * dims * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let width = dims * k;
        let den = FnDenoiser::new(dims, k, move |row: &[usize], t: usize| {
            let s = row.iter().fold(0, |acc, &c| acc * k + c);
            let base = (t * k.pow(dims as u32) + s) * width;
            table[base..base + width].to_vec()
        });
        let model = DiffusionModel::new(NoiseSchedule::cosine(steps, rng.gen_range(0.001..0.2))?, den);
        let exact = exact_log_likelihood(&model)?;
        mass_err = mass_err.max((exact.iter().map(|l| math::exp(*l)).sum::<f64>() - 1.0).abs());
        let states = k.pow(dims as u32);
        let all = enumerate_states(dims, k, states);
        let elbo = model.elbo(&all, ElboMode::Full, None, &mut rng)?;
        for (e, x) in elbo.iter().zip(&exact) {
            margin = margin.min(x - e);
            cases += 1;
        }
    }
    let mut r = CheckResult::below(
        "exact-likelihood-bound",
        (-margin).max(0.0),
        1e-9,
        format!("min(log p - ELBO) = {margin:.3e} over {cases} states; |sum p - 1| = {mass_err:.1e}"),
    );
    r.passed &= mass_err < 1e-12;
    Ok(r)
}

fn perturbed(store: &mut ParamStore, scale: f64, rng: &mut crate::Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).as_mut_slice() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// `samples` posterior draws per kind: every draw must land in the argmax
/// region of its class vector with a finite log density.
pub fn argmax_constraint(samples: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (dims, k) = (4, 5);
    for kind in [PosteriorKind::Softplus, PosteriorKind::Gumbel, PosteriorKind::GumbelThreshold] {
        let mut rng = rng_from_seed(104);
        let mut store = ParamStore::new();
        let post = Posterior::new(kind, &mut store, dims, k)?;
        let init: Vec<Vec<usize>> = (0..64).map(|_| (0..dims).map(|_| rng.gen_range(0..k)).collect()).collect();
        post.init_from_batch(&mut store, &CategoricalBatch::from_rows(&init, k)?)?;
        // Wide parameters push mass far from the threshold on both sides.
        perturbed(&mut store, 3.0, &mut rng);
        let (mut violations, mut non_finite, mut drawn) = (0usize, 0usize, 0usize);
        while drawn < samples {
            let n = (samples - drawn).min(2_000);
            let rows: Vec<Vec<usize>> = (0..n).map(|_| (0..dims).map(|_| rng.gen_range(0..k)).collect()).collect();
            let x = CategoricalBatch::from_rows(&rows, k)?;
            let mut tape = Tape::new();
            match post.sample_on_tape(&mut tape, &store, &x, &mut rng) {
                Ok(s) => {
                    let v = tape.value(s.v);
                    for (b, row) in rows.iter().enumerate() {
                        let vr = v.row(b);
                        if row.iter().enumerate().any(|(d, &c)| argmax(&vr[d * k..(d + 1) * k]) != c) {
                            violations += 1;
                        }
                    }
                    non_finite += tape.value(s.log_q).as_slice().iter().filter(|l| !l.is_finite()).count();
                }
                Err(_) => violations += n,
            }
            drawn += n;
        }
        let mut r = CheckResult::below(
            format!("argmax-constraint/{}", kind.name()),
            violations as f64,
            0.0,
            format!("{drawn} draws of D={dims}, K={k}; {violations} violations, {non_finite} non-finite log q"),
        );
        r.passed &= non_finite == 0;
        out.push(r);
    }
    Ok(out)
}

/// Kolmogorov distribution tail `P(sqrt(n) D > x)` with the usual small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = math::sqrt(n as f64);
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in 1..=100 {
        let term = math::exp(-2.0 * (j * j) as f64 * lambda * lambda);
        p += if j % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Gumbel-max: argmax frequencies follow `softmax(phi)`, and the max of
/// independent Gumbels is `Gumbel(logsumexp(phi))`.
pub fn gumbel_laws(samples: usize) -> Result<Vec<CheckResult>> {
    let mut rng = rng_from_seed(105);
    let phi = [0.3, -1.2, 1.5, 0.0, -0.4];
    let lse = log_sum_exp(&phi);
    let mut counts = [0usize; 5];
    let mut maxima = Vec::with_capacity(samples);
    for _ in 0..samples {
        let g: Vec<f64> = phi.iter().map(|&p| gumbel::sample(p, &mut rng)).collect();
        let i = argmax(&g);
        counts[i] += 1;
        maxima.push(g[i]);
    }
    let n = samples as f64;
    let mut worst_z: f64 = 0.0;
    for (c, &p) in counts.iter().zip(&phi) {
        let prob = math::exp(p - lse);
        let sd = math::sqrt(prob * (1.0 - prob) / n);
        worst_z = worst_z.max((*c as f64 / n - prob).abs() / sd);
    }
    maxima.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, &v) in maxima.iter().enumerate() {
        let f = gumbel::cdf(v, lse);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    let p = ks_p_value(d, samples);
    let ks = CheckResult {
        name: "gumbel-max-ks".to_string(),
        max_error: d,
        tolerance: 1.628 / math::sqrt(n),
        passed: p > 0.01,
        detail: format!("KS D = {d:.2e}, p = {p:.3}, n = {samples}"),
    };
    Ok(vec![
        CheckResult::below("gumbel-argmax-frequencies", worst_z, 4.0, format!("max |z| over {} classes, n = {samples}", phi.len())),
        ks,
    ])
}

/// `P(v_0 > v_1)` for `v ~ N(mean, I)` in two dimensions.
pub fn gaussian_orthant_probability(mean: [f64; 2]) -> f64 {
    math::normal_cdf((mean[0] - mean[1]) / core::f64::consts::SQRT_2)
}

/// Bounds under a fixed Gaussian `p(v)` with mean `(1, 0)`, `K = 2`, `D = 1`,
/// after fitting the posterior: the ELBO must not exceed `log P(x)` and the
/// IWBO must approach it.
pub fn analytic_argmax_bound(
    kind: PosteriorKind,
    draws: usize,
    iwbo_samples: usize,
    iwbo_points: usize,
) -> Result<Vec<CheckResult>> {
    let mean = [1.0, 0.0];
    let density = DiagonalGaussian::new(mean.to_vec(), vec![0.0, 0.0])?;
    let mut model = ArgmaxFlow::new(density, ParamStore::new(), 1, 2, kind)?;
    let mut rng = rng_from_seed(106);
    let p0 = gaussian_orthant_probability(mean);
    let both = CategoricalBatch::new(256, 1, 2, (0..256).map(|i| usize::from(i % 4 == 3)).collect())?;
    model.posterior.init_from_batch(&mut model.store, &both)?;
    let mut adam = Adam::new(&model.store, 0.02);
    for _ in 0..600 {
        let mut tape = Tape::new();
        let e = model.elbo_on_tape(&mut tape, &both, &mut rng)?;
        let m = tape.mean(e)?;
        let loss = tape.neg(m)?;
        let grads = tape.backward(loss)?.for_params(&model.store);
        adam.step(&mut model.store, &grads);
    }
    let mut out = Vec::new();
    for (class, p) in [(0usize, p0), (1, 1.0 - p0)] {
        let exact = math::ln(p);
        let x = CategoricalBatch::new(draws, 1, 2, vec![class; draws])?;
        let e = model.elbo(&x, &mut rng)?;
        let (m, se) = crate::train::mean_and_se(&e);
        out.push(CheckResult::below(
            format!("analytic-elbo/{}/x={class}", kind.name()),
            (m - exact).max(0.0),
            3.0 * se,
            format!("mean ELBO {m:.4} (SE {se:.1e}) vs log P {exact:.4}"),
        ));
        let x = CategoricalBatch::new(iwbo_points, 1, 2, vec![class; iwbo_points])?;
        let iw = model.iwbo(&x, iwbo_samples, &mut rng)?;
        let (m_iw, _) = crate::train::mean_and_se(&iw);
        out.push(CheckResult::below(
            format!("analytic-iwbo/{}/x={class}", kind.name()),
            (m_iw - exact).abs(),
            0.02,
            format!("mean IWBO(S={iwbo_samples}) {m_iw:.4} over {iwbo_points} points vs log P {exact:.4}"),
        ));
    }
    Ok(out)
}

/// Central finite differences for every trainable block.
pub fn gradient_checks() -> Result<Vec<CheckResult>> {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let mut out = Vec::new();
    let mut rng = rng_from_seed(107);
    let mut push = |name: &str, r: crate::autodiff::GradCheck| {
        out.push(CheckResult::below(format!("gradcheck/{name}"), r.max_rel_error, TOL, format!("{} coordinates", r.checked)));
    };

    let x = Tensor::from_fn(4, 3, |r, c| math::sin((r * 3 + c) as f64));
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 2, Init::Uniform, &mut rng);
        perturbed(&mut store, 0.5, &mut rng);
        push(
            "linear",
            check_gradients(&store, H, 1, |tape, s| {
                let xv = tape.constant(x.clone());
                let y = lin.forward(tape, s, xv)?;
                let y = tape.tanh(y)?;
                tape.sum(y)
            })?,
        );
    }
    {
        let mut store = ParamStore::new();
        let mlp = ResidualMlp::new(&mut store, "mlp", 3, 5, 2, 2, false, &mut rng);
        perturbed(&mut store, 0.3, &mut rng);
        push(
            "residual-mlp",
            check_gradients(&store, H, 1, |tape, s| {
                let xv = tape.constant(x.clone());
                let y = mlp.forward(tape, s, xv)?;
                let y = tape.log_softmax(y)?;
                tape.sum(y)
            })?,
        );
    }
    {
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, 4, FlowConfig { layers: 2, hidden: 5, blocks: 1 }, &mut rng)?;
        perturbed(&mut store, 0.3, &mut rng);
        let v = Tensor::from_fn(3, 4, |r, c| math::cos((r * 4 + c) as f64 * 0.7));
        push(
            "flow-log-prob",
            check_gradients(&store, H, 1, |tape, s| {
                let vv = tape.constant(v.clone());
                let lp = crate::density::Density::log_prob_on_tape(&flow, tape, s, vv)?;
                tape.sum(lp)
            })?,
        );
    }
    let xc = CategoricalBatch::new(3, 2, 3, vec![0, 2, 1, 1, 2, 0])?;
    for kind in [
        PosteriorKind::Softplus,
        PosteriorKind::Gumbel,
        PosteriorKind::GumbelThreshold,
        PosteriorKind::VariationalDequant,
    ] {
        let mut store = ParamStore::new();
        let post = Posterior::new(kind, &mut store, 2, 3)?;
        perturbed(&mut store, 0.5, &mut rng);
        push(
            &format!("posterior/{}", kind.name()),
            check_gradients(&store, H, 1, |tape, s| {
                let sample = post.sample_on_tape(tape, s, &xc, &mut rng_from_seed(7))?;
                let v2 = tape.mul(sample.v, sample.v)?;
                let v2 = tape.sum(v2)?;
                let v2 = tape.scale(v2, 0.1)?;
                let lq = tape.sum(sample.log_q)?;
                tape.add(lq, v2)
            })?,
        );
    }
    for kind in [PosteriorKind::Softplus, PosteriorKind::Gumbel, PosteriorKind::GumbelThreshold] {
        let mut model = ArgmaxFlow::with_flow(2, 3, kind, FlowConfig { layers: 1, hidden: 4, blocks: 1 }, &mut rng)?;
        perturbed(&mut model.store, 0.2, &mut rng);
        let store = model.store.clone();
        push(
            &format!("argmax-flow-elbo/{}", kind.name()),
            check_gradients(&store, H, 1, |tape, s| {
                let mut m = model.clone();
                m.store = s.clone();
                let e = m.elbo_on_tape(tape, &xc, &mut rng_from_seed(8))?;
                tape.mean(e)
            })?,
        );
    }
    {
        let cfg = MlpDenoiserConfig { hidden: 6, blocks: 1, time_embedding: 4 };
        let mut den = MlpDenoiser::new(2, 3, cfg, &mut rng)?;
        perturbed(den.params_mut(), 0.3, &mut rng);
        let model = DiffusionModel::new(NoiseSchedule::cosine(5, 0.008)?, den);
        let x0 = CategoricalBatch::new(4, 2, 3, vec![0, 1, 2, 2, 1, 1, 0, 0])?;
        let store = model.denoiser.params().clone();
        push(
            "diffusion-training-loss",
            check_gradients(&store, H, 1, |tape, s| {
                let mut m = model.clone();
                *m.denoiser.params_mut() = s.clone();
                Ok(m.training_loss(tape, &x0, &LossHistory::new(5), &mut rng_from_seed(9))?.loss)
            })?,
        );
    }
    Ok(out)
}

/// The whole suite. `quick` keeps only the enumeration oracles and gradient checks.
pub fn run_suite(quick: bool) -> Result<Vec<CheckResult>> {
    let mut out = vec![kernel_composition()?, posterior_bayes()?, exact_likelihood_bound()?];
    out.extend(gradient_checks()?);
    if !quick {
        out.extend(argmax_constraint(10_000)?);
        out.extend(gumbel_laws(100_000)?);
        out.extend(analytic_argmax_bound(PosteriorKind::Softplus, 10_000, 1000, 20)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_oracles_pass() {
        for r in [kernel_composition().unwrap(), posterior_bayes().unwrap(), exact_likelihood_bound().unwrap()] {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn gradient_checks_pass() {
        for r in gradient_checks().unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn small_sampling_checks_pass() {
        for r in argmax_constraint(500).unwrap().into_iter().chain(gumbel_laws(5_000).unwrap()) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn ks_p_value_limits() {
        assert_eq!(ks_p_value(0.0, 100), 1.0);
        assert!(ks_p_value(0.5, 1000) < 1e-10);
        // The 5% critical value of the limiting distribution is about 1.358.
        let p = ks_p_value(1.358 / (10_000f64).sqrt(), 10_000);
        assert!((p - 0.05).abs() < 0.005, "{p}");
    }

    #[test]
    fn exact_likelihood_is_normalized_for_the_uniform_denoiser() {
        let den = FnDenoiser::new(1, 3, |_: &[usize], _| vec![0.0; 3]);
        let model = DiffusionModel::new(NoiseSchedule::cosine(3, 0.008).unwrap(), den);
        for l in exact_log_likelihood(&model).unwrap() {
            assert!((l + 3f64.ln()).abs() < 1e-12);
        }
    }
}
