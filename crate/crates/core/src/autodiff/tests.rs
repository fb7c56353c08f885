use alloc::vec;
use alloc::vec::Vec;

use super::nn::{Init, Linear, ResidualMlp};
use super::*;
use crate::Error;

fn leaf(store: &mut ParamStore, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
    store.add(name, Tensor::new(rows, cols, data).unwrap())
}

#[test]
fn softplus_derivative_at_zero() {
    let mut store = ParamStore::new();
    let x = leaf(&mut store, "x", 1, 1, vec![0.0]);
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let y = tape.softplus(xv).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(xv).unwrap().item(), 0.5);
}

#[test]
fn sum_of_squares_gradient() {
    let mut store = ParamStore::new();
    let x = leaf(&mut store, "x", 1, 2, vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap().for_params(&store);
    assert_eq!(g[0].as_slice(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(2, 3));
    assert_eq!(tape.backward(x).unwrap_err(), Error::NonScalarLoss { rows: 2, cols: 3 });
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(3, 2));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(tape.matmul(a, a), Err(Error::Shape { .. })));
    // Row broadcast is the one allowed mismatch.
    let r = tape.constant(Tensor::zeros(1, 3));
    assert!(tape.add(a, r).is_ok());
}

#[test]
fn constant_loss_gives_zero_grads() {
    let mut store = ParamStore::new();
    leaf(&mut store, "w", 2, 2, vec![1.0, -1.0, 0.5, 2.0]);
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(3.0));
    let g = tape.backward(c).unwrap().for_params(&store);
    assert!(g[0].as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_twice_is_identical() {
    let mut store = ParamStore::new();
    let mut rng = crate::rng_from_seed(1);
    let lin = Linear::new(&mut store, "l", 3, 2, Init::Uniform, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(4, 3, |r, c| (r as f64) - 0.3 * c as f64));
    let y = lin.forward(&mut tape, &store, x).unwrap();
    let y = tape.tanh(y).unwrap();
    let loss = tape.mean(y).unwrap();
    let a = tape.backward(loss).unwrap().for_params(&store);
    let b = tape.backward(loss).unwrap().for_params(&store);
    assert_eq!(a, b);
}

#[test]
fn linear_model_matches_least_squares_residual_formula() {
    // loss = 1/2 ||X w - y||^2  =>  grad = X^T (X w - y)
    let x = Tensor::from_fn(5, 2, |r, c| 1.0 + r as f64 * (c as f64 + 0.5));
    let y = Tensor::column(vec![1.0, -2.0, 0.5, 3.0, 0.0]);
    let mut store = ParamStore::new();
    let w = leaf(&mut store, "w", 2, 1, vec![0.3, -0.7]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(&store, w);
    let yv = tape.constant(y.clone());
    let pred = tape.matmul(xv, wv).unwrap();
    let r = tape.sub(pred, yv).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(loss).unwrap().for_params(&store);

    let resid = x.matmul(store.get(w)).unwrap();
    let resid: Vec<f64> = resid.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a - b).collect();
    let expected = x.transpose().matmul(&Tensor::column(resid)).unwrap();
    for (a, b) in g[0].as_slice().iter().zip(expected.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// One graph touching every operation on the tape.
fn kitchen_sink(tape: &mut Tape, store: &ParamStore) -> crate::Result<Var> {
    let a = tape.param(store, ParamId(0)); // (3, 4)
    let b = tape.param(store, ParamId(1)); // (4, 2)
    let bias = tape.param(store, ParamId(2)); // (1, 2)
    let row = tape.param(store, ParamId(3)); // (1, 4)

    let m = tape.matmul(a, b)?;
    let aff = tape.affine(a, b, bias)?;
    let s = tape.add(m, aff)?;
    let t = tape.tanh(s)?;
    let sg = tape.sigmoid(t)?;
    let sp = tape.softplus(aff)?;
    let e = tape.exp(sg)?;
    let lg = tape.log(e)?;
    let prod = tape.mul(lg, sp)?;
    let d = tape.sub(prod, t)?;
    let n = tape.neg(d)?;
    let sc = tape.scale(n, 0.7)?;
    let sh = tape.add_scalar(sc, 0.1)?;

    let ar = tape.add(a, row)?;
    let mr = tape.mul(ar, row)?;
    let ls = tape.log_softmax(mr)?;
    let lse = tape.log_sum_exp(mr)?;
    let rep = tape.repeat_cols(lse, 4)?;
    let lae = tape.log_add_exp(ls, rep)?;
    let g = tape.gather(lae, vec![0, 3, 1])?;
    let ir = tape.index_rows(lae, vec![2, 0, 2])?;
    let cat = tape.concat(&[ir, sh, g])?;
    let sl = tape.slice(cat, 1, 6)?;
    let rs = tape.reshape(sl, 5, 3)?;
    let cl = tape.clamp_min(rs, -0.5)?;
    let sq = tape.mul(cl, rs)?;
    let sc2 = tape.sum_cols(sq)?;
    let si = tape.silu(sc2)?;
    let lsg = tape.log_sigmoid(si)?;
    let m1 = tape.mean(lsg)?;
    let s1 = tape.sum(sc2)?;
    tape.add(m1, s1)
}

fn kitchen_store(seed: u64) -> ParamStore {
    use rand::Rng;
    let mut rng = crate::rng_from_seed(seed);
    let mut store = ParamStore::new();
    for (name, r, c) in [("a", 3, 4), ("b", 4, 2), ("bias", 1, 2), ("row", 1, 4)] {
        store.add(name, Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0)));
    }
    store
}

#[test]
fn composed_graph_matches_finite_differences() {
    for seed in 0..5 {
        let store = kitchen_store(seed);
        let res = check_gradients(&store, 1e-5, 1, kitchen_sink).unwrap();
        assert!(res.max_rel_error < 1e-4, "seed {seed}: {res:?}");
        assert_eq!(res.checked, store.numel());
    }
}

#[test]
fn replay_reproduces_values_bitwise() {
    let store = kitchen_store(9);
    let mut tape = Tape::new();
    kitchen_sink(&mut tape, &store).unwrap();
    let replayed = tape.replay().unwrap();
    for (i, t) in replayed.iter().enumerate() {
        let bits_a: Vec<u64> = t.as_slice().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tape.value(Var(i)).as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "node {i}");
    }
}

#[test]
fn identical_seeds_give_identical_gradients() {
    let run = || {
        let store = kitchen_store(4);
        let mut tape = Tape::new();
        let l = kitchen_sink(&mut tape, &store).unwrap();
        tape.backward(l).unwrap().for_params(&store)
    };
    assert_eq!(run(), run());
}

#[test]
fn residual_mlp_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = crate::rng_from_seed(2);
    let net = ResidualMlp::new(&mut store, "net", 3, 6, 2, 4, false, &mut rng);
    let x = Tensor::from_fn(5, 3, |r, c| (r as f64 * 0.37 - c as f64 * 0.21).sin());
    let res = check_gradients(&store, 1e-5, 1, |tape, s| {
        let xv = tape.constant(x.clone());
        let y = net.forward(tape, s, xv)?;
        let y = tape.log_softmax(y)?;
        let y = tape.gather(y, vec![0, 1, 2, 3, 0])?;
        tape.sum(y)
    })
    .unwrap();
    assert!(res.max_rel_error < 1e-4, "{res:?}");
}

#[test]
fn first_non_finite_names_the_op() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row_vector(vec![1.0, -1.0]));
    let y = tape.log(x).unwrap();
    let _ = tape.exp(y).unwrap();
    assert_eq!(tape.first_non_finite(), Some((1, "log")));
}

#[test]
fn adam_zero_grad_keeps_params() {
    let mut store = ParamStore::new();
    leaf(&mut store, "w", 1, 3, vec![1.0, -2.0, 0.5]);
    let before = store.clone();
    let mut opt = Adam::new(&store, 1e-3);
    opt.step(&mut store, &[Tensor::zeros(1, 3)]);
    assert_eq!(store, before);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::new();
    leaf(&mut store, "w", 1, 3, vec![1.0, -2.0, 0.5]);
    let lr = 1e-2;
    let mut opt = Adam::new(&store, lr);
    let grads = [3.0, -0.2, 1e-3];
    opt.step(&mut store, &[Tensor::row_vector(grads.to_vec())]);
    let got = store.get(ParamId(0)).as_slice();
    let expected = [1.0 - lr, -2.0 + lr, 0.5 - lr];
    for ((g, e), grad) in got.iter().zip(expected).zip(grads) {
        // |step| = lr |g| / (|g| + eps), so the deviation is at most lr eps / |g|.
        assert!((g - e).abs() <= lr * 1e-8 / f64::abs(grad) + 1e-15, "{g} vs {e}");
    }
}

#[test]
fn adam_converges_on_quadratic() {
    // f(w) = sum (w - c)^2 with minimum at c.
    let c = [1.5, -0.5];
    let mut store = ParamStore::new();
    let w = leaf(&mut store, "w", 1, 2, vec![0.0, 0.0]);
    // Multiplicative decay damps Adam's sign-like oscillation near the optimum.
    let mut opt = Adam::new(&store, 0.25);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let cv = tape.constant(Tensor::row_vector(c.to_vec()));
        let d = tape.sub(wv, cv).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap().for_params(&store);
        opt.step(&mut store, &g);
        opt.lr *= 0.97;
    }
    // Plain gradient flow oracle: the minimiser of a convex quadratic.
    for (got, want) in store.get(w).as_slice().iter().zip(c) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}
