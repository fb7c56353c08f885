use alloc::vec::Vec;

use super::{ParamStore, Tape, Var};
use crate::Result;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compare analytic gradients of the scalar `loss` against central
/// differences with step `h`, for every `stride`-th scalar parameter.
///
/// The numeric side only evaluates forward values, so it is independent of
/// the backward rules under test.
pub fn check_gradients(
    store: &ParamStore,
    h: f64,
    stride: usize,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let analytic = tape.backward(out)?.for_params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.value(v).item())
    };

    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut counter = 0usize;
    for (i, id) in ids.into_iter().enumerate() {
        for j in 0..store.get(id).len() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = store.get(id).as_slice()[j];
            probe.get_mut(id).as_mut_slice()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).as_mut_slice()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].as_slice()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_error, checked })
}
