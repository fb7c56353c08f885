//! Small layers built from tape operations.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::math;
use crate::Result;

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    Uniform,
    /// All zeros.
    Zeros,
}

/// `y = x W + b`, `W` of shape `(inputs, outputs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut crate::Rng,
    ) -> Self {
        let bound = 1.0 / math::sqrt(inputs.max(1) as f64);
        let w = match init {
            Init::Uniform => Tensor::from_fn(inputs, outputs, |_, _| rng.gen_range(-bound..bound)),
            Init::Zeros => Tensor::zeros(inputs, outputs),
        };
        let weight = store.add(&format!("{name}.weight"), w);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(1, outputs));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }
}

/// Residual multilayer perceptron with SiLU activations:
/// `h = W_in x`, then `h += W2 silu(W1 silu(h))` per block, then `W_out silu(h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

impl ResidualMlp {
    /// `zero_output` starts the network at exactly zero output.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        blocks: usize,
        outputs: usize,
        zero_output: bool,
        rng: &mut crate::Rng,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.in"), inputs, hidden, Init::Uniform, rng);
        let blocks = (0..blocks)
            .map(|i| {
                let a = Linear::new(store, &format!("{name}.block{i}.0"), hidden, hidden, Init::Uniform, rng);
                let b = Linear::new(store, &format!("{name}.block{i}.1"), hidden, hidden, Init::Uniform, rng);
                (a, b)
            })
            .collect();
        let init = if zero_output { Init::Zeros } else { Init::Uniform };
        let output = Linear::new(store, &format!("{name}.out"), hidden, outputs, init, rng);
        Self { input, blocks, output }
    }

    pub fn inputs(&self) -> usize {
        self.input.inputs
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, store, x)?;
        for (a, b) in &self.blocks {
            let z = tape.silu(h)?;
            let z = a.forward(tape, store, z)?;
            let z = tape.silu(z)?;
            let z = b.forward(tape, store, z)?;
            h = tape.add(h, z)?;
        }
        let h = tape.silu(h)?;
        self.output.forward(tape, store, h)
    }
}
