//! Dense real arrays, a reverse-mode tape for the captioner's layers, and
//! finite-difference helpers.

mod tape;
mod tensor;

pub use tape::{log_softmax, logsumexp, Gradients, GruVars, Tape, Var};
pub use tensor::{Tensor, MAGIC};

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Deterministic generator used for parameter init and data synthesis.
pub fn seeded_rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Parameters of one gated recurrent cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    /// `[3H, input]`, rows stacked reset / update / candidate.
    pub w_input: Tensor,
    /// `[3H, H]`.
    pub w_hidden: Tensor,
    pub b_input: Tensor,
    pub b_hidden: Tensor,
}

impl GruCell {
    pub fn hidden(&self) -> usize {
        self.b_hidden.len() / 3
    }

    pub fn input(&self) -> usize {
        self.w_input.cols()
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[3 * hidden, input]),
            w_hidden: Tensor::zeros(&[3 * hidden, hidden]),
            b_input: Tensor::zeros(&[3 * hidden]),
            b_hidden: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> GruVars {
        GruVars {
            w_input: tape.leaf(&self.w_input, requires_grad),
            w_hidden: tape.leaf(&self.w_hidden, requires_grad),
            b_input: tape.leaf(&self.b_input, requires_grad),
            b_hidden: tape.leaf(&self.b_hidden, requires_grad),
        }
    }
}

/// `W x + b` for a rank-1 `x`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.leaf(x, false),
        tape.leaf(w, false),
        tape.leaf(b, false),
    );
    let y = tape.dense(xv, wv, bv)?;
    Tensor::vector(tape.value(y).to_vec())
}

/// One recurrent update of `h` given input `x`.
pub fn gru_step(x: &Tensor, h: &Tensor, cell: &GruCell) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let hv = tape.leaf(h, false);
    let vars = cell.on_tape(&mut tape, false);
    let out = tape.gru_step(xv, hv, vars)?;
    Tensor::vector(tape.value(out).to_vec())
}

/// Central-difference derivative of `f` along coordinate `index` of `x`.
pub fn central_difference<F>(x: &[f64], index: usize, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    probe[index] = x[index] + h;
    let plus = f(&probe)?;
    probe[index] = x[index] - h;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
