//! Small parameterized building blocks shared by the encoders, the fusion
//! layers and the classification heads.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), d_in, d_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[1, d_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[1, d]),
            bias: store.add_zeros(format!("{name}.bias"), &[1, d]),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Two-layer position-wise network `W2 ReLU(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, store, h)
    }
}

/// Gated recurrent unit. Input weights are packed `[z | r | h]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: ParamId,
    pub recur_zr: ParamId,
    pub recur_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

/// Tape handles for one GRU's weights.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub input: Var,
    pub recur_zr: Var,
    pub recur_h: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let input = store.add_glorot(format!("{name}.input"), d_in, 3 * hidden, rng);
        let recur_zr = store.add_glorot(format!("{name}.recur_zr"), hidden, 2 * hidden, rng);
        let recur_h = store.add_glorot(format!("{name}.recur_h"), hidden, hidden, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[1, 3 * hidden]);
        Self {
            input,
            recur_zr,
            recur_h,
            bias,
            hidden,
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> GruVars {
        GruVars {
            input: tape.param(store, self.input),
            recur_zr: tape.param(store, self.recur_zr),
            recur_h: tape.param(store, self.recur_h),
            bias: tape.param(store, self.bias),
            hidden: self.hidden,
        }
    }

    /// Unrolls left to right from a zero state; returns the `n x hidden`
    /// stack of hidden states.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        let p = self.vars(tape, store);
        let n = tape.value(xs).rows();
        let projected = tape.matmul(xs, p.input)?;
        let projected = tape.add_row(projected, p.bias)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xw = tape.gather_rows(projected, vec![t].into())?;
            h = gru_step(tape, xw, h, &p)?;
            states.push(h);
        }
        tape.concat_rows(&states)
    }
}

/// One GRU update:
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `c = tanh(x Wh + (r * h) Uh + bh)`, `h' = (1 - z) * h + z * c`.
pub fn gru_cell(tape: &mut Tape, x: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let xw = tape.matmul(x, p.input)?;
    let xw = tape.add_row(xw, p.bias)?;
    gru_step(tape, xw, h_prev, p)
}

fn gru_step(tape: &mut Tape, xw: Var, h: Var, p: &GruVars) -> Result<Var> {
    let d = p.hidden;
    let hu = tape.matmul(h, p.recur_zr)?;
    let x_zr = tape.slice_cols(xw, 0, 2 * d)?;
    let zr = tape.add(x_zr, hu)?;
    let zr = tape.sigmoid(zr)?;
    let z = tape.slice_cols(zr, 0, d)?;
    let r = tape.slice_cols(zr, d, d)?;
    let rh = tape.mul(r, h)?;
    let rhu = tape.matmul(rh, p.recur_h)?;
    let x_h = tape.slice_cols(xw, 2 * d, d)?;
    let cand = tape.add(x_h, rhu)?;
    let cand = tape.tanh(cand)?;
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}
