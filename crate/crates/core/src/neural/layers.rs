//! Parameterized building blocks composed from tape primitives.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `x · W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.insert_uniform(format!("{name}.weight"), fan_in, fan_out, glorot(fan_in, fan_out), rng)?,
            bias: store.insert_uniform(format!("{name}.bias"), 1, fan_out, 0.0, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::register(store, &format!("{name}.hidden"), fan_in, hidden, rng)?,
            output: Linear::register(store, &format!("{name}.output"), hidden, fan_out, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, store, h)
    }
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("dimension {dim} not divisible by {heads} heads")));
        }
        let b = glorot(dim, dim);
        Ok(Self {
            query: store.insert_uniform(format!("{name}.query"), dim, dim, b, rng)?,
            key: store.insert_uniform(format!("{name}.key"), dim, dim, b, rng)?,
            value: store.insert_uniform(format!("{name}.value"), dim, dim, b, rng)?,
            output: store.insert_uniform(format!("{name}.output"), dim, dim, b, rng)?,
            heads,
        })
    }

    /// Attends over the rows of `seq` (`n×d`).
    ///
    /// `mask[i] == false` hides position `i`: it receives zero attention
    /// weight from every query and its own output row is zeroed.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var, mask: &[bool]) -> Result<Var> {
        let [n, d] = tape.value(seq).shape();
        if n == 0 {
            return Err(Error::Empty("attention over empty sequence".into()));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("dimension {d} not divisible by {} heads", self.heads)));
        }
        if mask.len() != n {
            return Err(Error::shape("attention", format!("mask of {} for {n} positions", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("attention: every position masked".into()));
        }
        let wq = tape.param(store, self.query);
        let wk = tape.param(store, self.key);
        let wv = tape.param(store, self.value);
        let wo = tape.param(store, self.output);
        let q = tape.matmul(seq, wq)?;
        let k = tape.matmul(seq, wk)?;
        let v = tape.matmul(seq, wv)?;

        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, Some(mask))?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        let out = tape.matmul(joined, wo)?;
        if mask.iter().all(|&m| m) {
            return Ok(out);
        }
        let keep = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        tape.scale_rows(out, keep)
    }
}

/// Learned elementwise scale and shift applied after normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormAffine {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormAffine {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), super::Tensor::filled(1, dim, 1.0))?,
            shift: store.insert(format!("{name}.shift"), super::Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let normed = tape.layer_norm(x)?;
        let rows = tape.value(normed).rows();
        let gain = tape.param(store, self.gain);
        let gain = tape.repeat_row(gain, rows)?;
        let scaled = tape.mul(normed, gain)?;
        let shift = tape.param(store, self.shift);
        tape.add_row(scaled, shift)
    }
}
