//! Parameterized building blocks on top of the tape primitives.

use rand::Rng;

use super::params::{Bound, Init, ParamId, ParamStore};
use super::real::Real;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x W + b` with `W: [n_in, n_out]`.
pub fn linear<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (rows, cols) = tape.rows_cols(x);
    let n_in = tape.shape(w)[0];
    if cols != n_in {
        return Err(Error::DimensionMismatch(format!(
            "linear: input width {cols}, weight {:?}",
            tape.shape(w)
        )));
    }
    let x2 = if tape.shape(x).len() == 2 {
        x
    } else {
        tape.reshape(x, &[rows, cols])?
    };
    let y = tape.matmul(x2, w)?;
    tape.add_row_bias(y, b)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), &[n_in, n_out], Init::Uniform(bound), rng);
        let bias = store.add(format!("{name}.bias"), &[n_out], Init::Uniform(bound), rng);
        Self {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, p.var(self.weight), p.var(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[d], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), F::from_f64(LN_EPS))
    }
}

/// Multi-head scaled dot-product self-attention over all rows of `[S, d]`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
            width,
        })
    }

    /// Returns the attended output and each head's `[S, S]` attention weights.
    pub fn forward_with_weights<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let dh = self.width / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_t(qh, false, kh, true)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax(scores);
            weights.push(att);
            outs.push(tape.matmul(att, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.output.forward(tape, p, merged)?, weights))
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Pre-norm residual block: `y = x + MSA(LN(x))`, `out = y + MLP(LN(y))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Hidden-width multiplier of the block MLP.
pub const MLP_EXPANSION: usize = 4;

impl TransformerBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), width, rng);
        let attention = MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), width, rng);
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), width, MLP_EXPANSION * width, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), MLP_EXPANSION * width, width, rng);
        Ok(Self {
            norm1,
            attention,
            norm2,
            fc1,
            fc2,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let a = self.attention.forward(tape, p, h)?;
        let y = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, y)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(y, h)
    }

    /// Attention and MLP parameters; zeroing them turns the block into the identity.
    pub fn interior_params(&self) -> Vec<ParamId> {
        let mut ids = self.attention.params();
        ids.extend(self.fc1.params());
        ids.extend(self.fc2.params());
        ids
    }
}

/// Applies blocks in sequence.
pub fn run_blocks<F: Real>(blocks: &[TransformerBlock], tape: &mut Tape<F>, p: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}
