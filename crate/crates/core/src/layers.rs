//! Transformer building blocks. Layers hold parameter names and resolve them on
//! the tape at forward time, so one definition serves both precisions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::AttentionPattern;
use crate::numerics::{ParamGroup, ParamStore, Scalar, Tape, Tensor, Var};

/// `x·W + b` with `W: d_in×d_out`; uniform init in ±1/√d_in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = format!("{name}.weight");
        store.insert(&weight, group, Tensor::uniform(&[d_in, d_out], bound, rng))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, group, Tensor::uniform(&[d_out], bound, rng))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gain: String,
    pub eps: f64,
}

impl RmsNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, d: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        store.insert(&gain, group, Tensor::ones(&[d]))?;
        Ok(RmsNorm {
            gain,
            eps: Self::EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain)?;
        tape.rms_norm(x, g, self.eps)
    }
}

/// Gated feed-forward: `down(silu(gate(x)) ∘ up(x))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForward {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            gate: Linear::new(store, &format!("{name}.gate"), group, d, hidden, false, rng)?,
            up: Linear::new(store, &format!("{name}.up"), group, d, hidden, false, rng)?,
            down: Linear::new(store, &format!("{name}.down"), group, hidden, d, false, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate.forward(tape, x)?;
        let g = tape.silu(g)?;
        let u = self.up.forward(tape, x)?;
        let h = tape.mul(g, u)?;
        self.down.forward(tape, h)
    }
}

/// Where rotary position indices come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotary {
    pub base: f64,
}

impl Default for Rotary {
    fn default() -> Self {
        Rotary { base: 10_000.0 }
    }
}

/// Multi-head self-attention with rotary positions on queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub rotary: Rotary,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d: usize,
        heads: usize,
        rotary: Rotary,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "width {d} must split into {heads} heads of even width"
            )));
        }
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), group, d, d, false, rng);
        Ok(SelfAttention {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            heads,
            rotary,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        positions: &[usize],
        pattern: AttentionPattern,
    ) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let q = tape.rope(q, self.heads, positions, self.rotary.base)?;
        let k = self.k.forward(tape, x)?;
        let k = tape.rope(k, self.heads, positions, self.rotary.base)?;
        let v = self.v.forward(tape, x)?;
        let a = tape.attention(q, k, v, self.heads, pattern)?;
        self.o.forward(tape, a)
    }
}

/// Pre-norm residual block: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: RmsNorm,
    pub attn: SelfAttention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        rotary: Rotary,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            attn_norm: RmsNorm::new(store, &format!("{name}.attn_norm"), group, d)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), group, d, heads, rotary, rng)?,
            ffn_norm: RmsNorm::new(store, &format!("{name}.ffn_norm"), group, d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, d, ffn_hidden, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        positions: &[usize],
        pattern: AttentionPattern,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(tape, x)?;
        let h = self.attn.forward(tape, h, positions, pattern)?;
        let x = tape.add(x, h)?;
        let h = self.ffn_norm.forward(tape, x)?;
        let h = self.ffn.forward(tape, h)?;
        tape.add(x, h)
    }
}
