//! Causal language decoder that reads assembled flow tokens as a prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Block, Linear, RmsNorm, Rotary};
use crate::masking::AttentionPattern;
use crate::metrics::detect_repetition;
use crate::numerics::{ParamGroup, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub rope_base: f64,
    pub embed_init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            heads: 4,
            d: 64,
            ffn_mult: 2,
            vocab_size: 35,
            max_text_len: 72,
            pad: 0,
            bos: 1,
            eos: 2,
            rope_base: 10_000.0,
            embed_init_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} must be at least 4",
                self.vocab_size
            )));
        }
        let ids = [self.pad, self.bos, self.eos];
        if ids.iter().any(|&i| i >= self.vocab_size)
            || self.pad == self.bos
            || self.pad == self.eos
            || self.bos == self.eos
        {
            return Err(Error::Config(format!(
                "special ids {ids:?} must be distinct and below vocab_size"
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) || !(self.d / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "decoder width {} must split into {} heads of even width",
                self.d, self.heads
            )));
        }
        if self.ffn_mult == 0 || self.max_text_len < 2 {
            return Err(Error::Config("decoder ffn_mult and max_text_len too small".into()));
        }
        Ok(())
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.bos || id == self.eos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub max_new_tokens: usize,
    /// Stop once a block of ≥ 5 tokens has repeated back-to-back more than this many times.
    pub repetition_guard: Option<usize>,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            max_new_tokens: 70,
            repetition_guard: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub flow_norm: RmsNorm,
    pub proj: Option<Linear>,
    pub embed: String,
    pub segment: String,
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    pub head: Linear,
}

impl Decoder {
    /// `flow_width` is the encoder width; a projection is added when it differs from `cfg.d`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: DecoderConfig,
        flow_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Decoder;
        let flow_norm = RmsNorm::new(store, "decoder.flow_norm", g, flow_width)?;
        let proj = if flow_width != cfg.d {
            Some(Linear::new(store, "decoder.proj", g, flow_width, cfg.d, false, rng)?)
        } else {
            None
        };
        let embed = "decoder.embed".to_string();
        store.insert(&embed, g, Tensor::randn(&[cfg.vocab_size, cfg.d], cfg.embed_init_std, rng))?;
        let segment = "decoder.segment".to_string();
        store.insert(&segment, g, Tensor::randn(&[2, cfg.d], cfg.embed_init_std, rng))?;
        let rotary = Rotary { base: cfg.rope_base };
        let blocks = (0..cfg.layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("decoder.block{l}"),
                    g,
                    cfg.d,
                    cfg.heads,
                    cfg.d * cfg.ffn_mult,
                    rotary,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let final_norm = RmsNorm::new(store, "decoder.final_norm", g, cfg.d)?;
        let head = Linear::new(store, "decoder.head", g, cfg.d, cfg.vocab_size, false, rng)?;
        Ok(Decoder {
            cfg,
            flow_norm,
            proj,
            embed,
            segment,
            blocks,
            final_norm,
            head,
        })
    }

    /// Next-token logits `[t × vocab]` for each of the `t` input ids, given the flow prefix.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, flow: Var, inputs: &[usize]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("decoder input is empty".into()));
        }
        let q = tape.value(flow)?.rows();
        let t = inputs.len();
        let mut f = self.flow_norm.forward(tape, flow)?;
        if let Some(p) = &self.proj {
            f = p.forward(tape, f)?;
        }
        let seg = tape.param(&self.segment)?;
        let seg_flow = tape.slice_rows(seg, 0, 1)?;
        let seg_text = tape.slice_rows(seg, 1, 1)?;
        let f = tape.add_row(f, seg_flow)?;
        let table = tape.param(&self.embed)?;
        let e = tape.embedding(table, inputs)?;
        let e = tape.add_row(e, seg_text)?;
        let mut x = tape.concat_rows(&[f, e])?;
        let positions: Vec<usize> = (0..q).chain(0..t).collect();
        for block in &self.blocks {
            x = block.forward(tape, x, &positions, AttentionPattern::Causal)?;
        }
        let x = tape.slice_rows(x, q, t)?;
        let x = self.final_norm.forward(tape, x)?;
        self.head.forward(tape, x)
    }

    /// Mean next-token cross-entropy over `text[1..]` (pad positions ignored).
    pub fn decode_train<T: Scalar>(&self, tape: &mut Tape<'_, T>, flow: Var, text: &[usize]) -> Result<Var> {
        if text.len() > self.cfg.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "text of {} tokens exceeds max_text_len {}",
                text.len(),
                self.cfg.max_text_len
            )));
        }
        if text.len() < 2 || text[1..].iter().all(|&y| y == self.cfg.pad) {
            return Err(Error::EmptyLoss);
        }
        let logits = self.logits(tape, flow, &text[..text.len() - 1])?;
        tape.cross_entropy(logits, &text[1..], self.cfg.pad)
    }

    /// Greedy continuation of `prompt` until eos or `max_new_tokens`; returns
    /// the prompt followed by the generated ids.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        flow: &Tensor<T>,
        prompt: &[usize],
        settings: &GenerationSettings,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must hold at least bos".into()));
        }
        if settings.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        let mut out = prompt.to_vec();
        for _ in 0..settings.max_new_tokens {
            if out.len() >= self.cfg.max_text_len {
                break;
            }
            let mut tape = Tape::new(store);
            let f = tape.constant(flow.clone());
            let logits = self.logits(&mut tape, f, &out)?;
            let lv = tape.value(logits)?;
            let last = lv.row(lv.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == self.cfg.eos {
                break;
            }
            if let Some(max) = settings.repetition_guard {
                if detect_repetition(&out[prompt.len()..], 5, max + 1) {
                    break;
                }
            }
        }
        Ok(out)
    }
}
