//! The causal-flow encoder: a transformer over `[visual ‖ queries]` under the
//! dual-stream mask that returns only the query rows.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Block, Rotary};
use crate::masking::{AttentionPattern, DualStreamMask};
use crate::numerics::{ParamGroup, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    /// Require `m == n` for every view.
    pub equal_cardinality: bool,
    pub query_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            d: 64,
            ffn_mult: 2,
            max_seq: 32,
            rope_base: 10_000.0,
            equal_cardinality: true,
            query_init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) || !(self.d / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder width {} must split into {} heads of even width",
                self.d, self.heads
            )));
        }
        if self.ffn_mult == 0 || self.max_seq < 2 {
            return Err(Error::Config("encoder ffn_mult and max_seq must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Global,
    Local,
}

/// Learnable causal-flow queries; all local views share one set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryBank {
    pub global: String,
    pub local: String,
    pub n_global: usize,
    pub n_local: usize,
}

impl QueryBank {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        n_global: usize,
        n_local: usize,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_global == 0 || n_local == 0 {
            return Err(Error::Config("query counts must be positive".into()));
        }
        let global = "queries.global".to_string();
        let local = "queries.local".to_string();
        store.insert(&global, ParamGroup::Queries, Tensor::randn(&[n_global, d], std, rng))?;
        store.insert(&local, ParamGroup::Queries, Tensor::randn(&[n_local, d], std, rng))?;
        Ok(QueryBank {
            global,
            local,
            n_global,
            n_local,
        })
    }

    pub fn count(&self, kind: ViewKind) -> usize {
        match kind {
            ViewKind::Global => self.n_global,
            ViewKind::Local => self.n_local,
        }
    }

    pub fn name(&self, kind: ViewKind) -> &str {
        match kind {
            ViewKind::Global => &self.global,
            ViewKind::Local => &self.local,
        }
    }
}

/// Encoder output for one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowTokens {
    pub values: Var,
    pub rows: usize,
    pub kind: ViewKind,
    pub view_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    CausalFlow,
    /// Bidirectional encoder over visual tokens only; the visual rows are passed
    /// on in raster order.
    RasterBaseline,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::CausalFlow => "causal_flow",
            EncoderMode::RasterBaseline => "raster_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub mode: EncoderMode,
    pub blocks: Vec<Block>,
    pub bank: Option<QueryBank>,
}

/// Hidden states of one view after each block (full sequence, visual rows first).
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub flow: FlowTokens,
    pub visual_rows: usize,
    pub hidden: Vec<Var>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: EncoderConfig,
        mode: EncoderMode,
        n_global: usize,
        n_local: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let rotary = Rotary { base: cfg.rope_base };
        let blocks = (0..cfg.layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("encoder.block{l}"),
                    ParamGroup::Encoder,
                    cfg.d,
                    cfg.heads,
                    cfg.d * cfg.ffn_mult,
                    rotary,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let bank = match mode {
            EncoderMode::CausalFlow => Some(QueryBank::new(
                store,
                n_global,
                n_local,
                cfg.d,
                cfg.query_init_std,
                rng,
            )?),
            EncoderMode::RasterBaseline => None,
        };
        Ok(Encoder {
            cfg,
            mode,
            blocks,
            bank,
        })
    }

    pub fn encode_view<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        visual: Var,
        kind: ViewKind,
        view_index: usize,
    ) -> Result<FlowTokens> {
        Ok(self.encode_view_traced(tape, visual, kind, view_index)?.flow)
    }

    pub fn encode_view_traced<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        visual: Var,
        kind: ViewKind,
        view_index: usize,
    ) -> Result<EncoderTrace> {
        let v = tape.value(visual)?;
        let (m, width) = (v.rows(), v.cols());
        if width != self.cfg.d {
            return Err(Error::Dimension(format!(
                "visual tokens have width {width}, encoder expects {}",
                self.cfg.d
            )));
        }
        let (mut x, seq, pattern, positions, n) = match (&self.bank, self.mode) {
            (Some(bank), EncoderMode::CausalFlow) => {
                let n = bank.count(kind);
                if self.cfg.equal_cardinality && n != m {
                    return Err(Error::Config(format!(
                        "{kind:?} view has {m} visual tokens but {n} queries"
                    )));
                }
                let seq = m + n;
                if seq > self.cfg.max_seq {
                    return Err(Error::Config(format!(
                        "sequence of {seq} exceeds max_seq {}",
                        self.cfg.max_seq
                    )));
                }
                let q = tape.param(bank.name(kind))?;
                let x = tape.concat_rows(&[visual, q])?;
                let positions: Vec<usize> = (0..m).chain(0..n).collect();
                let mask = DualStreamMask::new(m, n)?;
                (x, seq, AttentionPattern::DualStream(mask), positions, n)
            }
            _ => (visual, m, AttentionPattern::Full, (0..m).collect(), m),
        };
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(tape, x, &positions, pattern)?;
            hidden.push(x);
        }
        let values = if seq == n { x } else { tape.slice_rows(x, m, n)? };
        Ok(EncoderTrace {
            flow: FlowTokens {
                values,
                rows: n,
                kind,
                view_index,
            },
            visual_rows: m,
            hidden,
        })
    }
}

/// `[local_1 ‖ … ‖ local_k ‖ global]` along the sequence axis.
pub fn assemble_sequence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    global: &FlowTokens,
    locals: &[FlowTokens],
) -> Result<Var> {
    let mut seen = HashSet::new();
    for l in locals {
        if !seen.insert(l.view_index) {
            return Err(Error::InvalidArgument(format!(
                "duplicate local view index {}",
                l.view_index
            )));
        }
    }
    let parts: Vec<Var> = locals
        .iter()
        .map(|l| l.values)
        .chain(std::iter::once(global.values))
        .collect();
    if parts.len() == 1 {
        return Ok(global.values);
    }
    tape.concat_rows(&parts)
}

/// Length of the assembled sequence for `k` local views.
pub fn assembled_len(k: usize, n_local: usize, n_global: usize) -> usize {
    k * n_local + n_global
}
