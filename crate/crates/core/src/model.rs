//! The full page-to-text pipeline: plan → views → tokenize → encode → assemble → decode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, GenerationSettings};
use crate::encoder::{assemble_sequence, Encoder, EncoderConfig, EncoderMode, ViewKind};
use crate::error::{Error, Result};
use crate::metrics::Transcriber;
use crate::numerics::{ParamGroup, ParamStore, Scalar, Tape, Tensor, Var};
use crate::planner::{self, PlannerConfig};
use crate::synth::Sample;
use crate::tokenizer::{ImageTensor, Tokenizer, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: EncoderMode,
    pub tokenizer: TokenizerConfig,
    pub planner: PlannerConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Decoder depth used during stage 1 and discarded afterwards.
    pub light_decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: EncoderMode::CausalFlow,
            tokenizer: TokenizerConfig::default(),
            planner: PlannerConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            light_decoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.planner.validate(&self.tokenizer)?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.tokenizer.d_out != self.encoder.d {
            return Err(Error::Config(format!(
                "tokenizer d_out {} differs from encoder width {}",
                self.tokenizer.d_out, self.encoder.d
            )));
        }
        let longest = self.planner.n_global.max(self.planner.n_local);
        let needed = match self.mode {
            EncoderMode::CausalFlow => 2 * longest,
            EncoderMode::RasterBaseline => longest,
        };
        if needed > self.encoder.max_seq {
            return Err(Error::Config(format!(
                "encoder max_seq {} below the {needed} positions a view needs",
                self.encoder.max_seq
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OcrModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl<T: Scalar> OcrModel<T> {
    /// Fresh model with a decoder of `decoder_layers` blocks.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, decoder_layers: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let tokenizer = Tokenizer::new(&mut store, cfg.tokenizer, rng)?;
        let encoder = Encoder::new(
            &mut store,
            cfg.encoder,
            cfg.mode,
            cfg.planner.n_global,
            cfg.planner.n_local,
            rng,
        )?;
        let dcfg = DecoderConfig {
            layers: decoder_layers,
            ..cfg.decoder
        };
        let decoder = Decoder::new(&mut store, dcfg, cfg.encoder.d, rng)?;
        Ok(OcrModel {
            cfg,
            store,
            tokenizer,
            encoder,
            decoder,
        })
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder.cfg.layers
    }

    /// Discards the decoder and initializes a new one of `layers` blocks.
    pub fn replace_decoder<R: Rng + ?Sized>(&mut self, layers: usize, rng: &mut R) -> Result<()> {
        self.store.remove_group(ParamGroup::Decoder);
        let dcfg = DecoderConfig {
            layers,
            ..self.cfg.decoder
        };
        self.decoder = Decoder::new(&mut self.store, dcfg, self.cfg.encoder.d, rng)?;
        Ok(())
    }

    /// Assembled flow tokens for a page.
    pub fn flow(&self, tape: &mut Tape<'_, T>, image: &ImageTensor) -> Result<Var> {
        let plan = planner::plan(image.width, image.height, &self.cfg.planner)?;
        let (global, locals) = planner::apply(&plan, image)?;
        let mut local_flows = Vec::with_capacity(locals.len());
        for (i, view) in locals.iter().enumerate() {
            let v = self.tokenizer.tokenize(tape, view)?;
            local_flows.push(self.encoder.encode_view(tape, v, ViewKind::Local, i)?);
        }
        let v = self.tokenizer.tokenize(tape, &global)?;
        let g = self.encoder.encode_view(tape, v, ViewKind::Global, locals.len())?;
        assemble_sequence(tape, &g, &local_flows)
    }

    pub fn loss(&self, tape: &mut Tape<'_, T>, image: &ImageTensor, target: &[usize]) -> Result<Var> {
        let flow = self.flow(tape, image)?;
        self.decoder.decode_train(tape, flow, target)
    }

    pub fn flow_tensor(&self, image: &ImageTensor) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.store);
        let flow = self.flow(&mut tape, image)?;
        Ok(tape.value(flow)?.clone())
    }

    pub fn transcribe(&self, image: &ImageTensor, settings: &GenerationSettings) -> Result<Vec<usize>> {
        let flow = self.flow_tensor(image)?;
        self.decoder
            .generate(&self.store, &flow, &[self.decoder.cfg.bos], settings)
    }

    pub fn cast<U: Scalar>(&self) -> OcrModel<U> {
        OcrModel {
            cfg: self.cfg,
            store: self.store.cast(),
            tokenizer: self.tokenizer.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

/// A model paired with generation settings, usable by [`crate::metrics::evaluate`].
pub struct ModelTranscriber<'a, T> {
    pub model: &'a OcrModel<T>,
    pub settings: GenerationSettings,
}

impl<T: Scalar> Transcriber for ModelTranscriber<'_, T> {
    fn transcribe(&self, sample: &Sample) -> Result<Vec<usize>> {
        self.model.transcribe(&sample.image, &self.settings)
    }
}
