//! Staged training: learning-rate schedule, AdamW, the step loop, and state.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{StageConfig, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::OcrModel;
use crate::numerics::{ParamGroup, ParamStore, Scalar, Tape};
use crate::synth::Sample;

/// `floor + ½(peak − floor)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, peak: f64, floor: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule of {total} steps"
        )));
    }
    if total == 0 {
        return Ok(peak);
    }
    let progress = step as f64 / total as f64;
    Ok(floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub groups: Vec<ParamGroup>,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Linear ramp of the cosine schedule over the first steps (0 = none).
    pub warmup_steps: usize,
}

impl StagePlan {
    pub fn groups_for(stage: u8) -> Result<Vec<ParamGroup>> {
        use ParamGroup::*;
        match stage {
            1 => Ok(vec![Tokenizer, Encoder, Queries, Decoder]),
            2 => Ok(vec![Encoder, Queries, Decoder]),
            3 => Ok(vec![Decoder]),
            _ => Err(Error::InvalidArgument(format!("no stage {stage}"))),
        }
    }

    pub fn new(stage: u8, cfg: &TrainingConfig) -> Result<Self> {
        let s: StageConfig = cfg.stage(stage)?;
        let plan = StagePlan {
            stage,
            groups: Self::groups_for(stage)?,
            peak_lr: s.peak_lr,
            floor_lr: s.floor_lr,
            steps: s.steps,
            batch: cfg.batch,
            warmup_steps: s.warmup_steps,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.groups;
        let ok = match self.stage {
            1 => true,
            2 => !g.contains(&ParamGroup::Tokenizer),
            3 => g.as_slice() == [ParamGroup::Decoder],
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "stage {} cannot train groups {g:?}",
                self.stage
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.peak_lr >= 0.0 && self.floor_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        let lr = cosine_lr(step, self.steps, self.peak_lr, self.floor_lr)?;
        Ok(if self.warmup_steps > 0 {
            lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            lr
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainingConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every trainable parameter from its stored gradient times `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, grad_scale: f64) -> Result<()> {
        if self.m.len() != store.len()
            || store.iter().zip(&self.m).any(|(p, m)| p.value.numel() != m.len())
        {
            return Err(Error::Graph("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let (lr_t, decay) = (T::from_f64(lr), T::from_f64(1.0 - lr * self.weight_decay));
        let (inv_bc1, inv_sqrt_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2.sqrt()));
        let (eps, scale) = (T::from_f64(self.eps), T::from_f64(grad_scale));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let update = (*mi * inv_bc1) / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
                if self.weight_decay != 0.0 {
                    *w *= decay;
                }
                *w -= lr_t * update;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: AdamW<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(seed: u64, cfg: &TrainingConfig, store: &ParamStore<T>) -> Self {
        TrainState {
            stage: 1,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            optimizer: AdamW::new(cfg, store),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step stage={} step={} lr={} loss={} grad_norm={} wall_ms={}",
            self.stage, self.step, self.lr, self.loss, self.grad_norm, self.wall_ms
        )
    }

    /// The record without its timing field, for reproducibility comparisons.
    pub fn deterministic_line(&self) -> String {
        format!(
            "step stage={} step={} lr={} loss={} grad_norm={}",
            self.stage, self.step, self.lr, self.loss, self.grad_norm
        )
    }
}

/// Moves `state` to the start of `stage`: stage 2 replaces the light decoder
/// with a fresh full-depth one, and every stage starts a new optimizer.
pub fn begin_stage<T: Scalar>(
    model: &mut OcrModel<T>,
    stage: u8,
    cfg: &TrainingConfig,
    state: &mut TrainState<T>,
) -> Result<()> {
    StagePlan::groups_for(stage)?;
    if stage == 2 {
        let layers = model.cfg.decoder.layers;
        model.replace_decoder(layers, &mut state.rng)?;
    }
    state.stage = stage;
    state.step = 0;
    state.optimizer = AdamW::new(cfg, &model.store);
    Ok(())
}

/// Number of predicted (non-pad) positions in a target.
pub fn target_tokens(target: &[usize], pad: usize) -> usize {
    target.iter().skip(1).filter(|&&t| t != pad).count()
}

/// One optimizer step on a batch drawn with replacement from `samples`.
pub fn train_step<T: Scalar>(
    model: &mut OcrModel<T>,
    plan: &StagePlan,
    samples: &[Sample],
    state: &mut TrainState<T>,
    clip_norm: f64,
) -> Result<StepRecord> {
    let start = Instant::now();
    let lr = plan.lr(state.step)?;
    let batch: Vec<&Sample> = (0..plan.batch)
        .map(|_| &samples[state.rng.gen_range(0..samples.len())])
        .collect();
    let pad = model.decoder.cfg.pad;
    let total: usize = batch.iter().map(|s| target_tokens(&s.target, pad)).sum();
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    model.store.zero_gradients();
    let mut loss = 0.0;
    for s in &batch {
        let w = target_tokens(&s.target, pad) as f64 / total as f64;
        let grads = {
            let mut tape = Tape::new(&model.store);
            let l = model.loss(&mut tape, &s.image, &s.target)?;
            loss += w * tape.value(l)?.data()[0].as_f64();
            let weighted = tape.scale(l, w)?;
            tape.backward(weighted)?
        };
        model.store.accumulate(&grads)?;
    }
    let grad_norm = model.store.grad_norm();
    let scale = if clip_norm > 0.0 && grad_norm > clip_norm {
        clip_norm / grad_norm
    } else {
        1.0
    };
    state.optimizer.step(&mut model.store, lr, scale)?;
    model.store.zero_gradients();
    let record = StepRecord {
        stage: plan.stage,
        step: state.step,
        lr,
        loss,
        grad_norm,
        wall_ms: start.elapsed().as_millis(),
    };
    state.step += 1;
    Ok(record)
}

/// Runs `plan` from `state.step` to the end of the stage, or for at most
/// `max_steps` steps. Frozen groups are marked before the first step.
pub fn run_stage<T: Scalar>(
    model: &mut OcrModel<T>,
    plan: &StagePlan,
    samples: &[Sample],
    state: &mut TrainState<T>,
    clip_norm: f64,
    max_steps: Option<usize>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    plan.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if state.stage != plan.stage {
        return Err(Error::InvalidArgument(format!(
            "training state is in stage {}, plan is for stage {}",
            state.stage, plan.stage
        )));
    }
    model.store.set_trainable_groups(&plan.groups);
    let end = match max_steps {
        Some(n) => (state.step + n).min(plan.steps),
        None => plan.steps,
    };
    let mut log = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let rec = train_step(model, plan, samples, state, clip_norm)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}
