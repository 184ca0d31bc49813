//! Batch entry points: each command reads a [`RunConfig`] and writes its
//! artifacts under the configured output directory.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::EncoderMode;
use crate::error::{Error, Result};
use crate::masking;
use crate::metrics::{evaluate, EchoTranscriber, EvalReport};
use crate::model::{ModelTranscriber, OcrModel};
use crate::numerics::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::planner::{self, PlannerConfig};
use crate::synth::{make_dataset, Dataset};
use crate::training::{begin_stage, run_stage, StagePlan, StepRecord, TrainState};

pub const TRAIN_DATA_DIR: &str = "data/train";
pub const EVAL_DATA_DIR: &str = "data/eval";
pub const TRAIN_DIR: &str = "train";
pub const METRICS_LOG: &str = "metrics.log";
pub const REPORT_FILE: &str = "eval/report.txt";

/// Which stages a training command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One(u8),
    All,
}

impl StageSelection {
    pub fn stages(self) -> Vec<u8> {
        match self {
            StageSelection::One(s) => vec![s],
            StageSelection::All => vec![1, 2, 3],
        }
    }
}

impl FromStr for StageSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StageSelection::All),
            "1" | "2" | "3" => Ok(StageSelection::One(s.parse().expect("digit"))),
            _ => Err(Error::Parse(format!("stage must be 1, 2, 3 or all, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps of the (first unfinished) stage.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub records: Vec<StepRecord>,
    pub elapsed: Duration,
}

pub fn checkpoint_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.out_dir.join(TRAIN_DIR).join(format!("stage{stage}.ckpt"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn train_dataset(cfg: &RunConfig) -> Result<Dataset> {
    make_dataset(cfg.data.train_seed, &cfg.data.mix, cfg.data.train_count, &cfg.data.shape)
}

pub fn eval_dataset(cfg: &RunConfig) -> Result<Dataset> {
    make_dataset(cfg.data.eval_seed, &cfg.data.mix, cfg.data.eval_count, &cfg.data.shape)
}

/// Writes train and eval snapshots; returns their directories.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let train_dir = cfg.out_dir.join(TRAIN_DATA_DIR);
    let eval_dir = cfg.out_dir.join(EVAL_DATA_DIR);
    train_dataset(cfg)?.write_snapshot(&train_dir)?;
    eval_dataset(cfg)?.write_snapshot(&eval_dir)?;
    Ok((train_dir, eval_dir))
}

/// Fresh model with the stage-1 light decoder, and its training state.
pub fn fresh_start(cfg: &RunConfig) -> Result<(OcrModel<f32>, TrainState<f32>)> {
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    init.set_stream(1);
    let model = OcrModel::<f32>::new(cfg.model, cfg.model.light_decoder_layers, &mut init)?;
    let state = TrainState::new(cfg.seed, &cfg.training, &model.store);
    Ok((model, state))
}

/// Runs the selected stages, writing a checkpoint after each one and appending
/// one line per step to the metrics log.
pub fn train(cfg: &RunConfig, stages: StageSelection, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (mut model, mut state) = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_digest != cfg.digest() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {} was written under config {}, current config is {}",
                    path.display(),
                    ckpt.config_digest,
                    cfg.digest()
                )));
            }
            (ckpt.restore_model()?, ckpt.state)
        }
        None => fresh_start(cfg)?,
    };
    let stage_list = stages.stages();
    if opts.resume.is_none() && stage_list[0] != 1 {
        return Err(Error::InvalidArgument(format!(
            "stage {} needs a checkpoint to resume from",
            stage_list[0]
        )));
    }
    let data = train_dataset(cfg)?;
    let dir = cfg.out_dir.join(TRAIN_DIR);
    ensure_dir(&dir)?;
    let log_path = dir.join(METRICS_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "run config_digest={} stages={:?}", cfg.digest(), stage_list)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut records = Vec::new();
    let mut last = None;
    let mut budget = opts.max_steps;
    for stage in stage_list {
        if budget == Some(0) {
            break;
        }
        if stages == StageSelection::All && stage < state.stage {
            continue;
        }
        let plan = StagePlan::new(stage, &cfg.training)?;
        if state.stage + 1 == stage && state.step >= StagePlan::new(state.stage, &cfg.training)?.steps {
            begin_stage(&mut model, stage, &cfg.training, &mut state)?;
        } else if state.stage != stage {
            return Err(Error::InvalidArgument(format!(
                "cannot start stage {stage} from a checkpoint at stage {} step {}",
                state.stage, state.step
            )));
        }
        let mut io_err = None;
        let recs = run_stage(&mut model, &plan, &data.samples, &mut state, cfg.training.clip_norm, budget, |r| {
            if io_err.is_none() {
                io_err = writeln!(log, "{}", r.to_line()).err();
            }
        })?;
        if let Some(e) = io_err {
            return Err(Error::io(&log_path, e));
        }
        if let Some(b) = budget.as_mut() {
            *b -= recs.len();
        }
        records.extend(recs);
        let path = checkpoint_path(cfg, stage);
        Checkpoint::capture(cfg, &model, &state).save(&path)?;
        last = Some(path);
        if state.step < plan.steps {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: last.expect("at least one stage"),
        metrics_log: log_path,
        records,
        elapsed: start.elapsed(),
    })
}

/// What `eval` transcribes with.
#[derive(Debug, Clone)]
pub enum EvalSubject {
    Checkpoint(PathBuf),
    /// Returns each sample's own target.
    Echo,
}

/// Evaluates on `dataset` (a snapshot directory) or on the configured eval split,
/// and writes the report.
pub fn eval(cfg: &RunConfig, subject: &EvalSubject, dataset: Option<&Path>) -> Result<(EvalReport, PathBuf)> {
    cfg.validate()?;
    let data = match dataset {
        Some(dir) => Dataset::read_snapshot(dir)?,
        None => eval_dataset(cfg)?,
    };
    let settings = cfg.eval_settings();
    let mut report = match subject {
        EvalSubject::Echo => evaluate(&EchoTranscriber, &data.samples, &settings)?,
        EvalSubject::Checkpoint(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.restore_model()?;
            let t = ModelTranscriber {
                model: &model,
                settings: cfg.generation(),
            };
            evaluate(&t, &data.samples, &settings)?
        }
    };
    report.config_digest = Some(cfg.digest());
    let path = cfg.out_dir.join(REPORT_FILE);
    write_file(&path, report.to_text().as_bytes())?;
    Ok((report, path))
}

/// Budget line for a page, e.g. `k=2 budget=544 grid=1x2`.
pub fn plan_line(width: usize, height: usize, cfg: &PlannerConfig) -> Result<String> {
    let plan = planner::plan(width, height, cfg)?;
    Ok(plan.summary(cfg))
}

pub fn mask_dump(m: usize, n: usize) -> Result<String> {
    masking::mask_dump(m, n)
}

/// Finite-difference check of the whole page→loss composite in double precision,
/// on the first training sample, with the full-depth decoder.
pub fn grad_check_model(cfg: &RunConfig, check: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let data = make_dataset(cfg.data.train_seed, &cfg.data.mix, 1, &cfg.data.shape)?;
    let sample = &data.samples[0];
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = OcrModel::<f64>::new(cfg.model, cfg.model.decoder.layers, &mut init)?;
    let mut store = model.store.clone();
    grad_check(&mut store, |tape| model.loss(tape, &sample.image, &sample.target), check)
}

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub mode: EncoderMode,
    pub report: EvalReport,
    pub train_time: Duration,
}

/// Config for one arm of the ablation: same data and budget, outputs in a
/// per-mode subdirectory.
pub fn ablation_config(cfg: &RunConfig, mode: EncoderMode) -> RunConfig {
    let mut arm = cfg.clone();
    arm.model.mode = mode;
    arm.out_dir = cfg.out_dir.join("ablate").join(mode.as_str());
    arm
}

/// Trains all stages and evaluates on the configured eval split.
pub fn train_and_eval(cfg: &RunConfig) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(cfg, StageSelection::All, &TrainOptions::default())?;
    let (report, _) = eval(cfg, &EvalSubject::Checkpoint(outcome.checkpoint.clone()), None)?;
    Ok((outcome, report))
}

/// Trains and evaluates the causal-flow model and the raster baseline.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationArm>> {
    [EncoderMode::CausalFlow, EncoderMode::RasterBaseline]
        .into_iter()
        .map(|mode| {
            let arm = ablation_config(cfg, mode);
            let (outcome, report) = train_and_eval(&arm)?;
            Ok(AblationArm {
                mode,
                report,
                train_time: outcome.elapsed,
            })
        })
        .collect()
}

/// One-line comparison per arm.
pub fn ablation_summary(arms: &[AblationArm]) -> String {
    let mut s = String::new();
    for arm in arms {
        s.push_str(&format!("mode={}", arm.mode.as_str()));
        for (kind, agg) in arm.report.by_layout() {
            s.push_str(&format!(" {kind}_ed={:.4} {kind}_em={:.4}", agg.mean_edit_distance, agg.exact_match_rate));
        }
        let all = arm.report.overall();
        s.push_str(&format!(" all_ed={:.4} all_em={:.4}\n", all.mean_edit_distance, all.exact_match_rate));
    }
    s
}
