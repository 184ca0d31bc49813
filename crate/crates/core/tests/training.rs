use causal_flow::checkpoint::{Checkpoint, FORMAT_VERSION};
use causal_flow::commands::{self, StageSelection, TrainOptions};
use causal_flow::config::RunConfig;
use causal_flow::numerics::ParamGroup;
use causal_flow::synth::{LayoutKind, Mix};
use causal_flow::training::{begin_stage, run_stage, StagePlan};

fn tiny(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.data.train_count = 32;
    cfg.data.eval_count = 4;
    cfg.training.batch = 2;
    for stage in [&mut cfg.training.stage1, &mut cfg.training.stage2, &mut cfg.training.stage3] {
        stage.steps = 3;
    }
    cfg
}

fn group_values(store: &causal_flow::numerics::ParamStore<f32>, groups: &[ParamGroup]) -> Vec<Vec<u8>> {
    store
        .iter()
        .filter(|p| groups.contains(&p.group))
        .map(|p| p.value.to_bits_le())
        .collect()
}

#[test]
fn frozen_groups_are_bit_identical_across_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let data = commands::train_dataset(&cfg).unwrap();
    let (mut model, mut state) = commands::fresh_start(&cfg).unwrap();
    run_stage(&mut model, &StagePlan::new(1, &cfg.training).unwrap(), &data.samples, &mut state, 1.0, None, |_| {}).unwrap();

    begin_stage(&mut model, 2, &cfg.training, &mut state).unwrap();
    let frozen = [ParamGroup::Tokenizer];
    let before = group_values(&model.store, &frozen);
    let moving = group_values(&model.store, &[ParamGroup::Encoder]);
    run_stage(&mut model, &StagePlan::new(2, &cfg.training).unwrap(), &data.samples, &mut state, 1.0, None, |_| {}).unwrap();
    assert_eq!(group_values(&model.store, &frozen), before);
    assert_ne!(group_values(&model.store, &[ParamGroup::Encoder]), moving);

    begin_stage(&mut model, 3, &cfg.training, &mut state).unwrap();
    let frozen = [ParamGroup::Tokenizer, ParamGroup::Encoder, ParamGroup::Queries];
    let before = group_values(&model.store, &frozen);
    run_stage(&mut model, &StagePlan::new(3, &cfg.training).unwrap(), &data.samples, &mut state, 1.0, None, |_| {}).unwrap();
    assert_eq!(group_values(&model.store, &frozen), before);
}

#[test]
fn stage_two_swaps_in_a_full_depth_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.model.light_decoder_layers = 1;
    cfg.model.decoder.layers = 3;
    let (mut model, mut state) = commands::fresh_start(&cfg).unwrap();
    assert_eq!(model.decoder_layers(), 1);
    state.step = cfg.training.stage1.steps;
    begin_stage(&mut model, 2, &cfg.training, &mut state).unwrap();
    assert_eq!(model.decoder_layers(), 3);
    assert_eq!((state.stage, state.step, state.optimizer.t), (2, 0, 0));
}

#[test]
fn loss_falls_on_a_single_repeated_page() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.mix = Mix {
        raster: 1.0,
        ..Mix::default()
    };
    cfg.training.stage1.steps = 60;
    cfg.training.stage1.peak_lr = 3e-3;
    let data = commands::train_dataset(&cfg).unwrap();
    let one = vec![data.samples[0].clone()];
    assert_eq!(one[0].layout, LayoutKind::Raster);
    let (mut model, mut state) = commands::fresh_start(&cfg).unwrap();
    let log = run_stage(&mut model, &StagePlan::new(1, &cfg.training).unwrap(), &one, &mut state, 1.0, None, |_| {}).unwrap();
    let (first, last) = (log[0].loss, log.last().unwrap().loss);
    assert!(last < first / 2.0, "loss {first} -> {last}");
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = commands::train(&cfg, StageSelection::One(1), &TrainOptions::default()).unwrap();
    let loaded = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(loaded.config_digest, cfg.digest());
    assert_eq!(Checkpoint::from_bytes(&loaded.to_bytes()).unwrap(), loaded);
    let model = loaded.restore_model().unwrap();
    for (a, b) in model.store.iter().zip(loaded.params.iter()) {
        assert_eq!(a.value.to_bits_le(), b.value.to_bits_le());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = commands::train(&cfg, StageSelection::One(1), &TrainOptions::default()).unwrap();
    let bytes = std::fs::read(&out.checkpoint).unwrap();

    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
    assert_eq!(err.kind(), "integrity");

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert_eq!(Checkpoint::from_bytes(&flipped).unwrap_err().kind(), "integrity");

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert_eq!(Checkpoint::from_bytes(&versioned).unwrap_err().kind(), "version");

    assert_eq!(Checkpoint::from_bytes(b"not a checkpoint").unwrap_err().kind(), "integrity");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let straight = tiny(&dir.path().join("straight"));
    let full = commands::train(&straight, StageSelection::All, &TrainOptions::default()).unwrap();

    let split = tiny(&dir.path().join("split"));
    let opts = TrainOptions {
        max_steps: Some(5),
        ..TrainOptions::default()
    };
    let first = commands::train(&split, StageSelection::All, &opts).unwrap();
    let resume = TrainOptions {
        resume: Some(first.checkpoint.clone()),
        ..TrainOptions::default()
    };
    let rest = commands::train(&split, StageSelection::All, &resume).unwrap();
    let losses = |r: &[causal_flow::training::StepRecord]| r.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    let joined: Vec<_> = first.records.iter().chain(&rest.records).cloned().collect();
    assert_eq!(losses(&joined), losses(&full.records));
    assert_eq!(std::fs::read(&rest.checkpoint).unwrap(), std::fs::read(&full.checkpoint).unwrap());
}

#[test]
fn resume_under_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = commands::train(&cfg, StageSelection::One(1), &TrainOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    let opts = TrainOptions {
        resume: Some(out.checkpoint),
        ..TrainOptions::default()
    };
    assert!(commands::train(&other, StageSelection::One(2), &opts).is_err());
}

#[test]
fn later_stage_without_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let err = commands::train(&tiny(dir.path()), StageSelection::One(3), &TrainOptions::default()).unwrap_err();
    assert_eq!(err.kind(), "invalid_argument");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = RunConfig::default().to_toml().replace("[training]\n", "[training]\nbatchsize = 3\n");
    let err = RunConfig::from_toml(&text).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(RunConfig::from_toml(&RunConfig::default().to_toml()).is_ok());
}

#[test]
fn digest_ignores_output_location_only() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.out_dir = "elsewhere".into();
    assert_eq!(a.digest(), b.digest());
    b.seed = 9;
    assert_ne!(a.digest(), b.digest());
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
