use proptest::prelude::*;

use causal_flow::metrics::{
    detect_repetition, edit_distance, evaluate, levenshtein, ConstantTranscriber, EchoTranscriber, EvalReport,
    EvalSettings,
};
use causal_flow::synth::{make_dataset, LayoutKind, Mix, ShapeParams};

fn seq() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..16)
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(a in seq(), b in seq(), c in seq()) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        prop_assert!(levenshtein(&a, &b) >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn normalized_distance_is_bounded(a in seq(), b in seq()) {
        let d = edit_distance(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn repetition_ignores_clean_context(
        block in prop::collection::vec(3usize..40, 5..9),
        repeats in 4usize..7,
        prefix in prop::collection::vec(100usize..140, 0..10),
        suffix in prop::collection::vec(200usize..240, 0..10),
    ) {
        let mut s = prefix.clone();
        for _ in 0..repeats {
            s.extend_from_slice(&block);
        }
        s.extend_from_slice(&suffix);
        prop_assert!(detect_repetition(&s, 5, 4));
        let clean: Vec<usize> = prefix.iter().chain(&suffix).copied().collect();
        let distinct: std::collections::HashSet<_> = clean.iter().collect();
        if distinct.len() == clean.len() {
            prop_assert!(!detect_repetition(&clean, 5, 4));
        }
    }
}

#[test]
fn distance_examples() {
    assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
    assert_eq!(edit_distance(&[], &[]), 0.0);
    assert_eq!(edit_distance(&[1, 2, 3, 4], &[]), 1.0);
    assert_eq!(edit_distance(&[1, 2], &[2, 1]), 1.0);
}

#[test]
fn three_repeats_are_not_a_loop() {
    let block = [5, 6, 7, 8, 9];
    let s: Vec<usize> = block.iter().cycle().take(15).copied().collect();
    assert!(!detect_repetition(&s, 5, 4));
    let s: Vec<usize> = block.iter().cycle().take(20).copied().collect();
    assert!(detect_repetition(&s, 5, 4));
}

fn samples() -> Vec<causal_flow::synth::Sample> {
    let mix = Mix {
        raster: 0.5,
        spiral: 0.5,
        ..Mix::default()
    };
    make_dataset(4, &mix, 12, &ShapeParams::default()).unwrap().samples
}

#[test]
fn echo_scores_perfectly_and_report_round_trips() {
    let report = evaluate(&EchoTranscriber, &samples(), &EvalSettings::default()).unwrap();
    let all = report.overall();
    assert_eq!((all.mean_edit_distance, all.exact_match_rate, all.repetition_rate), (0.0, 1.0, 0.0));
    let parsed = EvalReport::from_text(&report.to_text()).unwrap();
    assert_eq!(parsed, report);
    assert_eq!(report.layout(LayoutKind::Raster).unwrap().count, 6);
}

#[test]
fn constant_output_scores_badly() {
    let report = evaluate(&ConstantTranscriber(vec![1, 2]), &samples(), &EvalSettings::default()).unwrap();
    assert_eq!(report.overall().mean_edit_distance, 1.0);
    assert_eq!(report.overall().exact_match_rate, 0.0);
}

#[test]
fn empty_sample_set_is_rejected() {
    assert!(evaluate(&EchoTranscriber, &[], &EvalSettings::default()).is_err());
}
