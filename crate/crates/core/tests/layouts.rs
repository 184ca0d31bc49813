use std::collections::HashSet;

use proptest::prelude::*;

use causal_flow::synth::{
    generate, glyph_token, hamming, make_dataset, Dataset, GlyphGrid, GlyphTable, LayoutKind, Mix, ShapeParams,
};

fn layout() -> impl Strategy<Value = LayoutKind> {
    prop::sample::select(LayoutKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn traversal_is_a_bijection_onto_fillable_cells(kind in layout(), rows in 2usize..12, cols in 3usize..12) {
        let order = kind.traversal(rows, cols).unwrap();
        let unique: HashSet<_> = order.iter().copied().collect();
        prop_assert_eq!(unique.len(), order.len());
        let expected: HashSet<_> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter(|&(_, c)| kind != LayoutKind::TwoColumn || c != LayoutKind::gutter(cols))
            .collect();
        prop_assert_eq!(unique, expected);
    }

    #[test]
    fn spiral_steps_between_neighbours(rows in 2usize..12, cols in 2usize..12) {
        let order = LayoutKind::Spiral.traversal(rows, cols).unwrap();
        for w in order.windows(2) {
            let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
            prop_assert_eq!(d, 1);
        }
    }

    #[test]
    fn targets_list_glyphs_in_reading_order(kind in layout(), seed in any::<u64>()) {
        let shape = ShapeParams::default();
        let table = GlyphTable::new(shape.vocab, shape.cell_pixels).unwrap();
        let s = generate(seed, kind, &shape, &table).unwrap();
        let filled: Vec<_> = kind
            .traversal(shape.rows, shape.cols)
            .unwrap()
            .into_iter()
            .filter(|&(r, c)| s.grid.glyph(r, c) != 0)
            .map(|(r, c)| glyph_token(s.grid.glyph(r, c)))
            .collect();
        prop_assert_eq!(&s.target[1..s.target.len() - 1], &filled[..]);
        prop_assert_eq!(s.grid.non_blank(), filled.len());
        prop_assert!(!filled.is_empty());
        let (w, h) = shape.page_size();
        prop_assert_eq!((s.image.width, s.image.height), (w, h));
    }
}

#[test]
fn glyph_patterns_are_well_separated() {
    let table = GlyphTable::new(32, 8).unwrap();
    let blank = vec![false; 64];
    let min = GlyphTable::min_distance(8);
    for a in 1..=32 {
        assert!(hamming(table.pattern(a), &blank) >= min);
        for b in a + 1..=32 {
            assert!(hamming(table.pattern(a), table.pattern(b)) >= min);
        }
    }
}

#[test]
fn gutter_must_stay_blank() {
    let mut cells = vec![0; 3 * 5];
    cells[2] = 4;
    assert!(GlyphGrid::new(LayoutKind::TwoColumn, 3, 5, cells).is_err());
}

#[test]
fn dataset_follows_the_mix_and_is_deterministic() {
    let mix = Mix {
        raster: 0.4,
        two_column: 0.3,
        spiral: 0.3,
        table_rowwise: 0.0,
    };
    let shape = ShapeParams::default();
    let a = make_dataset(11, &mix, 50, &shape).unwrap();
    let b = make_dataset(11, &mix, 50, &shape).unwrap();
    assert_eq!(a, b);
    let counts = a.counts();
    assert_eq!(counts[&LayoutKind::Raster], 20);
    assert_eq!(counts[&LayoutKind::TwoColumn], 15);
    assert_eq!(counts[&LayoutKind::Spiral], 15);
    assert_ne!(a.manifest_hash(), make_dataset(12, &mix, 50, &shape).unwrap().manifest_hash());
}

#[test]
fn snapshot_round_trips_and_detects_tampering() {
    let mix = Mix {
        raster: 0.5,
        spiral: 0.5,
        ..Mix::default()
    };
    let data = make_dataset(3, &mix, 6, &ShapeParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write_snapshot(dir.path()).unwrap();
    assert_eq!(Dataset::read_snapshot(dir.path()).unwrap(), data);

    let manifest = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let line = text.lines().find(|l| l.starts_with("sample 0 ")).unwrap();
    let tampered_line = line.replacen("target=1 ", "target=1 7 ", 1);
    std::fs::write(&manifest, text.replace(line, &tampered_line)).unwrap();
    let err = Dataset::read_snapshot(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "integrity");
}

#[test]
fn bad_mix_is_rejected() {
    let mix = Mix {
        raster: 0.5,
        spiral: 0.2,
        ..Mix::default()
    };
    assert!(make_dataset(0, &mix, 10, &ShapeParams::default()).is_err());
}
