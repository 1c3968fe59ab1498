use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtune::discretiser::{BinGrid, Restructure, INITIAL_BINS};

fn widths(g: &BinGrid) -> Vec<f64> {
    g.bins.iter().map(|b| b.width()).collect()
}

#[test]
fn starts_with_ten_equal_bins() {
    let g = BinGrid::init("batch_interval_s", 0.5, 20.0).unwrap();
    assert_eq!(g.len(), INITIAL_BINS);
    assert_eq!(g.len(), 10);
    let delta = (20.0 - 0.5) / 10.0;
    assert!((g.delta - delta).abs() < 1e-12);
    for w in widths(&g) {
        assert!((w - delta).abs() < 1e-12);
    }
    g.check_partition().unwrap();
}

#[test]
fn first_halving_doubles_the_bins() {
    let mut g = BinGrid::init("x", 0.0, 10.0).unwrap();
    let mut last = Restructure::None;
    for _ in 0..g.halve_threshold {
        last = g.record_selection(3).unwrap();
    }
    assert_eq!(last, Restructure::Halved);
    assert_eq!(g.len(), 20);
    assert_eq!(g.delta, 0.5);
    for w in widths(&g) {
        assert!((w - 0.5).abs() < 1e-12);
    }
    g.check_partition().unwrap();
}

#[test]
fn top_bin_pressure_extends_by_delta() {
    let mut g = BinGrid::init("x", 0.0, 10.0).unwrap();
    let top = g.len() - 1;
    let mut last = Restructure::None;
    for _ in 0..g.extend_threshold {
        last = g.record_selection(top).unwrap();
    }
    assert_eq!(last, Restructure::Extended);
    assert_eq!(g.max, 11.0);
    assert_eq!(g.len(), 11);
    assert_eq!((g.bins[10].lo, g.bins[10].hi), (10.0, 11.0));
    g.check_partition().unwrap();
}

#[test]
fn hundred_thousand_operations_keep_the_partition() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut grids: Vec<BinGrid> = (0..4)
        .map(|i| BinGrid::init(format!("l{i}"), i as f64, 10.0 + i as f64 * 3.0).unwrap())
        .collect();
    for op in 0..100_000 {
        let g = &mut grids[op % 4];
        // favour a few hot bins so halving, extension and merging all occur
        let index = if rng.random_bool(0.7) {
            (g.len() - 1).min(rng.random_range(0..3) * g.len() / 3)
        } else {
            rng.random_range(0..g.len())
        };
        g.record_selection(index).unwrap();
        g.check_partition().unwrap();
        let v = g.value_of(index.min(g.len() - 1), &mut rng).unwrap();
        assert!(v >= g.min && v <= g.max);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
}

proptest! {
    #[test]
    fn selections_preserve_partition(
        min in -100.0f64..100.0,
        span in 0.01f64..1000.0,
        picks in prop::collection::vec(0.0f64..1.0, 1..400),
    ) {
        let mut g = BinGrid::init("x", min, min + span).unwrap();
        for p in picks {
            let index = ((p * g.len() as f64) as usize).min(g.len() - 1);
            let before_max = g.max;
            let before_len = g.len();
            match g.record_selection(index).unwrap() {
                Restructure::Extended => {
                    prop_assert_eq!(g.len(), before_len + 1);
                    prop_assert!(g.max > before_max);
                }
                Restructure::Halved => prop_assert!(g.len() >= before_len),
                Restructure::None => prop_assert_eq!(g.len(), before_len),
            }
            prop_assert!(g.check_partition().is_ok());
            prop_assert!(g.halvings <= g.max_halvings);
            prop_assert!(g.bins.iter().all(|b| b.count < g.halve_threshold.max(g.extend_threshold)));
        }
    }

    #[test]
    fn bin_of_finds_the_containing_bin(v in -10.0f64..30.0) {
        let g = BinGrid::init("x", 0.0, 20.0).unwrap();
        let i = g.bin_of(v);
        let b = &g.bins[i];
        let clamped = v.clamp(g.min, g.max);
        prop_assert!(b.lo <= clamped && (clamped < b.hi || (i + 1 == g.len() && clamped <= b.hi)));
    }
}
