mod common;

use astgode::data::{
    chronological_split, enumerate_valid_anchors, extract_bundle, fit_normalizer, load_archive, split_ranges,
    write_archive, Branch, Periods, TrafficArchive,
};
use astgode::synthetic::{periodic_archive, SyntheticConfig};
use astgode::Tensor;
use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;

fn three_week_archive() -> TrafficArchive {
    let mut cfg = SyntheticConfig::weeks(2, 5, 3, 1).unwrap();
    cfg.missing_fraction = 0.05;
    periodic_archive(&cfg).unwrap()
}

#[test]
fn five_minute_segment_algebra_holds_for_every_anchor() {
    let archive = three_week_archive();
    let p = archive.periods();
    assert_eq!((p.hour, p.day, p.week), (12, 288, 2016));
    let stats = fit_normalizer(&archive, 0..archive.steps()).unwrap();
    let anchors = enumerate_valid_anchors(&archive, 0..archive.steps());
    assert_eq!(anchors.first(), Some(&2016));
    assert_eq!(anchors.last(), Some(&(archive.steps() - 12)));
    for &tp in &anchors {
        let b = extract_bundle(&archive, tp, &stats).unwrap();
        let [tw, td, tr] = b.input_starts;
        assert_eq!((tr, td, tw), (tp - 12, tp - 288, tp - 2016));
        for branch in Branch::ALL {
            let tb = b.input_starts[branch.index()];
            let dt = branch.advance(p);
            assert_eq!(tb + 3 * dt, tp);
            for k in 1..=2 {
                assert_eq!(b.intermediate[branch.index()][k - 1].start, tb + k * dt);
            }
        }
        assert_eq!(b.predicted.start, tp);
    }
}

#[test]
fn inputs_never_reach_the_predicted_window() {
    let archive = three_week_archive();
    let stats = fit_normalizer(&archive, 0..archive.steps()).unwrap();
    let p = archive.periods();
    for tp in enumerate_valid_anchors(&archive, 0..archive.steps()).into_iter().step_by(97) {
        let b = extract_bundle(&archive, tp, &stats).unwrap();
        for s in b.input_starts {
            assert!(s + p.hour - 1 < tp + 1, "input ending at {} for anchor {tp}", s + p.hour - 1);
        }
    }
}

#[test]
fn bundles_are_pure_and_well_shaped() {
    let archive = three_week_archive();
    let stats = fit_normalizer(&archive, 0..4000).unwrap();
    let shape = [12, 2, 1];
    for tp in [2016, 3000, 6000] {
        let a = extract_bundle(&archive, tp, &stats).unwrap();
        let b = extract_bundle(&archive, tp, &stats).unwrap();
        assert_eq!(a, b);
        let mut segs = vec![&a.predicted];
        segs.extend(a.intermediate.iter().flatten());
        assert_eq!(segs.len(), 7);
        for s in segs {
            assert_eq!(s.values.shape(), shape);
            assert_eq!(s.mask.shape(), shape);
            for (v, m) in s.values.data().iter().zip(s.mask.data()) {
                assert!(*m == 1.0 || (*m == 0.0 && *v == 0.0));
            }
        }
        for x in &a.inputs {
            assert_eq!(x.shape(), shape);
            assert!(x.is_finite());
        }
    }
}

#[test]
fn anchors_outside_the_archive_are_rejected() {
    let archive = three_week_archive();
    let stats = fit_normalizer(&archive, 0..archive.steps()).unwrap();
    assert!(extract_bundle(&archive, 2015, &stats).is_err());
    assert!(extract_bundle(&archive, archive.steps() - 11, &stats).is_err());
}

#[test]
fn archive_file_round_trips_bitwise() {
    let archive = three_week_archive();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.astg");
    write_archive(&path, &archive).unwrap();
    let back = load_archive(&path).unwrap();
    assert_eq!(back.observed(), archive.observed());
    let bits = |a: &TrafficArchive| a.series().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&archive));
}

proptest! {
    #[test]
    fn split_parts_are_contiguous_and_ordered(steps in 10usize..5000, a in 0.05f64..0.9, b in 0.05f64..0.9) {
        prop_assume!(a + b < 0.95);
        let ratios = [a, b, 1.0 - a - b];
        if let Ok(s) = split_ranges(steps, ratios) {
            prop_assert_eq!(s.train.start, 0);
            prop_assert_eq!(s.train.end, s.val.start);
            prop_assert_eq!(s.val.end, s.test.start);
            prop_assert_eq!(s.test.end, steps);
            prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        }
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let series = uniform(&mut r, &[50, 3, 2], -10.0, 40.0);
        let archive = TrafficArchive::new(series.clone(), Periods::new(3, 6).unwrap(), None).unwrap();
        let stats = fit_normalizer(&archive, 0..35).unwrap();
        let back = stats.denormalize(&stats.normalize(&series));
        prop_assert!(back.sub(&series).unwrap().max_abs() < 1e-10);
        let train = Tensor::new(vec![35, 3, 2], series.data()[..35 * 6].to_vec()).unwrap();
        let z = stats.normalize(&train);
        for f in 0..2 {
            let vals: Vec<f64> = z.data().iter().skip(f).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn missing_entries_do_not_move_statistics(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut series = uniform(&mut r, &[40, 2, 1], 0.0, 10.0);
        let clean = TrafficArchive::new(series.clone(), Periods::new(3, 6).unwrap(), None).unwrap();
        let base = fit_normalizer(&clean, 0..20).unwrap();
        // Missing entries after the training range cannot matter.
        for v in series.data_mut()[60..].iter_mut() {
            if r.gen::<f64>() < 0.3 {
                *v = f64::NAN;
            }
        }
        let holed = TrafficArchive::new(series, Periods::new(3, 6).unwrap(), None).unwrap();
        prop_assert_eq!(fit_normalizer(&holed, 0..20).unwrap(), base);
    }
}

#[test]
fn default_split_of_a_three_week_archive_has_anchors_everywhere() {
    let archive = three_week_archive();
    let s = chronological_split(&archive, [0.7, 0.1, 0.2]).unwrap();
    for r in [s.train, s.val, s.test] {
        assert!(!enumerate_valid_anchors(&archive, r).is_empty());
    }
}
