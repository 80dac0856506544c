use std::collections::HashSet;

use motif::datapipe::{
    holdout_split, make_folds, modal_label, read_recordings_dir, resample, synth_recordings,
    window, window_stride, write_recordings_dir, DataPrep, FoldPlan, Recording, SynthConfig,
    WindowConfig, NUM_FOLDS,
};
use motif::Error;
use ndarray::Array2;
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i:03}")).collect()
}

fn recording(n: usize, rate: f64) -> Recording {
    let ts = (0..n).map(|i| i as f64 / rate).collect();
    let samples = Array2::from_shape_fn((n, 3), |(i, c)| (i as f64 * 0.1 + c as f64).sin());
    let labels = (0..n).map(|i| Some((i * 3 / n) as u32)).collect();
    Recording::new("p", ts, samples, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn folds_are_participant_disjoint(n in NUM_FOLDS..40, seed in any::<u64>()) {
        let people = ids(n);
        let plan = make_folds(&people, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), NUM_FOLDS);
        let all: HashSet<&String> = people.iter().collect();
        let mut tested = HashSet::new();
        for f in &plan.folds {
            prop_assert!(!f.train.is_empty() && !f.val.is_empty() && !f.test.is_empty());
            let tr: HashSet<&String> = f.train.iter().collect();
            let va: HashSet<&String> = f.val.iter().collect();
            let te: HashSet<&String> = f.test.iter().collect();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            let union: HashSet<&String> = tr.union(&va).chain(te.iter()).copied().collect();
            prop_assert_eq!(&union, &all);
            for p in &f.test {
                prop_assert!(tested.insert(p.clone()));
            }
        }
        prop_assert_eq!(tested.len(), n);
        prop_assert_eq!(&plan, &make_folds(&people, seed).unwrap());
        prop_assert!(plan.validate().is_ok());
    }

    #[test]
    fn holdout_is_a_partition(n in 3usize..60, seed in any::<u64>()) {
        let people = ids(n);
        let f = holdout_split(&people, seed).unwrap();
        let hold = ((n as f64) * 0.2).round().max(1.0) as usize;
        prop_assert_eq!(f.val.len(), hold);
        prop_assert_eq!(f.test.len(), hold);
        let mut all: Vec<String> = f.train.iter().chain(&f.val).chain(&f.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, people);
    }

    #[test]
    fn window_count_matches_formula(n in 1usize..400, len in 1usize..120, overlap in 0.0f64..0.95) {
        let rec = recording(n, 50.0);
        let ws = window(&rec, len, overlap);
        let stride = window_stride(len, overlap);
        let expected = if n < len { 0 } else { (n - len) / stride + 1 };
        prop_assert_eq!(ws.len(), expected);
        for (k, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.values.nrows(), len);
            prop_assert_eq!(w.values.row(0), rec.samples.row(k * stride));
        }
    }

    #[test]
    fn modal_label_prefers_smallest_on_ties(a in 0u32..5, b in 0u32..5, k in 1usize..5) {
        let labels: Vec<Option<u32>> = std::iter::repeat_n(Some(a), k).chain(std::iter::repeat_n(Some(b), k)).chain([None]).collect();
        prop_assert_eq!(modal_label(&labels), Some(a.min(b)));
    }
}

#[test]
fn too_few_participants_is_an_error() {
    assert!(matches!(
        make_folds(&ids(4), 0),
        Err(Error::TooFewParticipants { needed: 5, got: 4 })
    ));
    assert!(matches!(
        holdout_split(&ids(2), 0),
        Err(Error::TooFewParticipants { .. })
    ));
}

#[test]
fn overlapping_plan_is_rejected() {
    let mut plan = make_folds(&ids(10), 1).unwrap();
    let moved = plan.folds[0].test[0].clone();
    plan.folds[0].train.push(moved);
    assert!(plan.validate().is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.json");
    plan.save(&path).unwrap();
    assert!(FoldPlan::load(&path).is_err());
    assert!(matches!(
        FoldPlan::load(&dir.path().join("absent.json")),
        Err(Error::MissingInput { .. })
    ));
}

#[test]
fn resampling_keeps_every_kth_sample() {
    let rec = recording(200, 100.0);
    let half = resample(&rec, 50.0).unwrap();
    assert_eq!(half.len(), 100);
    assert_eq!(half.samples.row(7), rec.samples.row(14));
    assert!((half.rate_hz().unwrap() - 50.0).abs() < 1e-9);
    assert!(matches!(
        resample(&rec, 30.0),
        Err(Error::NonIntegerDecimation { .. })
    ));
}

#[test]
fn csv_round_trip_and_missing_directory() {
    let recs = synth_recordings(&SynthConfig {
        participants: 3,
        seconds_per_class: 4.0,
        ..SynthConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    write_recordings_dir(&recs, dir.path()).unwrap();
    let back = read_recordings_dir(dir.path()).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.participant_id, b.participant_id);
        assert_eq!(a.labels, b.labels);
        assert!(a
            .samples
            .iter()
            .zip(b.samples.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }
    assert!(matches!(
        read_recordings_dir(&dir.path().join("nope")),
        Err(Error::MissingInput { .. })
    ));
}

#[test]
fn normalization_uses_training_participants_only() {
    let recs = synth_recordings(&SynthConfig {
        participants: 5,
        seconds_per_class: 6.0,
        ..SynthConfig::default()
    });
    let cfg = WindowConfig::default();
    let prep = DataPrep::fit(&recs, &cfg, 3).unwrap();
    let train = prep.windows(&recs, &prep.split.train).unwrap();
    let n: usize = train.iter().map(|w| w.values.nrows()).sum();
    for c in 0..3 {
        let mean = train
            .iter()
            .flat_map(|w| w.values.column(c).to_vec())
            .sum::<f64>()
            / n as f64;
        let var = train
            .iter()
            .flat_map(|w| w.values.column(c).to_vec())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "channel {c} var {var}");
    }
    let test = prep.windows(&recs, &prep.split.test).unwrap();
    assert!(test
        .iter()
        .all(|w| prep.split.test.contains(&w.participant_id)));
}
