use std::collections::BTreeSet;
use std::time::Instant;

use coach_core::dialogue::{RuptureDetector, TurnFeatures};
use coach_core::rupture::{
    fold_assignment, make_windows, nearmiss_undersample, rank_by_precision, render_table, run_cv, synthetic_corpus,
    train_detector, znormalize, CvConfig, FeatureStream, Fusion, Modality, RuptureModelKind, SynthConfig, TieBreak,
    AUDIO_WIDTH,
};
use proptest::prelude::*;

fn stream_of_len(len: usize) -> FeatureStream {
    let ts = (0..len).map(|t| t as f64).collect();
    FeatureStream::new(Modality::Audio, "s", ts, vec![vec![0.0; AUDIO_WIDTH]; len]).unwrap()
}

/// Brute-force count of start indices `s` with `s % 7 == 0` and `s + 10 <= len`.
fn enumerated_windows(len: usize) -> Vec<i64> {
    (0..len).filter(|s| s % 7 == 0 && s + 10 <= len).map(|s| s as i64).collect()
}

#[test]
fn window_counts_match_enumeration() {
    for len in 9..=60 {
        let w = make_windows(&stream_of_len(len), 10, 3).unwrap();
        let starts: Vec<i64> = w.iter().map(|w| w.start_s).collect();
        assert_eq!(starts, enumerated_windows(len), "len {len}");
        assert!(w.iter().all(|w| w.matrix.len() == 10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn znormalize_is_shift_invariant(
        vals in prop::collection::vec(-50.0f64..50.0, 40),
        c in -100.0f64..100.0,
    ) {
        let windows = |shift: f64| -> Vec<Vec<Vec<f64>>> {
            vals.chunks(8).map(|ch| ch.chunks(2).map(|r| r.iter().map(|x| x + shift).collect()).collect()).collect()
        };
        let (a_tr, a_te, _) = znormalize(&windows(0.0), &windows(0.0)[..2]).unwrap();
        let (b_tr, b_te, _) = znormalize(&windows(c), &windows(c)[..2]).unwrap();
        for (x, y) in a_tr.iter().chain(&a_te).flatten().flatten().zip(b_tr.iter().chain(&b_te).flatten().flatten()) {
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn nearmiss_output_is_balanced(
        points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 4..40),
    ) {
        let labels: Vec<bool> = points.iter().map(|p| p.2).collect();
        let n_pos = labels.iter().filter(|l| **l).count();
        prop_assume!(n_pos > 0 && n_pos < labels.len());
        let samples: Vec<Vec<f64>> = points.iter().map(|p| vec![p.0, p.1]).collect();
        let keep = nearmiss_undersample(&samples, &labels, 3).unwrap();
        let kept_pos = keep.iter().filter(|&&i| labels[i]).count();
        prop_assert_eq!(kept_pos * 2, keep.len());
        prop_assert_eq!(kept_pos, n_pos.min(labels.len() - n_pos));
    }
}

#[test]
fn synthetic_pipeline_is_balanced_and_leak_free() {
    let corpus = synthetic_corpus(&SynthConfig::default()).unwrap();
    let raw = corpus.dataset().unwrap();
    let (neg, pos) = raw.class_counts();
    assert!(pos > 0 && neg > pos, "{neg} / {pos}");
    let ds = raw.undersample(3).unwrap();
    let (neg, pos) = ds.class_counts();
    assert_eq!(neg, pos);

    let folds = fold_assignment(&ds, 5, 10, 17).unwrap();
    assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), 50);
    let subjects = ds.subjects();
    for repeat in &folds {
        let union: BTreeSet<String> = repeat.iter().flatten().cloned().collect();
        assert_eq!(union, subjects);
        for (i, a) in repeat.iter().enumerate() {
            for b in &repeat[i + 1..] {
                assert!(a.is_disjoint(b));
            }
        }
    }
}

#[test]
fn too_few_subjects_rejected() {
    let corpus = synthetic_corpus(&SynthConfig { subjects: 4, ir_subject_fraction: 1.0, ..SynthConfig::default() }).unwrap();
    let ds = corpus.dataset().unwrap();
    assert!(run_cv(&ds, RuptureModelKind::Lstm, Fusion::Audio, &CvConfig::default()).is_err());
}

#[test]
fn separable_corpus_late_fusion_precision() {
    let t0 = Instant::now();
    let ds = synthetic_corpus(&SynthConfig::default()).unwrap().dataset().unwrap().undersample(3).unwrap();
    let cfg = CvConfig::default();
    let late = run_cv(&ds, RuptureModelKind::Bilstm, Fusion::Late, &cfg).unwrap();
    let facial = run_cv(&ds, RuptureModelKind::Lstm, Fusion::Facial, &cfg).unwrap();
    assert_eq!(late.folds.len(), 50);
    for f in &late.folds {
        let train: BTreeSet<_> = f.train_subjects.iter().collect();
        assert!(f.test_subjects.iter().all(|s| !train.contains(s)));
    }
    let reports = vec![facial, late];
    println!("{}", render_table(&reports));
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    assert!(reports[1].summary.precision.mean >= 0.9);
    assert_eq!(rank_by_precision(&reports)[0], 1);
}

#[test]
fn trained_detector_flags_planted_rupture() {
    let corpus = synthetic_corpus(&SynthConfig::default()).unwrap();
    let ds = corpus.dataset().unwrap().undersample(3).unwrap();
    let det = train_detector(&ds, RuptureModelKind::Gru, Fusion::Late, &Default::default(), TieBreak::Audio).unwrap();
    let mut hits = 0;
    for (f, a) in ds.facial.iter().zip(&ds.audio) {
        let p = det.ir_probability(&TurnFeatures { facial: f.matrix.clone(), audio: a.matrix.clone() }).unwrap();
        assert!((0.0..=1.0).contains(&p));
        hits += usize::from((p >= 0.5) == f.label);
    }
    assert!(hits as f64 / ds.len() as f64 > 0.9, "{hits} / {}", ds.len());
    let bad = TurnFeatures { facial: vec![vec![0.0; 3]; 10], audio: vec![vec![0.0; 25]; 10] };
    assert!(det.ir_probability(&bad).is_err());
    let json = serde_json::to_string(&det).unwrap();
    let back: coach_core::rupture::TrainedRuptureDetector = serde_json::from_str(&json).unwrap();
    assert_eq!(back, det);
}
