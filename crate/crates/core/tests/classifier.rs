use motif::classifier::{
    argmax_first, evaluate, macro_f1, run_protocol, train_classifier, Classifier, ClassifierConfig,
    GridPoint, Phase, ProtocolConfig, RnnKind, SplitKind, Task,
};
use motif::datapipe::make_folds;
use motif::tokens::{TokenSequence, END, PAD, START};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(rnn: RnnKind) -> ClassifierConfig {
    ClassifierConfig {
        embedding_dim: 8,
        rnn,
        hidden: 12,
        layers: 1,
        mlp: vec![12],
        batch: 16,
        epochs: 12,
        lr: 1e-2,
        ..ClassifierConfig::default()
    }
}

/// Class `c` sequences are mostly token `4 + c` among noise tokens.
fn toy(n_per_class: usize, participants: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..n_per_class {
        for c in 0..2u32 {
            let len = rng.random_range(5..15);
            let mut ids = vec![START];
            ids.extend((0..len).map(|_| {
                if rng.random_bool(0.7) {
                    4 + c
                } else {
                    rng.random_range(6..10)
                }
            }));
            ids.push(END);
            out.push(TokenSequence::new(
                ids,
                Some(c),
                format!("p{}", i % participants),
            ));
        }
    }
    out
}

const TASK: Task = Task {
    vocab_size: 10,
    num_classes: 2,
};

/// Per-class F1 from precision and recall read off a confusion matrix.
fn f1_from_confusion(truth: &[u32], pred: &[u32]) -> f64 {
    let k = truth
        .iter()
        .chain(pred)
        .max()
        .map_or(0, |m| *m as usize + 1);
    let mut m = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t as usize][p as usize] += 1;
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        let row: usize = m[c].iter().sum();
        let col: usize = m.iter().map(|r| r[c]).sum();
        if row + col == 0 {
            continue;
        }
        present += 1;
        let tp = m[c][c] as f64;
        if tp > 0.0 {
            let (p, r) = (tp / col as f64, tp / row as f64);
            sum += 2.0 * p * r / (p + r);
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

proptest! {
    #[test]
    fn macro_f1_matches_confusion_oracle(pairs in prop::collection::vec((0u32..5, 0u32..5), 1..60)) {
        let (t, p): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        prop_assert!((macro_f1(&t, &p) - f1_from_confusion(&t, &p)).abs() < 1e-12);
    }

    #[test]
    fn argmax_keeps_first_maximum(v in prop::collection::vec(0u8..4, 1..20)) {
        let vals: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(argmax_first(&vals), vals.iter().position(|&x| x == max));
    }
}

#[test]
fn separable_toy_task_is_learned() {
    for rnn in [RnnKind::Gru, RnnKind::Lstm] {
        let train = toy(60, 6, 1);
        let val = toy(15, 3, 2);
        let test = toy(30, 3, 3);
        let out = train_classifier(&train, &val, TASK, &small(rnn), None).unwrap();
        let eval = evaluate(&out.model, &test).unwrap();
        assert!(eval.macro_f1 > 0.95, "{rnn:?}: F1 {}", eval.macro_f1);
        let best = out
            .history
            .iter()
            .filter_map(|e| e.val_f1)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.history[out.best_epoch - 1].val_f1, Some(best));
    }
}

#[test]
fn trailing_padding_does_not_change_logits() {
    let model = Classifier::new(&small(RnnKind::Lstm), TASK, None).unwrap();
    let short = TokenSequence::new(vec![START, 4, 5, 6, END], Some(0), "p");
    let long = TokenSequence::new(vec![START, 7, 8, 9, 4, 5, 6, 7, 8, END], Some(1), "p");
    let alone = model.logits(std::slice::from_ref(&short)).unwrap();
    let batched = model.logits(&[short.clone(), long]).unwrap();
    for j in 0..2 {
        assert!((alone[[0, j]] - batched[[0, j]]).abs() < 1e-10);
    }
    let mut padded = short.clone();
    padded.ids.extend([PAD, PAD, PAD]);
    let p = model.logits(&[padded]).unwrap();
    for j in 0..2 {
        assert!((alone[[0, j]] - p[[0, j]]).abs() < 1e-10);
    }
}

#[test]
fn frozen_embeddings_stay_fixed() {
    let table = Array2::from_shape_fn((10, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
    let out = train_classifier(
        &toy(20, 4, 4),
        &toy(5, 2, 5),
        TASK,
        &small(RnnKind::Gru),
        Some(&table),
    )
    .unwrap();
    assert!(out.model.is_frozen());
    assert_eq!(out.model.embedding_table(), &table);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = ClassifierConfig {
        lr: 0.0,
        l2: 0.0,
        epochs: 3,
        ..small(RnnKind::Gru)
    };
    let fresh = Classifier::new(&cfg, TASK, None).unwrap();
    let out = train_classifier(&toy(20, 4, 6), &[], TASK, &cfg, None).unwrap();
    assert_eq!(out.model.embedding_table(), fresh.embedding_table());
    assert!(!out.model.is_frozen());
}

#[test]
fn protocol_is_deterministic_and_reads_test_last() {
    let data = toy(40, 10, 7);
    let people: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
    let plan = make_folds(&people, 3).unwrap();
    let grid = [
        GridPoint { lr: 1e-2, l2: 0.0 },
        GridPoint { lr: 3e-3, l2: 1e-4 },
    ];
    let cfg = ClassifierConfig {
        epochs: 4,
        ..small(RnnKind::Gru)
    };
    let proto = ProtocolConfig {
        folds: Some(2),
        runs: 2,
        seed: 3,
    };
    let (a, audit) = run_protocol(&data, &plan, &grid, &cfg, TASK, &proto, None).unwrap();
    let (b, _) = run_protocol(&data, &plan, &grid, &cfg, TASK, &proto, None).unwrap();
    assert_eq!(a.grid, b.grid);
    assert_eq!(a.test_runs, b.test_runs);
    let means: Vec<f64> = a.grid.iter().map(|r| r.mean_val_f1).collect();
    assert_eq!(Some(a.selected), argmax_first(&means));
    assert_eq!(a.selected_point, grid[a.selected]);
    assert_eq!(a.test_runs.len(), 4);
    assert!(a.audit.test_untouched_before_selection);
    assert_eq!(a.audit.test_reads, 4);
    assert_eq!(a.audit.test_reads_during_selection, 0);
    let log = audit.accesses();
    let last_sel = log
        .iter()
        .filter(|x| x.phase == Phase::Selection)
        .map(|x| x.order)
        .max()
        .unwrap();
    assert!(log
        .iter()
        .filter(|x| x.split == SplitKind::Test)
        .all(|x| x.order > last_sel));
}
