use motif::cpc::{AggregatorConfig, CpcConfig, ModelConfig};
use motif::datapipe::{synth_recordings, DataPrep, SynthConfig, WindowConfig};
use motif::encoder::EncoderConfig;
use motif::pretrainer::{extract_tokens, pretrain, PretrainState, TrainConfig};
use motif::quantizer::CodebookConfig;
use motif::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::base().with_channels(&[4, 4, 6, 8]),
        codebook: CodebookConfig {
            groups: 2,
            vars: 6,
            ..CodebookConfig::default()
        },
        aggregator: AggregatorConfig {
            num_blocks: 2,
            filters: 8,
            ..AggregatorConfig::default()
        },
        cpc: CpcConfig {
            horizon: 3,
            negatives: 5,
        },
        ..ModelConfig::default()
    }
}

fn data() -> (
    DataPrep,
    Vec<motif::datapipe::SensorWindow>,
    Vec<motif::datapipe::SensorWindow>,
) {
    let recs = synth_recordings(&SynthConfig {
        participants: 5,
        seconds_per_class: 5.0,
        seed: 2,
        ..SynthConfig::default()
    });
    let prep = DataPrep::fit(&recs, &WindowConfig::default(), 2).unwrap();
    let train = prep.windows(&recs, &prep.split.train).unwrap();
    let val = prep.windows(&recs, &prep.split.val).unwrap();
    (prep, train, val)
}

fn train_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        batch: 8,
        max_epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_is_deterministic_and_checkpoints_round_trip() {
    let (_, train, val) = data();
    let a = pretrain(&train, &val, &tiny_model(), &train_cfg(1e-3)).unwrap();
    let b = pretrain(&train, &val, &tiny_model(), &train_cfg(1e-3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.meta.history.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.save(&path).unwrap();
    let loaded = PretrainState::load(&path).unwrap();
    assert_eq!(loaded, a);
    let tokens = extract_tokens(&a, &val).unwrap();
    assert_eq!(tokens, extract_tokens(&loaded, &val).unwrap());
    assert_eq!(tokens.len(), val.len());
    let frames = tiny_model().encoder.output_len(100);
    for (t, w) in tokens.iter().zip(&val) {
        assert_eq!(t.len(), frames);
        assert_eq!(t.label, w.label);
        assert!(t.ids.iter().all(|&id| id < 36));
    }
}

#[test]
fn zero_learning_rate_only_moves_the_initialized_codebook() {
    let (_, train, val) = data();
    let cfg = TrainConfig {
        l2: 0.0,
        ..train_cfg(0.0)
    };
    let trained = pretrain(&train, &val, &tiny_model(), &cfg).unwrap();
    let fresh = PretrainState::init(tiny_model(), cfg).unwrap();
    let mut compared = 0;
    for (id, name, value) in fresh.store.iter() {
        if name.starts_with("quantizer.") {
            continue;
        }
        assert_eq!(trained.store.get(id), value, "{name} changed");
        compared += 1;
    }
    assert!(compared > 10);
}

#[test]
fn corrupt_or_missing_checkpoints_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        PretrainState::load(&dir.path().join("absent.ckpt")),
        Err(Error::MissingInput { .. })
    ));
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(PretrainState::load(&bad).is_err());
}
