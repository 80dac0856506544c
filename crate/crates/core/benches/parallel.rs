use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use motif::cpc::ModelConfig;
use motif::datapipe::{synth_recordings, DataPrep, SensorWindow, SynthConfig, WindowConfig};
use motif::par;
use motif::pretrainer::{evaluate_loss, extract_tokens, PretrainState, TrainConfig};
use ndarray::Array2;

fn windows() -> Vec<SensorWindow> {
    let recs = synth_recordings(&SynthConfig {
        participants: 5,
        seconds_per_class: 10.0,
        ..SynthConfig::default()
    });
    let prep = DataPrep::fit(&recs, &WindowConfig::default(), 0).unwrap();
    let mut ws = prep.windows(&recs, &prep.split.train).unwrap();
    ws.truncate(64);
    ws
}

fn modes<F: Fn() + Sync + Send>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", par::threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", 1), |b| {
        b.iter(|| par::single_threaded(&f))
    });
    g.finish();
}

fn benches(c: &mut Criterion) {
    let a = Array2::from_shape_fn((512, 256), |(i, j)| ((i * 31 + j) % 17) as f64 * 0.1);
    let b = Array2::from_shape_fn((256, 256), |(i, j)| ((i + j * 7) % 13) as f64 * 0.1);
    modes(c, "matmul_512x256x256", || {
        black_box(par::matmul(a.view(), b.view()));
    });

    let ws = windows();
    let state = PretrainState::init(ModelConfig::desk(), TrainConfig::default()).unwrap();
    let model = state.model().unwrap();
    modes(c, "vqcpc_eval_loss_64_windows", || {
        black_box(evaluate_loss(&model, &state.store, &ws, 32, 0).unwrap());
    });
    modes(c, "extract_tokens_64_windows", || {
        black_box(extract_tokens(&state, &ws).unwrap());
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
