//! Desk-scale acceptance checks and the end-to-end synthetic pipeline behind
//! `motif repro`.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::classifier::{
    evaluate, run_protocol, train_classifier, ClassifierConfig, GridPoint, ProtocolConfig, Task,
};
use crate::cpc::{chance_loss, cpc_loss, AggregatorConfig, CpcConfig, ModelConfig, VqCpc};
use crate::datapipe::{
    make_folds, synth_class_is_static, synth_recordings, windows_of, DataPrep, FoldPlan,
    SensorWindow, NUM_FOLDS,
};
use crate::encoder::{stack_windows, Encoder, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Mat};
use crate::lm::pretrain_lm;
use crate::nn::Mode;
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::pipeline::PipelineConfig;
use crate::pretrainer::{extract_tokens, pretrain};
use crate::quantizer::{quantize, usage_stats, CodebookConfig, Quantizer};
use crate::sax::{
    breakpoints, paa, sax_discretize, sax_discretize_all, symbol, SaxConfig, SaxRepeat,
};
use crate::tokens::{class_histograms, frame_all, TokenSequence, Vocabulary, END, START};

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn run_check(criterion: u8, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let seconds = t.elapsed().as_secs_f64();
    log::info!(
        "criterion {criterion} {}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    Check {
        criterion,
        name: name.to_string(),
        passed,
        detail,
        seconds,
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Nearest codeword by exhaustive search; the first index wins ties.
fn brute_force_nearest(entries: &Mat, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (v, e) in entries.rows().into_iter().enumerate() {
        let d: f64 = e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (v, d);
        }
    }
    best.0
}

/// Quantizer indices and loss terms against exhaustive search on 1,000 frames.
pub fn quantizer_oracle(seed: u64) -> Result<(bool, String)> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (8, 1000);
    let mut mismatches = 0usize;
    let mut max_err: f64 = 0.0;
    for groups in [1, 2] {
        for vars in [4, 16, 64] {
            let cfg = CodebookConfig {
                groups,
                vars,
                gamma: 0.25,
                init_std: 1.0,
            };
            let mut store = ParamStore::new();
            let q = Quantizer::new(cfg, d, &mut store, &mut rng)?;
            let z = normal_matrix(n, d, &mut rng);
            let mut g = Graph::new();
            let zv = g.input(z.clone());
            let nodes = q.forward(&mut g, &store, zv)?;
            let cb = q.codebook(&store);
            let sub = d / groups;
            let mut sq = 0.0;
            for i in 0..n {
                for gi in 0..groups {
                    let x: Vec<f64> = z.row(i).iter().skip(gi * sub).take(sub).copied().collect();
                    let want = brute_force_nearest(&cb.entries[gi], &x);
                    mismatches += usize::from(nodes.indices[[i, gi]] != want);
                    let e = cb.entries[gi].row(want);
                    sq += x
                        .iter()
                        .zip(e.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
            }
            let hand = sq / n as f64;
            let plain = quantize(&z, &cb)?;
            let vq = q.loss(&mut g, &nodes);
            for (got, want) in [
                (g.scalar(nodes.codebook_term), hand),
                (g.scalar(nodes.commitment_term), hand),
                (plain.codebook_term, hand),
                (g.scalar(vq), hand * 1.25),
            ] {
                max_err = max_err.max((got - want).abs());
            }
            mismatches += plain
                .indices
                .iter()
                .zip(nodes.indices.iter())
                .filter(|(a, b)| a != b)
                .count();
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = mismatches == 0 && max_err <= 1e-9 && secs < 10.0;
    Ok((
        ok,
        format!("index mismatches {mismatches}, max loss error {max_err:.1e}, {secs:.2}s (< 10s)"),
    ))
}

fn gradient_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::base().with_channels(&[4, 6, 8, 8]),
        codebook: CodebookConfig {
            groups: 2,
            vars: 5,
            ..CodebookConfig::default()
        },
        aggregator: AggregatorConfig {
            num_blocks: 2,
            filters: 8,
            dropout: 0.2,
        },
        cpc: CpcConfig {
            horizon: 3,
            negatives: 4,
        },
        window_len: 20,
        input_rate_hz: 50.0,
    }
}

/// Offset, scaled sinusoid plus noise: latents spread over the codebook.
fn varied_window(len: usize, rng: &mut impl Rng) -> SensorWindow {
    let amp: f64 = rng.random_range(0.5..3.0);
    let freq: f64 = rng.random_range(0.1..0.8);
    let off: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let values = Array2::from_shape_fn((len, 3), |(t, c)| {
        off[c] + amp * (freq * t as f64 + c as f64).sin()
    });
    SensorWindow {
        values: values.mapv(|v| v + 0.3 * rng.random_range(-1.0..1.0)),
        label: None,
        participant_id: "p".into(),
    }
}

fn random_windows(n: usize, len: usize, rng: &mut impl Rng) -> Vec<SensorWindow> {
    (0..n)
        .map(|_| SensorWindow {
            values: Array2::from_shape_fn((len, 3), |_| rng.random_range(-1.0..1.0)),
            label: None,
            participant_id: "p".into(),
        })
        .collect()
}

/// Largest relative error `|num - ana| / max(|num|, |ana|, 1e-6)` between
/// central differences and reverse mode, over the six entries of each
/// parameter with the largest analytic gradient plus two random entries.
/// `f` returns the objective and the codeword assignment it used. Entries
/// whose perturbation changes the assignment, or whose central differences at
/// `h` and `h/2` disagree (a ReLU kink inside the stencil), sit on a
/// non-differentiable point and are skipped. Returns the error and how many compared entries
/// had a gradient above 1e-6.
fn fd_max_rel(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    rng: &mut impl Rng,
    f: &mut dyn FnMut(&ParamStore) -> (f64, Vec<usize>),
) -> (f64, usize) {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut informative = 0;
    for &id in ids {
        let (rows, cols) = store.get(id).dim();
        let grad = analytic
            .param(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros((rows, cols)));
        let mut order: Vec<usize> = (0..rows * cols).collect();
        order.sort_by(|&a, &b| {
            grad.as_slice().unwrap()[b]
                .abs()
                .total_cmp(&grad.as_slice().unwrap()[a].abs())
        });
        let mut picks: Vec<usize> = order.into_iter().take(6).collect();
        picks.extend((0..2).map(|_| rng.random_range(0..rows * cols)));
        for k in picks {
            let (r, c) = (k / cols, k % cols);
            let orig = store.get(id)[[r, c]];
            let mut eval = |delta: f64, store: &mut ParamStore| {
                store.get_mut(id)[[r, c]] = orig + delta;
                let out = f(store);
                store.get_mut(id)[[r, c]] = orig;
                out
            };
            let (up, a_up) = eval(h, store);
            let (down, a_down) = eval(-h, store);
            let (up2, a_up2) = eval(h / 2.0, store);
            let (down2, a_down2) = eval(-h / 2.0, store);
            let wide = (up - down) / (2.0 * h);
            let narrow = (up2 - down2) / h;
            if a_up != a_down
                || a_up2 != a_up
                || a_down2 != a_up
                || (wide - narrow).abs() > 1e-5 * wide.abs().max(narrow.abs()) + 1e-9
            {
                continue;
            }
            let num = (up - down) / (2.0 * h);
            let ana = grad[[r, c]];
            let scale = num.abs().max(ana.abs());
            worst = worst.max((num - ana).abs() / scale.max(1e-6));
            informative += usize::from(scale > 1e-6);
        }
    }
    (worst, informative)
}

fn all_zero(grads: &Gradients, ids: &[ParamId]) -> bool {
    ids.iter()
        .all(|&id| grads.param(id).is_none_or(|m| m.iter().all(|&v| v == 0.0)))
}

/// Finite differences against reverse mode for every parameter group, plus
/// the routing rules of the straight-through estimator.
pub fn gradient_routing(seed: u64) -> Result<(bool, String)> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = gradient_model();
    let model = VqCpc::new(cfg.clone(), &mut store, &mut rng)?;
    let ws: Vec<SensorWindow> = (0..6)
        .map(|_| varied_window(cfg.window_len, &mut rng))
        .collect();
    let refs: Vec<&SensorWindow> = ws.iter().collect();
    model.init_codebook(&mut store, &refs, &mut rng)?;
    let neg_seed = seed ^ 0x5eed;
    let negs = || ChaCha8Rng::seed_from_u64(neg_seed);

    let mut g = Graph::new();
    let nodes = model.forward(&mut g, &store, &refs, &mut Mode::Eval, &mut negs())?;
    let grads = g.backward(nodes.total);
    let vq_only = g.backward(nodes.vq);
    let cpc_only = g.backward(nodes.cpc);
    let cb_only = g.backward(nodes.quant.codebook_term);
    let z0 = g.value(nodes.z).clone();
    let zhat0 = g.value(nodes.quant.st).clone();
    let n = z0.nrows() as f64;
    let frames = nodes.frames;

    let mut agg_ids = model.aggregator.param_ids();
    agg_ids.extend(model.heads.param_ids());
    let mut total = |s: &ParamStore| {
        let mut g = Graph::new();
        let n = model
            .forward(&mut g, s, &refs, &mut Mode::Eval, &mut negs())
            .expect("forward");
        (g.scalar(n.total), n.quant.indices.iter().copied().collect())
    };
    let (agg_err, agg_n) = fd_max_rel(&mut store, &agg_ids, &grads, &mut rng, &mut total);

    let mut cb_term = |s: &ParamStore| {
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let q = model.quantizer.forward(&mut g, s, z).expect("quantize");
        (
            g.scalar(q.codebook_term),
            q.indices.iter().copied().collect(),
        )
    };
    let (cb_err, cb_n) = fd_max_rel(
        &mut store,
        &model.quantizer.entries,
        &grads,
        &mut rng,
        &mut cb_term,
    );

    // The encoder sees the commitment term directly and the contrastive term
    // through the straight-through copy, with the selected codewords held fixed.
    let offset = &zhat0 - &z0;
    let gamma = cfg.codebook.gamma;
    let mut surrogate = |s: &ParamStore| {
        let mut g = Graph::new();
        let x = g.constant(stack_windows(&refs));
        let z = model
            .encoder
            .forward(&mut g, s, x, cfg.window_len, &mut Mode::Eval)
            .expect("encode");
        let off = g.constant(offset.clone());
        let st = g.add(z, off);
        let ctx = model
            .aggregator
            .forward(&mut g, s, st, frames, &mut Mode::Eval);
        let cpc = cpc_loss(
            &mut g,
            s,
            &model.heads,
            ctx,
            st,
            refs.len(),
            frames,
            &cfg.cpc,
            &mut negs(),
        )
        .expect("cpc");
        let zh = g.constant(zhat0.clone());
        let d = g.sub(z, zh);
        let cm = g.sum_sq(d);
        (g.scalar(cpc) + gamma * g.scalar(cm) / n, Vec::new())
    };
    let (enc_err, enc_n) = fd_max_rel(
        &mut store,
        &model.encoder.param_ids(),
        &grads,
        &mut rng,
        &mut surrogate,
    );

    let detached_ok = all_zero(&vq_only, &agg_ids);
    let cb_ids = &model.quantizer.entries;
    let codebook_only = all_zero(&cpc_only, cb_ids)
        && cb_ids
            .iter()
            .all(|&id| match (grads.param(id), cb_only.param(id)) {
                (Some(a), Some(b)) => a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12),
                (None, None) => true,
                _ => false,
            });
    let worst = agg_err.max(cb_err).max(enc_err);
    let secs = started.elapsed().as_secs_f64();
    let informative = agg_n >= 8 && enc_n >= 8 && cb_n >= 4;
    let ok = worst < 1e-4 && informative && detached_ok && codebook_only && secs < 60.0;
    Ok((
        ok,
        format!(
            "max rel err encoder {enc_err:.1e} ({enc_n} entries) codebook {cb_err:.1e} ({cb_n}) aggregator+heads {agg_err:.1e} ({agg_n}) (< 1e-4); \
             aggregator zero under VQ-only {detached_ok}; codebook grads from codebook term only {codebook_only}; {secs:.1}s"
        ),
    ))
}

/// Frame counts of the three rate variants on 100-step windows.
pub fn length_arithmetic(seed: u64) -> Result<(bool, String)> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = random_windows(1, 100, &mut rng).remove(0);
    let mut ok = true;
    let mut parts = Vec::new();
    for (variant, want) in [
        (EncoderVariant::Base, 49),
        (EncoderVariant::Full50Hz, 97),
        (EncoderVariant::Half11_5Hz, 23),
    ] {
        let cfg = EncoderConfig::variant(variant).with_channels(&[4, 4, 4, 4]);
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut rng);
        let predicted = cfg.output_len(100);
        let encoded = enc.encode(&store, &window, 50.0)?;
        let got = encoded.frames.nrows();
        ok &= predicted == want && got == want;
        parts.push(format!(
            "{} {predicted}/{got} at {:.1} Hz",
            variant.tag(),
            encoded.frame_rate
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    Ok((
        ok,
        format!("{} (want 49/97/23), {secs:.2}s", parts.join(", ")),
    ))
}

/// Untrained contrastive loss of the desk model on synthetic windows, 5 seeds.
pub fn infonce_sanity(cfg: &PipelineConfig) -> Result<(bool, String)> {
    let started = Instant::now();
    let recs = synth_recordings(&cfg.synth);
    let prep = DataPrep::fit(&recs, &cfg.window, cfg.seed)?;
    let windows = prep.windows(&recs, &prep.split.train)?;
    let model_cfg = ModelConfig {
        cpc: CpcConfig {
            negatives: 10,
            ..cfg.model.cpc.clone()
        },
        ..cfg.model.clone()
    };
    let chance = chance_loss(10);
    let mut losses = Vec::new();
    for s in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s));
        let mut store = ParamStore::new();
        let model = VqCpc::new(model_cfg.clone(), &mut store, &mut rng)?;
        let picks: Vec<&SensorWindow> = (0..16)
            .map(|_| &windows[rng.random_range(0..windows.len())])
            .collect();
        let mut g = Graph::new();
        let nodes = model.forward(&mut g, &store, &picks, &mut Mode::Eval, &mut rng)?;
        losses.push(g.scalar(nodes.cpc));
    }
    let worst = losses
        .iter()
        .map(|l| (l - chance).abs())
        .fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.3}")).collect();
    Ok((
        worst <= 0.3 && secs < 30.0,
        format!(
            "losses [{}] vs ln 11 = {chance:.3}, max deviation {worst:.3} (<= 0.3), {secs:.1}s",
            shown.join(", ")
        ),
    ))
}

/// Bisection on the normal CDF.
fn normal_quantile_bisect(p: f64) -> f64 {
    let n = Normal::standard();
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Uniform random rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate(window: &SensorWindow, r: &[[f64; 3]; 3]) -> SensorWindow {
    let mut out = window.clone();
    for mut row in out.values.rows_mut() {
        let v = [row[0], row[1], row[2]];
        for (i, ri) in r.iter().enumerate() {
            row[i] = ri[0] * v[0] + ri[1] * v[1] + ri[2] * v[2];
        }
    }
    out
}

/// Breakpoints, PAA means, bin frequencies and rotation invariance.
pub fn sax_oracles(cfg: &PipelineConfig) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bp_err: f64 = 0.0;
    for a in [2usize, 3, 4, 5, 8, 10, 16, 20, 64, 512] {
        for (i, b) in breakpoints(a).iter().enumerate() {
            bp_err = bp_err.max((b - normal_quantile_bisect((i + 1) as f64 / a as f64)).abs());
        }
    }

    let mut paa_err: f64 = 0.0;
    for &(len, segs) in &[
        (100usize, 50usize),
        (100, 25),
        (100, 10),
        (96, 12),
        (7, 7),
        (12, 1),
    ] {
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = paa(&x, segs)?;
        let m1 = x.iter().sum::<f64>() / len as f64;
        let m2 = p.iter().sum::<f64>() / segs as f64;
        paa_err = paa_err.max((m1 - m2).abs());
    }

    let samples: Vec<f64> = (0..1_000_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut min_p: f64 = 1.0;
    for a in [16usize, 512] {
        let bps = breakpoints(a);
        let mut counts = vec![0usize; a];
        for &v in &samples {
            counts[symbol(v, &bps) as usize] += 1;
        }
        let expected = samples.len() as f64 / a as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((a - 1) as f64).map_err(|e| Error::Config(e.to_string()))?;
        min_p = min_p.min(1.0 - dist.cdf(chi2));
    }

    let recs = synth_recordings(&cfg.synth);
    let ids: Vec<String> = recs.iter().map(|r| r.participant_id.clone()).collect();
    let windows = windows_of(&recs, &ids, &cfg.window)?;
    let sax = SaxConfig {
        alphabet_size: 16,
        ..cfg.sax.clone()
    };
    let mut rotations_checked = 0usize;
    let mut rotation_mismatch = 0usize;
    for w in windows.iter().step_by((windows.len() / 40).max(1)) {
        let base = sax_discretize(w, &sax)?;
        for _ in 0..5 {
            let r = random_rotation(&mut rng);
            rotation_mismatch += usize::from(sax_discretize(&rotate(w, &r), &sax)?.ids != base.ids);
            rotations_checked += 1;
        }
    }
    let ok = bp_err <= 1e-9 && paa_err <= 1e-12 && min_p > 1e-3 && rotation_mismatch == 0;
    Ok((
        ok,
        format!(
            "breakpoint err {bp_err:.1e} (<= 1e-9), PAA mean err {paa_err:.1e} (<= 1e-12), \
             bin chi-square min p {min_p:.3} (> 0.001), rotated windows differing {rotation_mismatch}/{rotations_checked}"
        ),
    ))
}

/// Structural invariants of a five-fold plan over `ids`.
pub fn fold_plan_violations(plan: &FoldPlan, ids: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    if plan.folds.len() != NUM_FOLDS {
        out.push(format!("{} folds", plan.folds.len()));
    }
    if let Err(e) = plan.validate() {
        out.push(e.to_string());
    }
    let mut all: Vec<&String> = ids.iter().collect();
    all.sort();
    all.dedup();
    let mut tested: Vec<&String> = plan.folds.iter().flat_map(|f| &f.test).collect();
    tested.sort();
    if tested != all {
        out.push("test groups do not cover every participant exactly once".into());
    }
    let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
    if sizes.iter().max().unwrap_or(&0) - sizes.iter().min().unwrap_or(&0) > 1 {
        out.push(format!("unbalanced test sizes {sizes:?}"));
    }
    for (i, f) in plan.folds.iter().enumerate() {
        let mut members: Vec<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
        members.sort();
        if members != all {
            out.push(format!("fold {i} is not a partition of the participants"));
        }
        let rest = f.train.len() + f.val.len();
        let want_val = ((rest as f64) * 0.2).round().max(1.0) as usize;
        if f.val.len() != want_val || f.train.is_empty() {
            out.push(format!(
                "fold {i}: {} train / {} val",
                f.train.len(),
                f.val.len()
            ));
        }
    }
    out
}

fn toy_token_data(participants: usize, per: usize, rng: &mut impl Rng) -> Vec<TokenSequence> {
    let mut out = Vec::new();
    for p in 0..participants {
        for i in 0..per {
            let label = (i % 2) as u32;
            let mut ids = vec![START];
            ids.extend((0..8).map(|_| 4 + 2 * rng.random_range(0..3) + label));
            ids.push(END);
            out.push(TokenSequence::new(ids, Some(label), format!("p{p:02}")));
        }
    }
    out
}

/// Fold-plan invariants over 100 random participant sets, and the access
/// audit of a full protocol run.
pub fn protocol_integrity(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    for trial in 0..100 {
        let n = rng.random_range(NUM_FOLDS..=60);
        let ids: Vec<String> = (0..n)
            .map(|i| format!("s{:x}-{i}", rng.random::<u32>()))
            .collect();
        let plan_seed = rng.random();
        let plan = make_folds(&ids, plan_seed)?;
        if make_folds(&ids, plan_seed)? != plan {
            violations.push(format!("trial {trial}: plan not deterministic"));
        }
        violations.extend(
            fold_plan_violations(&plan, &ids)
                .into_iter()
                .map(|v| format!("trial {trial}: {v}")),
        );
    }

    let data = toy_token_data(10, 12, &mut rng);
    let ids: Vec<String> = data.iter().map(|s| s.participant_id.clone()).collect();
    let plan = make_folds(&ids, seed)?;
    let cfg = ClassifierConfig {
        embedding_dim: 8,
        hidden: 8,
        layers: 1,
        mlp: vec![8],
        batch: 32,
        epochs: 2,
        ..ClassifierConfig::desk()
    };
    let grid = vec![
        GridPoint { lr: 1e-2, l2: 0.0 },
        GridPoint { lr: 1e-3, l2: 0.0 },
    ];
    let proto = ProtocolConfig {
        folds: Some(2),
        runs: 1,
        seed,
    };
    let task = Task {
        vocab_size: 10,
        num_classes: 2,
    };
    let (report, audit) = run_protocol(&data, &plan, &grid, &cfg, task, &proto, None)?;
    let s = audit.summary();
    let ok = violations.is_empty()
        && s.test_untouched_before_selection
        && s.test_reads_during_selection == 0
        && s.test_reads == 2;
    let first = violations.first().cloned().unwrap_or_default();
    Ok((
        ok,
        format!(
            "{} plan violations {first}; audit: {} selection reads, {} test reads, {} during selection, test untouched before selection {}; {} grid points",
            violations.len(),
            s.selection_reads,
            s.test_reads,
            s.test_reads_during_selection,
            s.test_untouched_before_selection,
            report.grid.len()
        ),
    ))
}

/// Framed alternating two-symbol corpus `A B A B ...` (ids 4 and 5).
pub fn periodic_corpus(sequences: usize, len: usize) -> Vec<TokenSequence> {
    (0..sequences)
        .map(|i| {
            let mut ids = vec![START];
            ids.extend((0..len).map(|t| 4 + ((i + t) % 2) as u32));
            ids.push(END);
            TokenSequence::new(ids, None, "periodic")
        })
        .collect()
}

/// Metrics of the end-to-end synthetic run; compared bitwise across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndMetrics {
    pub participants: [usize; 3],
    pub windows: [usize; 3],
    pub pretrain_epochs: usize,
    pub val_cpc_first: f64,
    pub val_cpc_best: f64,
    pub distinct_codewords: usize,
    pub realized_vocab: usize,
    pub composite_size: u64,
    pub vq_f1: f64,
    pub sax_f1: f64,
    pub sax_repeat_f1: f64,
    pub lm_periodic_accuracy: f64,
    pub frozen_lm_f1: f64,
    pub frozen_random_f1: f64,
    pub static_top_fraction: f64,
    pub dynamic_top_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pretrain_s: f64,
    pub classify_vq_s: f64,
    pub lm_periodic_s: f64,
    pub total_s: f64,
}

struct Splits<T> {
    train: Vec<T>,
    val: Vec<T>,
    test: Vec<T>,
}

fn labeled(seqs: Vec<TokenSequence>) -> Vec<TokenSequence> {
    seqs.into_iter().filter(|s| s.label.is_some()).collect()
}

/// Builds the vocabulary on the training split, frames all three splits, and
/// returns held-out macro F1 (epoch chosen on validation).
fn holdout_f1(
    tokens: &Splits<TokenSequence>,
    classes: usize,
    cfg: &ClassifierConfig,
    embeddings: Option<&Mat>,
) -> Result<(f64, Vocabulary)> {
    let vocab = Vocabulary::build(&tokens.train)?;
    let frame = |s: &[TokenSequence]| labeled(frame_all(s, &vocab));
    let (train, val, test) = (
        frame(&tokens.train),
        frame(&tokens.val),
        frame(&tokens.test),
    );
    let task = Task {
        vocab_size: vocab.size(),
        num_classes: classes,
    };
    let out = train_classifier(&train, &val, task, cfg, embeddings)?;
    Ok((evaluate(&out.model, &test)?.macro_f1, vocab))
}

fn top_fraction_by(hist: &crate::tokens::ClassHistograms, want_static: bool) -> f64 {
    let picks: Vec<f64> = hist
        .classes
        .keys()
        .filter(|&&c| synth_class_is_static(c as usize) == want_static)
        .filter_map(|&c| hist.top_fraction(c))
        .collect();
    picks.iter().sum::<f64>() / picks.len().max(1) as f64
}

/// Synthetic data, VQ-CPC pretraining, token extraction, SAX and SAX-REPEAT
/// baselines, GRU classification, and the LM stage, on one 60:20:20 holdout.
pub fn end_to_end(cfg: &PipelineConfig) -> Result<(EndToEndMetrics, Timings)> {
    let started = Instant::now();
    let cfg = cfg.clone().resolved()?;
    let classes = cfg.synth.classes;
    let recs = synth_recordings(&cfg.synth);
    let prep = DataPrep::fit(&recs, &cfg.window, cfg.seed)?;
    let split = &prep.split;
    let norm = Splits {
        train: prep.windows(&recs, &split.train)?,
        val: prep.windows(&recs, &split.val)?,
        test: prep.windows(&recs, &split.test)?,
    };

    let t = Instant::now();
    let state = pretrain(&norm.train, &norm.val, &cfg.model, &cfg.pretrain)?;
    let pretrain_s = t.elapsed().as_secs_f64();
    let history = &state.meta.history;
    let vq = Splits {
        train: extract_tokens(&state, &norm.train)?,
        val: extract_tokens(&state, &norm.val)?,
        test: extract_tokens(&state, &norm.test)?,
    };
    let usage = usage_stats(
        vq.train
            .iter()
            .chain(&vq.val)
            .chain(&vq.test)
            .flat_map(|s| &s.ids),
    );
    let hist = class_histograms(&vq.train);

    let t = Instant::now();
    let (vq_f1, vocab) = holdout_f1(&vq, classes, &cfg.classifier, None)?;
    let classify_vq_s = t.elapsed().as_secs_f64();

    let raw = Splits {
        train: windows_of(&recs, &split.train, &cfg.window)?,
        val: windows_of(&recs, &split.val, &cfg.window)?,
        test: windows_of(&recs, &split.test, &cfg.window)?,
    };
    let sax = Splits {
        train: sax_discretize_all(&raw.train, &cfg.sax)?,
        val: sax_discretize_all(&raw.val, &cfg.sax)?,
        test: sax_discretize_all(&raw.test, &cfg.sax)?,
    };
    let (sax_f1, _) = holdout_f1(&sax, classes, &cfg.classifier, None)?;
    let repeat = SaxRepeat::fit(&raw.train, &cfg.sax, &cfg.sax_repeat)?;
    let rep = Splits {
        train: repeat.transform(&raw.train)?,
        val: repeat.transform(&raw.val)?,
        test: repeat.transform(&raw.test)?,
    };
    let (sax_repeat_f1, _) = holdout_f1(&rep, classes, &cfg.classifier, None)?;

    let t = Instant::now();
    let periodic = pretrain_lm(&periodic_corpus(256, 49), 6, &cfg.lm)?;
    let lm_periodic_s = t.elapsed().as_secs_f64();
    let lm_periodic_accuracy = periodic.history.last().map_or(0.0, |h| h.eval_accuracy);

    let lm_corpus = frame_all(&vq.train, &vocab);
    let lm = pretrain_lm(&lm_corpus, vocab.size(), &cfg.lm)?;
    let table = lm.model.input_embeddings();
    let std = (table.iter().map(|v| v * v).sum::<f64>() / table.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a61);
    let random_table = normal_matrix(table.nrows(), table.ncols(), &mut rng) * std;
    let (frozen_lm_f1, _) = holdout_f1(&vq, classes, &cfg.classifier, Some(&table))?;
    let (frozen_random_f1, _) = holdout_f1(&vq, classes, &cfg.classifier, Some(&random_table))?;

    let metrics = EndToEndMetrics {
        participants: [split.train.len(), split.val.len(), split.test.len()],
        windows: [norm.train.len(), norm.val.len(), norm.test.len()],
        pretrain_epochs: history.len(),
        val_cpc_first: history.first().map_or(f64::NAN, |h| h.val_cpc),
        val_cpc_best: history
            .iter()
            .map(|h| h.val_cpc)
            .fold(f64::INFINITY, f64::min),
        distinct_codewords: usage.distinct_codewords,
        realized_vocab: vocab.observed(),
        composite_size: cfg.model.codebook.composite_size(),
        vq_f1,
        sax_f1,
        sax_repeat_f1,
        lm_periodic_accuracy,
        frozen_lm_f1,
        frozen_random_f1,
        static_top_fraction: top_fraction_by(&hist, true),
        dynamic_top_fraction: top_fraction_by(&hist, false),
    };
    let timings = Timings {
        pretrain_s,
        classify_vq_s,
        lm_periodic_s,
        total_s: started.elapsed().as_secs_f64(),
    };
    log::info!("end-to-end metrics {metrics:?} timings {timings:?}");
    Ok((metrics, timings))
}

/// Checks 5, 6 and 8 from one end-to-end run.
pub fn end_to_end_checks(m: &EndToEndMetrics, t: &Timings, cfg: &PipelineConfig) -> Vec<Check> {
    let groups = cfg.model.codebook.groups;
    let vars = cfg.model.codebook.vars;
    let c5 = m.vq_f1 >= 0.80
        && m.vq_f1 - m.sax_f1 >= 0.10
        && t.pretrain_s <= 600.0
        && t.classify_vq_s <= 300.0;
    let c6 = groups == 2
        && vars == 20
        && m.distinct_codewords >= 8
        && (m.realized_vocab as u64) <= m.composite_size;
    let c8 = m.lm_periodic_accuracy > 0.9
        && t.lm_periodic_s <= 120.0
        && m.frozen_lm_f1 >= m.frozen_random_f1 - 0.02;
    vec![
        Check {
            criterion: 5,
            name: "end-to-end synthetic ordering".into(),
            passed: c5,
            detail: format!(
                "VQ-CPC F1 {:.3} (>= 0.80), SAX F1 {:.3}, margin {:.3} (>= 0.10), SAX-REPEAT F1 {:.3}; \
                 pretrain {:.0}s (<= 600), classify {:.0}s (<= 300)",
                m.vq_f1,
                m.sax_f1,
                m.vq_f1 - m.sax_f1,
                m.sax_repeat_f1,
                t.pretrain_s,
                t.classify_vq_s
            ),
            seconds: t.total_s,
        },
        Check {
            criterion: 6,
            name: "mode-collapse guard".into(),
            passed: c6,
            detail: format!(
                "G={groups} V={vars}: {} distinct codewords (>= 8), realized vocabulary {} (<= {})",
                m.distinct_codewords, m.realized_vocab, m.composite_size
            ),
            seconds: 0.0,
        },
        Check {
            criterion: 8,
            name: "LM stage".into(),
            passed: c8,
            detail: format!(
                "periodic masked accuracy {:.3} (> 0.9) in {:.0}s (<= 120); frozen LM F1 {:.3} vs frozen random F1 {:.3} (>= random - 0.02)",
                m.lm_periodic_accuracy, t.lm_periodic_s, m.frozen_lm_f1, m.frozen_random_f1
            ),
            seconds: 0.0,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub metrics: EndToEndMetrics,
    pub timings: Timings,
}

impl ReproReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("criterion  result  seconds  detail\n");
        for c in &self.checks {
            out += &format!(
                "{:>9}  {:<6}  {:>7.1}  {}: {}\n",
                c.criterion,
                if c.passed { "PASS" } else { "FAIL" },
                c.seconds,
                c.name,
                c.detail
            );
        }
        out
    }
}

/// All ten acceptance criteria. The end-to-end run executes twice, each
/// confined to one thread, and its metrics must match bitwise.
pub fn run_repro(cfg: &PipelineConfig) -> Result<ReproReport> {
    let cfg = cfg.clone().resolved()?;
    let seed = cfg.seed;
    let mut checks = vec![
        run_check(1, "quantizer oracle equivalence", || quantizer_oracle(seed)),
        run_check(2, "straight-through gradient routing", || {
            gradient_routing(seed)
        }),
        run_check(3, "length arithmetic", || length_arithmetic(seed)),
        run_check(4, "InfoNCE sanity", || infonce_sanity(&cfg)),
    ];
    let first = par::single_threaded(|| end_to_end(&cfg))?;
    let second = par::single_threaded(|| end_to_end(&cfg))?;
    checks.extend(end_to_end_checks(&first.0, &first.1, &cfg));
    checks.push(run_check(7, "SAX oracles", || sax_oracles(&cfg)));
    checks.push(run_check(9, "protocol integrity", || {
        protocol_integrity(seed)
    }));
    let same = serde_json::to_string(&first.0)? == serde_json::to_string(&second.0)?;
    checks.push(Check {
        criterion: 10,
        name: "determinism".into(),
        passed: same,
        detail: format!(
            "two single-threaded end-to-end runs with seed {seed}: metrics identical {same}"
        ),
        seconds: second.1.total_s,
    });
    checks.sort_by_key(|c| c.criterion);
    Ok(ReproReport {
        seed,
        checks,
        metrics: first.0,
        timings: first.1,
    })
}
