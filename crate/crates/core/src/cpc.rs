//! Causal convolutional aggregator and the multi-step contrastive objective.
//!
//! The aggregator reads quantized frames `zhat` and produces one context
//! vector per frame; block `b` (0-based) is a causal convolution with kernel
//! `b + 2`, followed by dropout, layer normalization and ReLU, with a
//! residual connection around the block. From every context `c_t` and every
//! step `s` in `1..=k` with `t + s` inside the window, a per-step linear head
//! scores the true future frame against negatives drawn uniformly from the
//! rest of the batch.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::datapipe::SensorWindow;
use crate::encoder::{find, stack_windows, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, ScorePair, Var};
use crate::nn::{dropout, LayerNorm, Linear, Mode};
use crate::params::{ParamId, ParamStore};
use crate::quantizer::{CodebookConfig, QuantizeNodes, Quantizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub num_blocks: usize,
    pub filters: usize,
    pub dropout: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            filters: 256,
            dropout: 0.2,
        }
    }
}

impl AggregatorConfig {
    pub fn kernel(&self, block: usize) -> usize {
        block + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpcConfig {
    pub horizon: usize,
    pub negatives: usize,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            negatives: 10,
        }
    }
}

#[derive(Clone, Debug)]
struct AggBlock {
    conv_w: ParamId,
    conv_b: ParamId,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    blocks: Vec<AggBlock>,
    /// Residual projection when the input width differs from `filters`.
    skip: Option<ParamId>,
}

impl Aggregator {
    pub fn new<R: Rng>(
        cfg: AggregatorConfig,
        input_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let skip = (input_dim != cfg.filters).then(|| {
            store.add_uniform("aggregator.skip", (input_dim, cfg.filters), input_dim, rng)
        });
        let mut c_in = input_dim;
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let fan_in = cfg.kernel(b) * c_in;
                let blk = AggBlock {
                    conv_w: store.add_uniform(
                        format!("aggregator.{b}.weight"),
                        (fan_in, cfg.filters),
                        fan_in,
                        rng,
                    ),
                    conv_b: store.add_uniform(
                        format!("aggregator.{b}.bias"),
                        (1, cfg.filters),
                        fan_in,
                        rng,
                    ),
                    norm: LayerNorm::new(store, &format!("aggregator.{b}.norm"), cfg.filters),
                };
                c_in = cfg.filters;
                blk
            })
            .collect();
        Self { cfg, blocks, skip }
    }

    pub fn bind(cfg: AggregatorConfig, input_dim: usize, store: &ParamStore) -> Result<Self> {
        let skip = if input_dim != cfg.filters {
            Some(find(store, "aggregator.skip")?)
        } else {
            None
        };
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                Ok(AggBlock {
                    conv_w: find(store, &format!("aggregator.{b}.weight"))?,
                    conv_b: find(store, &format!("aggregator.{b}.bias"))?,
                    norm: LayerNorm {
                        gain: find(store, &format!("aggregator.{b}.norm.gain"))?,
                        bias: find(store, &format!("aggregator.{b}.norm.bias"))?,
                        eps: 1e-5,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, blocks, skip })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.skip.into_iter().collect();
        for b in &self.blocks {
            ids.extend([b.conv_w, b.conv_b, b.norm.gain, b.norm.bias]);
        }
        ids
    }

    /// `x` is `(B*F) x d`; output is `(B*F) x filters`, causal per sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seq_len: usize,
        mode: &mut Mode,
    ) -> Var {
        let mut h = x;
        for (b, blk) in self.blocks.iter().enumerate() {
            let k = self.cfg.kernel(b);
            let cols = g.im2col(h, seq_len, k, 1, k - 1);
            let w = g.param(store, blk.conv_w);
            let bias = g.param(store, blk.conv_b);
            let y = g.matmul(cols, w);
            let y = g.add_row(y, bias);
            let y = dropout(g, y, self.cfg.dropout, mode);
            let y = blk.norm.forward(g, store, y);
            let y = g.relu(y);
            let residual = match (b, self.skip) {
                (0, Some(p)) => {
                    let w = g.param(store, p);
                    g.matmul(h, w)
                }
                _ => h,
            };
            h = g.add(residual, y);
        }
        h
    }
}

/// One per-step linear head per future offset, stored side by side.
#[derive(Clone, Debug)]
pub struct CpcHeads {
    pub proj: Linear,
    pub horizon: usize,
    pub target_dim: usize,
}

impl CpcHeads {
    pub fn new<R: Rng>(
        context_dim: usize,
        target_dim: usize,
        horizon: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(
                store,
                "cpc.proj",
                context_dim,
                horizon * target_dim,
                true,
                rng,
            ),
            horizon,
            target_dim,
        }
    }

    pub fn bind(target_dim: usize, horizon: usize, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            proj: Linear {
                w: find(store, "cpc.proj.weight")?,
                b: Some(find(store, "cpc.proj.bias")?),
            },
            horizon,
            target_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.proj.w).chain(self.proj.b).collect()
    }
}

/// Candidates for one (sequence, t, step) prediction: the true target first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub context_row: usize,
    pub step: usize,
    pub candidates: Vec<usize>,
}

/// Enumerates every valid `(b, t, s)` and draws fresh negatives for each,
/// uniformly over all batch rows except the true target.
pub fn sample_candidates(
    batch: usize,
    seq_len: usize,
    cfg: &CpcConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<CandidateSet>> {
    if seq_len <= 1 {
        return Err(Error::SequenceTooShort { frames: seq_len });
    }
    let rows = batch * seq_len;
    let mut out = Vec::new();
    for b in 0..batch {
        for s in 1..=cfg.horizon.min(seq_len - 1) {
            for t in 0..seq_len - s {
                let target = b * seq_len + t + s;
                let mut candidates = Vec::with_capacity(cfg.negatives + 1);
                candidates.push(target);
                for _ in 0..cfg.negatives {
                    let u = rng.random_range(0..rows - 1);
                    candidates.push(if u >= target { u + 1 } else { u });
                }
                out.push(CandidateSet {
                    context_row: b * seq_len + t,
                    step: s,
                    candidates,
                });
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy of picking the true candidate, over all candidate sets.
pub fn cpc_loss_with(
    g: &mut Graph,
    store: &ParamStore,
    heads: &CpcHeads,
    contexts: Var,
    targets: Var,
    sets: &[CandidateSet],
) -> Var {
    let proj = heads.proj.forward(g, store, contexts);
    let width = heads.target_dim;
    let cols = sets.first().map_or(1, |s| s.candidates.len());
    let mut pairs = Vec::with_capacity(sets.len() * cols);
    for set in sets {
        debug_assert_eq!(set.candidates.len(), cols);
        for &c in &set.candidates {
            pairs.push(ScorePair {
                a_row: set.context_row,
                a_col: (set.step - 1) * width,
                b_row: c,
            });
        }
    }
    let scores = g.scores(proj, targets, pairs, width, cols);
    g.cross_entropy(scores, vec![Some(0); sets.len()])
}

/// Samples candidates and evaluates the contrastive loss.
#[allow(clippy::too_many_arguments)]
pub fn cpc_loss(
    g: &mut Graph,
    store: &ParamStore,
    heads: &CpcHeads,
    contexts: Var,
    targets: Var,
    batch: usize,
    seq_len: usize,
    cfg: &CpcConfig,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let sets = sample_candidates(batch, seq_len, cfg, rng)?;
    Ok(cpc_loss_with(g, store, heads, contexts, targets, &sets))
}

/// Complete VQ-CPC model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub codebook: CodebookConfig,
    pub aggregator: AggregatorConfig,
    pub cpc: CpcConfig,
    pub window_len: usize,
    pub input_rate_hz: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::base(),
            codebook: CodebookConfig::default(),
            aggregator: AggregatorConfig::default(),
            cpc: CpcConfig::default(),
            window_len: 100,
            input_rate_hz: 50.0,
        }
    }
}

impl ModelConfig {
    /// Narrower widths for single-core runs; same layout otherwise.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::base().with_channels(&[16, 32, 64, 64]),
            codebook: CodebookConfig {
                groups: 2,
                vars: 20,
                ..CodebookConfig::default()
            },
            aggregator: AggregatorConfig {
                filters: 64,
                ..AggregatorConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn frames(&self) -> usize {
        self.encoder.output_len(self.window_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.codebook.validate(self.encoder.latent_dim())?;
        if self.cpc.horizon == 0 || self.cpc.negatives == 0 {
            return Err(Error::Config(
                "cpc horizon and negatives must be >= 1".into(),
            ));
        }
        if self.aggregator.num_blocks == 0 || self.aggregator.filters == 0 {
            return Err(Error::Config("aggregator needs at least one block".into()));
        }
        if self.frames() == 0 {
            return Err(Error::WindowTooShort {
                len: self.window_len,
                needed: self.encoder.receptive_field(),
            });
        }
        Ok(())
    }
}

/// Encoder, quantizer, aggregator and prediction heads over one parameter store.
#[derive(Clone, Debug)]
pub struct VqCpc {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub quantizer: Quantizer,
    pub aggregator: Aggregator,
    pub heads: CpcHeads,
}

/// Graph nodes of one pre-training forward pass.
pub struct PretrainNodes {
    pub z: Var,
    pub quant: QuantizeNodes,
    pub contexts: Var,
    pub cpc: Var,
    pub vq: Var,
    pub total: Var,
    pub frames: usize,
}

impl VqCpc {
    pub fn new<R: Rng>(cfg: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.latent_dim();
        let encoder = Encoder::new(cfg.encoder.clone(), store, rng);
        let quantizer = Quantizer::new(cfg.codebook.clone(), d, store, rng)?;
        let aggregator = Aggregator::new(cfg.aggregator.clone(), d, store, rng);
        let heads = CpcHeads::new(cfg.aggregator.filters, d, cfg.cpc.horizon, store, rng);
        Ok(Self {
            cfg,
            encoder,
            quantizer,
            aggregator,
            heads,
        })
    }

    pub fn bind(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.latent_dim();
        Ok(Self {
            encoder: Encoder::bind(cfg.encoder.clone(), store)?,
            quantizer: Quantizer::bind(cfg.codebook.clone(), d, store)?,
            aggregator: Aggregator::bind(cfg.aggregator.clone(), d, store)?,
            heads: CpcHeads::bind(d, cfg.cpc.horizon, store)?,
            cfg,
        })
    }

    fn check_windows(&self, windows: &[&SensorWindow]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::EmptySplit("batch"));
        }
        for w in windows {
            if w.len() != self.cfg.window_len {
                return Err(Error::DimensionMismatch {
                    expected: self.cfg.window_len,
                    got: w.len(),
                });
            }
            if w.channels() != self.cfg.encoder.in_channels {
                return Err(Error::DimensionMismatch {
                    expected: self.cfg.encoder.in_channels,
                    got: w.channels(),
                });
            }
        }
        Ok(())
    }

    /// Full objective: `cpc + codebook + gamma * commitment`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[&SensorWindow],
        mode: &mut Mode,
        negatives_rng: &mut dyn RngCore,
    ) -> Result<PretrainNodes> {
        self.check_windows(windows)?;
        let x = g.constant(stack_windows(windows));
        let z = self
            .encoder
            .forward(g, store, x, self.cfg.window_len, mode)?;
        let frames = self.cfg.frames();
        let quant = self.quantizer.forward(g, store, z)?;
        let contexts = self.aggregator.forward(g, store, quant.st, frames, mode);
        let cpc = cpc_loss(
            g,
            store,
            &self.heads,
            contexts,
            quant.st,
            windows.len(),
            frames,
            &self.cfg.cpc,
            negatives_rng,
        )?;
        let vq = self.quantizer.loss(g, &quant);
        let total = g.add(cpc, vq);
        Ok(PretrainNodes {
            z,
            quant,
            contexts,
            cpc,
            vq,
            total,
            frames,
        })
    }

    /// Seeds every codebook group with k-means++ picks among the eval-mode
    /// latents of `windows`.
    pub fn init_codebook<R: Rng>(
        &self,
        store: &mut ParamStore,
        windows: &[&SensorWindow],
        rng: &mut R,
    ) -> Result<()> {
        self.check_windows(windows)?;
        let mut g = Graph::new();
        let x = g.constant(stack_windows(windows));
        let z = self
            .encoder
            .forward(&mut g, store, x, self.cfg.window_len, &mut Mode::Eval)?;
        self.quantizer.init_from_data(store, g.value(z), rng);
        Ok(())
    }

    /// Eval-mode composite codes (`F` per window).
    pub fn codes(&self, store: &ParamStore, windows: &[&SensorWindow]) -> Result<Vec<Vec<u32>>> {
        self.check_windows(windows)?;
        let mut g = Graph::new();
        let x = g.constant(stack_windows(windows));
        let z = self
            .encoder
            .forward(&mut g, store, x, self.cfg.window_len, &mut Mode::Eval)?;
        let cb = self.quantizer.codebook(store);
        let idx = crate::quantizer::assign(g.value(z), &cb.entries);
        let frames = self.cfg.frames();
        let vars = self.cfg.codebook.vars;
        Ok((0..windows.len())
            .map(|b| {
                (0..frames)
                    .map(|t| crate::quantizer::composite_id(idx.row(b * frames + t), vars))
                    .collect()
            })
            .collect())
    }
}

/// Reference scalar for an untrained contrastive head: `ln(1 + negatives)`.
pub fn chance_loss(negatives: usize) -> f64 {
    ((negatives + 1) as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_agg(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        filters: usize,
    ) -> Aggregator {
        Aggregator::new(
            AggregatorConfig {
                num_blocks: 3,
                filters,
                dropout: 0.2,
            },
            dim,
            store,
            rng,
        )
    }

    #[test]
    fn aggregator_is_causal_and_length_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let agg = small_agg(&mut store, &mut rng, 6, 6);
        let (batch, f) = (2, 12);
        let base = Array2::from_shape_fn((batch * f, 6), |_| rng.random_range(-1.0..1.0));
        let run = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let c = agg.forward(&mut g, &store, v, f, &mut Mode::Eval);
            g.value(c).clone()
        };
        let c0 = run(&base);
        assert_eq!(c0.dim(), (batch * f, 6));
        for t in [0, 5, 11] {
            let mut x = base.clone();
            x[[f + t, 2]] += 0.7;
            let c1 = run(&x);
            for s in 0..f {
                let changed = (0..6).any(|j| c1[[f + s, j]] != c0[[f + s, j]]);
                if s < t || s >= t + 7 {
                    assert!(!changed, "perturb t={t} reached context s={s}");
                } else if s == t {
                    assert!(changed);
                }
                assert!(
                    (0..6).all(|j| c1[[s, j]] == c0[[s, j]]),
                    "other sequence touched"
                );
            }
        }
    }

    #[test]
    fn aggregator_with_projection_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let agg = small_agg(&mut store, &mut rng, 4, 6);
        let f = 9;
        let base = Array2::from_shape_fn((f, 4), |_| rng.random_range(-1.0..1.0));
        let run = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let c = agg.forward(&mut g, &store, v, f, &mut Mode::Eval);
            g.value(c).clone()
        };
        let c0 = run(&base);
        let mut x = base.clone();
        x[[4, 0]] -= 1.0;
        let c1 = run(&x);
        for s in 0..f {
            let changed = (0..6).any(|j| c1[[s, j]] != c0[[s, j]]);
            assert!(changed || s != 4);
            assert!(!changed || s >= 4);
        }
    }

    #[test]
    fn zero_input_gives_finite_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let agg = small_agg(&mut store, &mut rng, 5, 5);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Array2::zeros((49, 5)));
        let c = agg.forward(&mut g, &store, x, 49, &mut Mode::Eval);
        assert_eq!(g.shape(c), (49, 5));
        assert!(g.value(c).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn candidate_sampling_excludes_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CpcConfig {
            horizon: 3,
            negatives: 6,
        };
        let sets = sample_candidates(3, 5, &cfg, &mut rng).unwrap();
        assert_eq!(sets.len(), 3 * (4 + 3 + 2));
        for s in &sets {
            assert_eq!(s.candidates[0], s.context_row + s.step);
            assert!(s.candidates[1..]
                .iter()
                .all(|&c| c != s.candidates[0] && c < 15));
        }
        assert!(matches!(
            sample_candidates(2, 1, &cfg, &mut rng),
            Err(Error::SequenceTooShort { frames: 1 })
        ));
    }

    fn tiny_cfg() -> ModelConfig {
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

    fn windows(n: usize, len: usize, seed: u64) -> Vec<SensorWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| SensorWindow {
                values: Array2::from_shape_fn((len, 3), |_| rng.random_range(-1.0..1.0)),
                label: None,
                participant_id: "p".into(),
            })
            .collect()
    }

    #[test]
    fn hand_computed_two_frame_loss() {
        // batch 2, F = 2, k = 1: one prediction per sequence
        let mut store = ParamStore::new();
        let w = store.add(
            "cpc.proj.weight",
            Array2::from_shape_vec((2, 2), vec![1.0, 0.5, -0.5, 2.0]).unwrap(),
        );
        let b = store.add(
            "cpc.proj.bias",
            Array2::from_shape_vec((1, 2), vec![0.1, -0.2]).unwrap(),
        );
        let heads = CpcHeads {
            proj: Linear { w, b: Some(b) },
            horizon: 1,
            target_dim: 2,
        };
        let ctx =
            Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 0.3, 0.3, 0.0, 1.0, -1.0, 2.0]).unwrap();
        let tgt =
            Array2::from_shape_vec((4, 2), vec![0.2, 0.4, -1.0, 0.5, 0.7, 0.0, 0.1, -0.3]).unwrap();
        let sets = vec![
            CandidateSet {
                context_row: 0,
                step: 1,
                candidates: vec![1, 0, 3],
            },
            CandidateSet {
                context_row: 2,
                step: 1,
                candidates: vec![3, 1, 2],
            },
        ];
        let mut g = Graph::new();
        let c = g.constant(ctx.clone());
        let t = g.constant(tgt.clone());
        let loss = cpc_loss_with(&mut g, &store, &heads, c, t, &sets);

        // c0 W + b = (1.1, 0.3); c2 W + b = (-0.4, 1.8)
        let p0 = [1.1, 0.3];
        let p2 = [-0.4, 1.8];
        let dot = |p: [f64; 2], r: usize| p[0] * tgt[[r, 0]] + p[1] * tgt[[r, 1]];
        let ce = |p: [f64; 2], cands: &[usize]| {
            let s: Vec<f64> = cands.iter().map(|&r| dot(p, r)).collect();
            let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - s[0]
        };
        let expected = 0.5 * (ce(p0, &[1, 0, 3]) + ce(p2, &[3, 1, 2]));
        assert!(
            (g.scalar(loss) - expected).abs() < 1e-12,
            "{} vs {expected}",
            g.scalar(loss)
        );
        assert!(matches!(
            cpc_loss(
                &mut g,
                &store,
                &heads,
                c,
                t,
                4,
                1,
                &CpcConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn identical_candidates_give_chance_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let heads = CpcHeads::new(4, 3, 2, &mut store, &mut rng);
        let ctx = Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
        let tgt = Array2::from_shape_fn((10, 3), |(_, j)| j as f64);
        let mut g = Graph::new();
        let c = g.constant(ctx);
        let t = g.constant(tgt);
        let cfg = CpcConfig {
            horizon: 2,
            negatives: 10,
        };
        let loss = cpc_loss(&mut g, &store, &heads, c, t, 2, 5, &cfg, &mut rng).unwrap();
        assert!((g.scalar(loss) - chance_loss(10)).abs() < 1e-12);
    }

    #[test]
    fn untrained_loss_near_chance() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let model = VqCpc::new(tiny_cfg(), &mut store, &mut rng).unwrap();
            let ws = windows(4, 20, seed + 100);
            let refs: Vec<&SensorWindow> = ws.iter().collect();
            let mut g = Graph::new();
            let nodes = model
                .forward(&mut g, &store, &refs, &mut Mode::Eval, &mut rng)
                .unwrap();
            let cpc = g.scalar(nodes.cpc);
            assert!((cpc - chance_loss(4)).abs() < 0.3, "seed {seed}: {cpc}");
            assert_eq!(nodes.frames, 9);
            assert_eq!(g.shape(nodes.contexts), (4 * 9, 8));
        }
    }

    #[test]
    fn loss_ignores_negative_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let heads = CpcHeads::new(5, 4, 3, &mut store, &mut rng);
        let ctx = Array2::from_shape_fn((12, 5), |_| rng.random_range(-1.0..1.0));
        let tgt = Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0));
        let cfg = CpcConfig {
            horizon: 3,
            negatives: 6,
        };
        let sets = sample_candidates(2, 6, &cfg, &mut rng).unwrap();
        let mut shuffled = sets.clone();
        for s in &mut shuffled {
            s.candidates[1..].reverse();
            s.candidates[1..].rotate_left(2);
        }
        let eval = |sets: &[CandidateSet]| {
            let mut g = Graph::new();
            let c = g.constant(ctx.clone());
            let t = g.constant(tgt.clone());
            let l = cpc_loss_with(&mut g, &store, &heads, c, t, sets);
            g.scalar(l)
        };
        assert!((eval(&sets) - eval(&shuffled)).abs() < 1e-12);
    }

    #[test]
    fn total_is_cpc_plus_vq() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let model = VqCpc::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let ws = windows(3, 20, 6);
        let refs: Vec<&SensorWindow> = ws.iter().collect();
        let mut g = Graph::new();
        let n = model
            .forward(&mut g, &store, &refs, &mut Mode::Eval, &mut rng)
            .unwrap();
        let cb = g.scalar(n.quant.codebook_term);
        let cm = g.scalar(n.quant.commitment_term);
        assert!((g.scalar(n.vq) - (cb + 0.25 * cm)).abs() < 1e-12);
        assert!((g.scalar(n.total) - (g.scalar(n.cpc) + g.scalar(n.vq))).abs() < 1e-9);
    }

    fn fd_check(
        store: &mut ParamStore,
        ids: &[ParamId],
        analytic: &Gradients,
        f: &mut dyn FnMut(&ParamStore) -> f64,
        tol: f64,
    ) {
        let h = 1e-5;
        for &id in ids {
            let shape = store.get(id).dim();
            for r in 0..shape.0.min(3) {
                for c in 0..shape.1.min(3) {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + h;
                    let up = f(store);
                    store.get_mut(id)[[r, c]] = orig - h;
                    let down = f(store);
                    store.get_mut(id)[[r, c]] = orig;
                    let num = (up - down) / (2.0 * h);
                    let ana = analytic.param(id).map_or(0.0, |g| g[[r, c]]);
                    assert!(
                        (num - ana).abs() <= tol * (1.0 + num.abs()),
                        "{} [{r},{c}]: numeric {num} analytic {ana}",
                        store.name(id)
                    );
                }
            }
        }
    }

    use crate::graph::Gradients;

    #[test]
    fn gradients_are_routed_through_the_quantizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let model = VqCpc::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let ws = windows(3, 20, 9);
        let refs: Vec<&SensorWindow> = ws.iter().collect();
        model.init_codebook(&mut store, &refs, &mut rng).unwrap();
        let neg_seed = 5;
        let mut g = Graph::new();
        let nodes = model
            .forward(
                &mut g,
                &store,
                &refs,
                &mut Mode::Eval,
                &mut ChaCha8Rng::seed_from_u64(neg_seed),
            )
            .unwrap();
        let grads = g.backward(nodes.total);
        let z0 = g.value(nodes.z).clone();
        let zhat0 = g.value(nodes.quant.st).clone();
        let n = z0.nrows() as f64;
        let frames = nodes.frames;

        // aggregator and heads: only the contrastive term depends on them
        let mut ids = model.aggregator.param_ids();
        ids.extend(model.heads.param_ids());
        let mut total = |s: &ParamStore| {
            let mut g = Graph::new();
            let n = model
                .forward(
                    &mut g,
                    s,
                    &refs,
                    &mut Mode::Eval,
                    &mut ChaCha8Rng::seed_from_u64(neg_seed),
                )
                .unwrap();
            g.scalar(n.total)
        };
        fd_check(&mut store, &ids, &grads, &mut total, 1e-5);

        // codebook: learns from the codebook term alone
        let mut cb_term = |s: &ParamStore| {
            let mut g = Graph::new();
            let z = g.constant(z0.clone());
            let q = model.quantizer.forward(&mut g, s, z).unwrap();
            g.scalar(q.codebook_term)
        };
        fd_check(
            &mut store,
            &model.quantizer.entries,
            &grads,
            &mut cb_term,
            1e-5,
        );

        // encoder: commitment plus the contrastive term through the
        // straight-through copy, with the selected codewords frozen
        let offset = &zhat0 - &z0;
        let gamma = model.cfg.codebook.gamma;
        let mut surrogate = |s: &ParamStore| {
            let mut g = Graph::new();
            let x = g.constant(stack_windows(&refs));
            let z = model
                .encoder
                .forward(&mut g, s, x, 20, &mut Mode::Eval)
                .unwrap();
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
                3,
                frames,
                &model.cfg.cpc,
                &mut ChaCha8Rng::seed_from_u64(neg_seed),
            )
            .unwrap();
            let zh = g.constant(zhat0.clone());
            let d = g.sub(z, zh);
            let cm = g.sum_sq(d);
            g.scalar(cpc) + gamma * g.scalar(cm) / n
        };
        fd_check(
            &mut store,
            &model.encoder.param_ids(),
            &grads,
            &mut surrogate,
            1e-4,
        );
    }

    #[test]
    fn vq_only_backward_leaves_aggregator_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let model = VqCpc::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let ws = windows(2, 20, 1);
        let refs: Vec<&SensorWindow> = ws.iter().collect();
        let mut g = Graph::new();
        let nodes = model
            .forward(&mut g, &store, &refs, &mut Mode::Eval, &mut rng)
            .unwrap();
        let grads = g.backward(nodes.vq);
        for id in model
            .aggregator
            .param_ids()
            .into_iter()
            .chain(model.heads.param_ids())
        {
            assert!(grads.param(id).is_none_or(|m| m.iter().all(|&v| v == 0.0)));
        }
        assert!(model
            .encoder
            .param_ids()
            .iter()
            .any(|&id| grads.param(id).is_some()));
    }

    #[test]
    fn one_adam_step_reduces_loss() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let model = VqCpc::new(tiny_cfg(), &mut store, &mut rng).unwrap();
            let ws = windows(4, 20, 40 + seed);
            let refs: Vec<&SensorWindow> = ws.iter().collect();
            let eval = |s: &ParamStore| {
                let mut g = Graph::new();
                let n = model
                    .forward(
                        &mut g,
                        s,
                        &refs,
                        &mut Mode::Eval,
                        &mut ChaCha8Rng::seed_from_u64(1),
                    )
                    .unwrap();
                (g.scalar(n.total), g.backward(n.total).into_params())
            };
            let (before, grads) = eval(&store);
            let mut adam = crate::params::Adam::new();
            adam.update(&mut store, &grads, 1e-3, 0.0);
            let (after, _) = eval(&store);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn bind_recovers_the_same_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let model = VqCpc::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let again = VqCpc::bind(tiny_cfg(), &store).unwrap();
        let ws = windows(2, 20, 3);
        let refs: Vec<&SensorWindow> = ws.iter().collect();
        assert_eq!(
            model.codes(&store, &refs).unwrap(),
            again.codes(&store, &refs).unwrap()
        );
        assert_eq!(model.codes(&store, &refs).unwrap()[0].len(), 9);
    }
}
