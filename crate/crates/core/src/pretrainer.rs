//! VQ-CPC pre-training loop, learning-rate schedule, early stopping,
//! checkpointing and token extraction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cpc::{ModelConfig, VqCpc};
use crate::datapipe::{DataPrep, SensorWindow};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Mode;
use crate::par;
use crate::params::{Adam, ParamStore};
use crate::tokens::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled weight decay.
    pub l2: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub warmup_frac: f64,
    pub patience: usize,
    /// Early stopping never triggers at or before this epoch.
    pub min_epoch: usize,
    pub seed: u64,
    /// Seed codewords from encoder outputs of one training batch.
    #[serde(default = "yes")]
    pub data_init_codebook: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            l2: 1e-4,
            batch: 128,
            max_epochs: 50,
            warmup_frac: 0.08,
            patience: 5,
            min_epoch: 20,
            seed: 0,
            data_init_codebook: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config("warmup_frac must be in (0, 1)".into()));
        }
        if self.patience == 0 || self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "patience, batch and max_epochs must be >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.l2 >= 0.0) {
            return Err(Error::Config("lr and l2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ((self.warmup_frac * total_steps as f64).round() as usize).clamp(1, total_steps.max(1))
    }
}

/// Linear warmup to `cfg.lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps(total_steps);
    if step <= warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience counter that only counts non-improving epochs after `min_epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_epoch: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_epoch: usize) -> Self {
        Self {
            patience,
            min_epoch,
            best: None,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// `epoch` is 1-based.
    pub fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| val < b);
        if improved {
            self.best = Some(val);
            self.best_epoch = epoch;
            self.bad = 0;
        } else if epoch > self.min_epoch {
            self.bad += 1;
        }
        StopDecision {
            improved,
            stop: self.bad >= self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_cpc: f64,
    pub val_vq: f64,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Preprocessing the model was trained under, when known.
    #[serde(default)]
    pub data: Option<DataPrep>,
}

/// Everything needed to resume or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub meta: StateMeta,
    pub store: ParamStore,
    pub adam: Adam,
}

const CHECKPOINT_KIND: &str = "vq-cpc";

impl PretrainState {
    /// Freshly initialized model.
    pub fn init(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        VqCpc::new(model.clone(), &mut store, &mut stream(train.seed, 0))?;
        Ok(Self {
            meta: StateMeta {
                model,
                train,
                step: 0,
                epoch: 0,
                best_val: None,
                history: Vec::new(),
                stopped_early: false,
                data: None,
            },
            store,
            adam: Adam::new(),
        })
    }

    pub fn model(&self) -> Result<VqCpc> {
        VqCpc::bind(self.meta.model.clone(), &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            &self.meta,
            &self.store,
            Some(&self.adam),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store, adam) = checkpoint::load::<StateMeta>(path, CHECKPOINT_KIND)?;
        let state = Self {
            meta,
            store,
            adam: adam.unwrap_or_default(),
        };
        state.model()?;
        Ok(state)
    }
}

/// Independent deterministic random stream `id` for `seed`.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn batches<'a>(
    windows: &'a [SensorWindow],
    order: &[usize],
    size: usize,
) -> Vec<Vec<&'a SensorWindow>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| &windows[i]).collect())
        .collect()
}

/// Mean validation losses `(total, cpc, vq)` in eval mode with fixed negatives.
pub fn evaluate_loss(
    model: &VqCpc,
    store: &ParamStore,
    windows: &[SensorWindow],
    batch: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if windows.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut neg = stream(seed, 3);
    let order: Vec<usize> = (0..windows.len()).collect();
    let mut acc = (0.0, 0.0, 0.0);
    for b in batches(windows, &order, batch) {
        let mut g = Graph::new();
        let n = model.forward(&mut g, store, &b, &mut Mode::Eval, &mut neg)?;
        let w = b.len() as f64;
        acc.0 += w * g.scalar(n.total);
        acc.1 += w * g.scalar(n.cpc);
        acc.2 += w * g.scalar(n.vq);
    }
    let n = windows.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Trains from scratch and returns the state with the best validation loss.
pub fn pretrain(
    train: &[SensorWindow],
    val: &[SensorWindow],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<PretrainState> {
    pretrain_with(train, val, model, cfg, &mut |_| {})
}

/// [`pretrain`] with a per-epoch observer.
pub fn pretrain_with(
    train: &[SensorWindow],
    val: &[SensorWindow],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PretrainState> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    cfg.validate()?;
    let mut state = PretrainState::init(model_cfg.clone(), cfg.clone())?;
    let model = state.model()?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.max_epochs;

    let mut shuffle = stream(cfg.seed, 1);
    let mut drop = stream(cfg.seed, 2);
    let mut neg = stream(cfg.seed, 4);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_epoch);
    let mut best: Option<(ParamStore, Adam, u64, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    if cfg.data_init_codebook {
        let mut r = stream(cfg.seed, 5);
        let mut pick = order.clone();
        pick.shuffle(&mut r);
        let refs: Vec<&SensorWindow> = pick.iter().take(cfg.batch).map(|&i| &train[i]).collect();
        model.init_codebook(&mut state.store, &refs, &mut r)?;
    }

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut train_loss = 0.0;
        let mut lr = 0.0;
        for b in batches(train, &order, cfg.batch) {
            let mut g = Graph::new();
            let nodes = model.forward(
                &mut g,
                &state.store,
                &b,
                &mut Mode::Train(&mut drop),
                &mut neg,
            )?;
            train_loss += b.len() as f64 * g.scalar(nodes.total);
            let grads = g.backward(nodes.total).into_params();
            state.meta.step += 1;
            lr = lr_at(state.meta.step as usize, total_steps, cfg);
            state.adam.update(&mut state.store, &grads, lr, cfg.l2);
        }
        let (val_loss, val_cpc, val_vq) =
            evaluate_loss(&model, &state.store, val, cfg.batch, cfg.seed)?;
        let decision = stopper.observe(epoch, val_loss);
        state.meta.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
            val_cpc,
            val_vq,
            lr,
            improved: decision.improved,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} (cpc {:.4}, vq {:.4}) lr {:.2e}",
            record.train_loss,
            val_loss,
            val_cpc,
            val_vq,
            lr
        );
        on_epoch(&record);
        state.meta.history.push(record);
        if decision.improved {
            best = Some((
                state.store.clone(),
                state.adam.clone(),
                state.meta.step,
                epoch,
            ));
            state.meta.best_val = Some(val_loss);
        }
        if decision.stop {
            state.meta.stopped_early = true;
            break;
        }
    }
    if let Some((store, adam, step, epoch)) = best {
        state.store = store;
        state.adam = adam;
        state.meta.step = step;
        state.meta.epoch = epoch;
    }
    Ok(state)
}

/// Eval-mode composite codeword ids, one sequence of `F` symbols per window.
pub fn extract_tokens(
    state: &PretrainState,
    windows: &[SensorWindow],
) -> Result<Vec<TokenSequence>> {
    let model = state.model()?;
    let chunks: Vec<&[SensorWindow]> = windows.chunks(64).collect();
    let coded = par::map(&chunks, |c| {
        let refs: Vec<&SensorWindow> = c.iter().collect();
        model.codes(&state.store, &refs)
    });
    let mut out = Vec::with_capacity(windows.len());
    for (chunk, codes) in chunks.iter().zip(coded) {
        for (w, ids) in chunk.iter().zip(codes?) {
            out.push(TokenSequence::new(ids, w.label, w.participant_id.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        let total = 1000;
        let warm = cfg.warmup_steps(total);
        assert_eq!(warm, 80);
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert_eq!(lr_at(warm, total, &cfg), 1e-4);
        assert_eq!(lr_at(total, total, &cfg), 0.0);
        assert!((lr_at(warm + (total - warm) / 2, total, &cfg) - 5e-5).abs() < 1e-12);
        assert!((lr_at(warm + 1, total, &cfg) - lr_at(warm, total, &cfg)).abs() < 1e-8);
    }

    #[test]
    fn early_stopping_waits_for_min_epoch() {
        let mut s = EarlyStopping::new(5, 20);
        let mut stopped = None;
        for epoch in 1..=50 {
            let val = if epoch == 1 { 1.0 } else { 2.0 };
            if s.observe(epoch, val).stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(25));
        assert_eq!(s.best_epoch, 1);

        let mut s = EarlyStopping::new(2, 0);
        assert!(s.observe(1, 3.0).improved);
        assert!(!s.observe(2, 3.0).stop);
        assert!(s.observe(3, 2.0).improved);
        assert!(!s.observe(4, 2.5).stop);
        assert!(s.observe(5, 2.5).stop);
    }

    #[test]
    fn rejects_bad_config_and_empty_splits() {
        let bad = TrainConfig {
            warmup_frac: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(matches!(
            pretrain(&[], &[], &ModelConfig::desk(), &TrainConfig::default()),
            Err(Error::EmptySplit("train"))
        ));
    }
}
