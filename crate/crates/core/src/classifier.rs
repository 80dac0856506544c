//! Recurrent token classifier and the participant-wise evaluation protocol.
//!
//! Framed token ids are embedded, run through stacked GRU/LSTM layers (PAD
//! steps carry the state forward, so the final state is the one after the
//! last real token), then through an MLP with batch normalization.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datapipe::{ActivityId, FoldPlan};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{dropout, BatchNorm, BatchStats, GruLayer, Linear, LstmLayer, Mode};
use crate::par;
use crate::params::{Adam, ParamId, ParamStore};
use crate::pretrainer::stream;
use crate::tokens::{collate, TokenSequence, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Gru,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub embedding_dim: usize,
    pub rnn: RnnKind,
    pub hidden: usize,
    pub layers: usize,
    pub rnn_dropout: f64,
    pub mlp: Vec<usize>,
    pub mlp_dropout: f64,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            rnn: RnnKind::Gru,
            hidden: 128,
            layers: 2,
            rnn_dropout: 0.2,
            mlp: vec![256, 128],
            mlp_dropout: 0.2,
            lr: 1e-3,
            l2: 0.0,
            batch: 256,
            epochs: 50,
            lr_decay: 0.8,
            decay_every: 10,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    /// Narrower recurrent stack and fewer epochs for single-core runs.
    pub fn desk() -> Self {
        Self {
            embedding_dim: 32,
            hidden: 48,
            batch: 64,
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0
            || self.hidden == 0
            || self.layers == 0
            || self.batch == 0
            || self.epochs == 0
        {
            return Err(Error::Config(
                "classifier sizes, batch and epochs must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rnn_dropout) || !(0.0..1.0).contains(&self.mlp_dropout) {
            return Err(Error::Config("classifier dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`: decayed by `lr_decay` every `decay_every` epochs.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let k = (epoch.max(1) - 1) / self.decay_every.max(1);
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Sizes fixed by the data rather than by hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub vocab_size: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
enum RnnLayer {
    Gru(GruLayer),
    Lstm(LstmLayer),
}

impl RnnLayer {
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: Var,
        batch: usize,
        masks: &[Vec<bool>],
    ) -> Vec<Var> {
        match self {
            RnnLayer::Gru(l) => l.forward(g, store, xs, batch, masks),
            RnnLayer::Lstm(l) => l.forward(g, store, xs, batch, masks),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub task: Task,
    pub store: ParamStore,
    embedding: ParamId,
    frozen: bool,
    rnn: Vec<RnnLayer>,
    hidden_layers: Vec<(Linear, BatchNorm)>,
    head: Linear,
}

type BnStats = Vec<Option<BatchStats>>;

impl Classifier {
    /// A frozen `embeddings` table (`vocab_size x dim`) replaces the learned one.
    pub fn new(cfg: &ClassifierConfig, task: Task, embeddings: Option<&Mat>) -> Result<Self> {
        cfg.validate()?;
        if task.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = stream(cfg.seed, 10);
        let mut store = ParamStore::new();
        let (embedding, frozen, e_dim) = match embeddings {
            Some(table) => {
                if table.nrows() != task.vocab_size {
                    return Err(Error::DimensionMismatch {
                        expected: task.vocab_size,
                        got: table.nrows(),
                    });
                }
                (
                    store.add("classifier.embedding", table.clone()),
                    true,
                    table.ncols(),
                )
            }
            None => (
                store.add_normal(
                    "classifier.embedding",
                    (task.vocab_size, cfg.embedding_dim),
                    1.0,
                    &mut rng,
                ),
                false,
                cfg.embedding_dim,
            ),
        };
        let mut input = e_dim;
        let rnn = (0..cfg.layers)
            .map(|l| {
                let name = format!("classifier.rnn.{l}");
                let layer = match cfg.rnn {
                    RnnKind::Gru => RnnLayer::Gru(GruLayer::new(
                        &mut store, &name, input, cfg.hidden, &mut rng,
                    )),
                    RnnKind::Lstm => RnnLayer::Lstm(LstmLayer::new(
                        &mut store, &name, input, cfg.hidden, &mut rng,
                    )),
                };
                input = cfg.hidden;
                layer
            })
            .collect();
        let hidden_layers = cfg
            .mlp
            .iter()
            .enumerate()
            .map(|(i, &units)| {
                let lin = Linear::new(
                    &mut store,
                    &format!("classifier.mlp.{i}"),
                    input,
                    units,
                    true,
                    &mut rng,
                );
                let bn = BatchNorm::new(&mut store, &format!("classifier.mlp.{i}.bn"), units);
                input = units;
                (lin, bn)
            })
            .collect();
        let head = Linear::new(
            &mut store,
            "classifier.head",
            input,
            task.num_classes,
            true,
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            task,
            store,
            embedding,
            frozen,
            rnn,
            hidden_layers,
            head,
        })
    }

    pub fn embedding_table(&self) -> &Mat {
        self.store.get(self.embedding)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn forward(
        &self,
        g: &mut Graph,
        seqs: &[&TokenSequence],
        mode: &mut Mode,
    ) -> Result<(Var, BnStats)> {
        let batch = collate(seqs);
        let b = seqs.len();
        let mut idx = Vec::with_capacity(batch.max_len * b);
        for t in 0..batch.max_len {
            for row in &batch.ids {
                let id = row[t] as usize;
                if id >= self.task.vocab_size {
                    return Err(Error::DimensionMismatch {
                        expected: self.task.vocab_size,
                        got: id + 1,
                    });
                }
                idx.push(id);
            }
        }
        let masks: Vec<Vec<bool>> = (0..batch.max_len)
            .map(|t| batch.ids.iter().map(|row| row[t] != PAD).collect())
            .collect();
        let emb = g.param(&self.store, self.embedding);
        let mut xs = g.gather_rows(emb, idx);
        let mut last = g.constant(Array2::zeros((b, self.cfg.hidden)));
        for (l, layer) in self.rnn.iter().enumerate() {
            let states = layer.forward(g, &self.store, xs, b, &masks);
            if let Some(&s) = states.last() {
                last = s;
            }
            if l + 1 < self.rnn.len() && !states.is_empty() {
                let stacked = g.concat_rows(&states);
                xs = dropout(g, stacked, self.cfg.rnn_dropout, mode);
            }
        }
        let mut h = last;
        let mut stats = Vec::with_capacity(self.hidden_layers.len());
        let train = mode.is_train();
        for (lin, bn) in &self.hidden_layers {
            let y = lin.forward(g, &self.store, h);
            let (y, s) = bn.forward(g, &self.store, y, train);
            stats.push(s);
            let y = g.relu(y);
            h = dropout(g, y, self.cfg.mlp_dropout, mode);
        }
        Ok((self.head.forward(g, &self.store, h), stats))
    }

    /// Eval-mode logits, `N x num_classes`.
    pub fn logits(&self, seqs: &[TokenSequence]) -> Result<Mat> {
        let chunks: Vec<&[TokenSequence]> = seqs.chunks(self.cfg.batch.max(1)).collect();
        let parts = par::map(&chunks, |c| {
            let refs: Vec<&TokenSequence> = c.iter().collect();
            let mut g = Graph::new();
            let (out, _) = self.forward(&mut g, &refs, &mut Mode::Eval)?;
            Ok(g.value(out).clone())
        });
        let parts = parts.into_iter().collect::<Result<Vec<Mat>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.task.num_classes)));
        }
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
    }

    pub fn predict(&self, seqs: &[TokenSequence]) -> Result<Vec<ActivityId>> {
        let l = self.logits(seqs)?;
        Ok(l.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best as ActivityId
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

/// Unweighted mean F1 over every class that occurs in `truth` or `pred`.
pub fn macro_f1(truth: &[ActivityId], pred: &[ActivityId]) -> f64 {
    let classes: BTreeSet<ActivityId> = truth.iter().chain(pred).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| {
            let tp = truth
                .iter()
                .zip(pred)
                .filter(|(t, p)| **t == c && **p == c)
                .count() as f64;
            let fp = truth
                .iter()
                .zip(pred)
                .filter(|(t, p)| **t != c && **p == c)
                .count() as f64;
            let fn_ = truth
                .iter()
                .zip(pred)
                .filter(|(t, p)| **t == c && **p != c)
                .count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    sum / classes.len() as f64
}

pub fn confusion(truth: &[ActivityId], pred: &[ActivityId], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t as usize][p as usize] += 1;
    }
    m
}

fn labels(seqs: &[TokenSequence], num_classes: usize) -> Result<Vec<ActivityId>> {
    seqs.iter()
        .map(|s| match s.label {
            Some(l) if (l as usize) < num_classes => Ok(l),
            Some(l) => Err(Error::DimensionMismatch {
                expected: num_classes,
                got: l as usize + 1,
            }),
            None => Err(Error::format(
                "classifier input",
                format!("unlabeled sequence from {}", s.participant_id),
            )),
        })
        .collect()
}

pub fn evaluate(model: &Classifier, test: &[TokenSequence]) -> Result<Evaluation> {
    let truth = labels(test, model.task.num_classes)?;
    let pred = model.predict(test)?;
    let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
    Ok(Evaluation {
        macro_f1: macro_f1(&truth, &pred),
        accuracy: correct as f64 / truth.len().max(1) as f64,
        confusion: confusion(&truth, &pred, model.task.num_classes),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation F1 (the last epoch
    /// when there is no validation data).
    pub model: Classifier,
    pub best_epoch: usize,
    pub history: Vec<ClassifierEpoch>,
}

pub fn train_classifier(
    train: &[TokenSequence],
    val: &[TokenSequence],
    task: Task,
    cfg: &ClassifierConfig,
    embeddings: Option<&Mat>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let y = labels(train, task.num_classes)?;
    let seen: BTreeSet<ActivityId> = y.iter().copied().collect();
    if let Ok(vy) = labels(val, task.num_classes) {
        let unseen: BTreeSet<_> = vy.iter().filter(|l| !seen.contains(l)).collect();
        if !unseen.is_empty() {
            log::warn!("validation classes {unseen:?} never occur in training; they will be scored as errors");
        }
    }
    let mut model = Classifier::new(cfg, task, embeddings)?;
    let mut adam = Adam::new();
    let mut shuffle = stream(cfg.seed, 11);
    let mut drop = stream(cfg.seed, 12);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&TokenSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(y[i] as usize)).collect();
            let mut g = Graph::new();
            let (logits, stats) = model.forward(&mut g, &refs, &mut Mode::Train(&mut drop))?;
            for (r, t) in g.value(logits).rows().into_iter().zip(&targets) {
                let arg = r
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, &v)| if v > r[b] { j } else { b });
                correct += usize::from(Some(arg) == *t);
            }
            let loss = g.cross_entropy(logits, targets);
            loss_sum += g.scalar(loss) * chunk.len() as f64;
            let mut grads = g.backward(loss).into_params();
            if model.frozen {
                grads[model.embedding.index()] = None;
            }
            for (i, s) in stats.iter().enumerate() {
                if let Some((m, v)) = s {
                    let bn = model.hidden_layers[i].1.clone();
                    bn.update_running(&mut model.store, m, v);
                }
            }
            adam.update(&mut model.store, &grads, lr, cfg.l2);
        }
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val)?.macro_f1)
        };
        let rec = ClassifierEpoch {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_f1,
        };
        log::debug!("classifier epoch {epoch}: {rec:?}");
        history.push(rec);
        let score = val_f1.unwrap_or(0.0);
        if val.is_empty() || best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub l2: f64,
}

/// Learning rates {1e-3, 5e-4, 1e-4} crossed with L2 {0, 1e-4, 1e-5}.
pub fn default_grid() -> Vec<GridPoint> {
    let mut out = Vec::new();
    for lr in [1e-3, 5e-4, 1e-4] {
        for l2 in [0.0, 1e-4, 1e-5] {
            out.push(GridPoint { lr, l2 });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Number of folds used from the plan (all when `None`).
    pub folds: Option<usize>,
    /// Randomized test runs per fold.
    pub runs: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            folds: Some(2),
            runs: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Selection,
    Testing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub order: usize,
    pub phase: Phase,
    pub fold: usize,
    pub split: SplitKind,
}

/// Records every read of a fold split.
#[derive(Debug, Default)]
pub struct AccessAudit {
    counter: AtomicUsize,
    log: Mutex<Vec<Access>>,
}

impl AccessAudit {
    fn read<'a>(
        &self,
        phase: Phase,
        fold: usize,
        split: SplitKind,
        splits: &'a FoldSplits,
    ) -> &'a [TokenSequence] {
        let order = self.counter.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("audit lock").push(Access {
            order,
            phase,
            fold,
            split,
        });
        match split {
            SplitKind::Train => &splits.train,
            SplitKind::Val => &splits.val,
            SplitKind::Test => &splits.test,
        }
    }

    pub fn accesses(&self) -> Vec<Access> {
        let mut v = self.log.lock().expect("audit lock").clone();
        v.sort_by_key(|a| a.order);
        v
    }

    pub fn summary(&self) -> AuditSummary {
        let log = self.accesses();
        let test_reads_during_selection = log
            .iter()
            .filter(|a| a.phase == Phase::Selection && a.split == SplitKind::Test)
            .count();
        let last_selection = log
            .iter()
            .filter(|a| a.phase == Phase::Selection)
            .map(|a| a.order)
            .max();
        let first_test = log
            .iter()
            .filter(|a| a.split == SplitKind::Test)
            .map(|a| a.order)
            .min();
        let ordered = match (last_selection, first_test) {
            (Some(s), Some(t)) => s < t,
            _ => true,
        };
        AuditSummary {
            selection_reads: log.iter().filter(|a| a.phase == Phase::Selection).count(),
            test_reads: log.iter().filter(|a| a.split == SplitKind::Test).count(),
            test_reads_during_selection,
            test_untouched_before_selection: test_reads_during_selection == 0 && ordered,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub selection_reads: usize,
    pub test_reads: usize,
    pub test_reads_during_selection: usize,
    pub test_untouched_before_selection: bool,
}

struct FoldSplits {
    train: Vec<TokenSequence>,
    val: Vec<TokenSequence>,
    test: Vec<TokenSequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub val_f1: Vec<f64>,
    pub mean_val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub fold: usize,
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub config: ClassifierConfig,
    pub protocol: ProtocolConfig,
    pub task: Task,
    pub frozen_embeddings: bool,
    pub grid: Vec<GridResult>,
    pub selected: usize,
    pub selected_point: GridPoint,
    pub test_runs: Vec<TestRun>,
    pub test_f1_mean: f64,
    pub test_f1_std: f64,
    pub audit: AuditSummary,
    pub runtime_s: f64,
}

/// Index of the largest value; ties keep the earliest.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn job_seed(base: u64, a: u64, b: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (a << 32) ^ b
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Grid search on mean validation F1, then test F1 over folds x runs.
pub fn run_protocol(
    data: &[TokenSequence],
    plan: &FoldPlan,
    grid: &[GridPoint],
    base: &ClassifierConfig,
    task: Task,
    proto: &ProtocolConfig,
    embeddings: Option<&Mat>,
) -> Result<(ProtocolReport, AccessAudit)> {
    let started = Instant::now();
    plan.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let n_folds = proto
        .folds
        .unwrap_or(plan.folds.len())
        .min(plan.folds.len());
    if n_folds == 0 || proto.runs == 0 {
        return Err(Error::Config(
            "protocol needs at least one fold and one run".into(),
        ));
    }
    let splits: Vec<FoldSplits> = plan.folds[..n_folds]
        .iter()
        .map(|f| {
            let pick = |ids: &[String]| -> Vec<TokenSequence> {
                data.iter()
                    .filter(|s| ids.contains(&s.participant_id))
                    .cloned()
                    .collect()
            };
            FoldSplits {
                train: pick(&f.train),
                val: pick(&f.val),
                test: pick(&f.test),
            }
        })
        .collect();
    let audit = AccessAudit::default();

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|p| (0..n_folds).map(move |f| (p, f)))
        .collect();
    let scores = par::map(&jobs, |&(p, f)| -> Result<f64> {
        let train = audit.read(Phase::Selection, f, SplitKind::Train, &splits[f]);
        let val = audit.read(Phase::Selection, f, SplitKind::Val, &splits[f]);
        let cfg = ClassifierConfig {
            lr: grid[p].lr,
            l2: grid[p].l2,
            seed: job_seed(proto.seed, p as u64, f as u64),
            ..base.clone()
        };
        let out = train_classifier(train, val, task, &cfg, embeddings)?;
        Ok(evaluate(&out.model, val)?.macro_f1)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let grid_results: Vec<GridResult> = grid
        .iter()
        .enumerate()
        .map(|(p, &point)| {
            let val_f1 = scores[p * n_folds..(p + 1) * n_folds].to_vec();
            GridResult {
                point,
                mean_val_f1: val_f1.iter().sum::<f64>() / n_folds as f64,
                val_f1,
            }
        })
        .collect();
    let means: Vec<f64> = grid_results.iter().map(|r| r.mean_val_f1).collect();
    let selected = argmax_first(&means).expect("non-empty grid");
    let chosen = grid[selected];
    log::info!(
        "selected lr {} l2 {} (mean val F1 {:.4})",
        chosen.lr,
        chosen.l2,
        means[selected]
    );

    let test_jobs: Vec<(usize, usize)> = (0..n_folds)
        .flat_map(|f| (0..proto.runs).map(move |r| (f, r)))
        .collect();
    let runs = par::map(&test_jobs, |&(f, r)| -> Result<TestRun> {
        let train = audit.read(Phase::Testing, f, SplitKind::Train, &splits[f]);
        let val = audit.read(Phase::Testing, f, SplitKind::Val, &splits[f]);
        let seed = job_seed(proto.seed, 1000 + f as u64, r as u64);
        let cfg = ClassifierConfig {
            lr: chosen.lr,
            l2: chosen.l2,
            seed,
            ..base.clone()
        };
        let out = train_classifier(train, val, task, &cfg, embeddings)?;
        let test = audit.read(Phase::Testing, f, SplitKind::Test, &splits[f]);
        Ok(TestRun {
            fold: f,
            run: r,
            seed,
            best_epoch: out.best_epoch,
            evaluation: evaluate(&out.model, test)?,
        })
    });
    let test_runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let f1s: Vec<f64> = test_runs.iter().map(|r| r.evaluation.macro_f1).collect();
    let (test_f1_mean, test_f1_std) = mean_std(&f1s);
    let report = ProtocolReport {
        config: base.clone(),
        protocol: proto.clone(),
        task,
        frozen_embeddings: embeddings.is_some(),
        grid: grid_results,
        selected,
        selected_point: chosen,
        test_runs,
        test_f1_mean,
        test_f1_std,
        audit: audit.summary(),
        runtime_s: started.elapsed().as_secs_f64(),
    };
    Ok((report, audit))
}
