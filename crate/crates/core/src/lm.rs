//! Masked-token transformer language model over token corpora, and the
//! exported input-embedding table used as frozen classifier features.
//!
//! Post-LN encoder blocks with learned positions and GELU feed-forward
//! layers. The mask token takes id `vocab_size`, one past the vocabulary.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{dropout, LayerNorm, Linear, Mode};
use crate::params::{Adam, ParamId, ParamStore};
use crate::pretrainer::{lr_at, stream, TrainConfig};
use crate::tokens::{collate, is_reserved, TokenSequence, NUM_RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmSize {
    Tiny,
    Small,
    Medium,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub size: LmSize,
    pub embed: usize,
    pub ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub mask_prob: f64,
    /// Of the selected positions: fraction replaced by MASK, and by a random token.
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl LmConfig {
    pub fn sized(size: LmSize) -> Self {
        let (embed, ff, layers, heads) = match size {
            LmSize::Tiny => (32, 64, 1, 2),
            LmSize::Small => (128, 512, 2, 8),
            LmSize::Medium => (256, 1024, 4, 8),
        };
        Self {
            size,
            embed,
            ff,
            layers,
            heads,
            dropout: 0.1,
            max_len: 64,
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
            lr: 1e-3,
            l2: 1e-2,
            batch: 16,
            epochs: 40,
            warmup_frac: 0.1,
            seed: 0,
        }
    }

    pub fn tiny() -> Self {
        Self::sized(LmSize::Tiny)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must be in [0, 1]".into()));
        }
        if self.mask_token_frac + self.random_token_frac > 1.0 + 1e-12
            || self.mask_token_frac < 0.0
            || self.random_token_frac < 0.0
        {
            return Err(Error::Config(
                "mask policy fractions must be non-negative and sum to <= 1".into(),
            ));
        }
        if self.layers == 0 || self.max_len == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "LM layers, max_len, batch and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Inputs and targets of one masked batch (batch-major, padded to `max_len`).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<u32>>,
    /// `targets[b * max_len + t]` is the original id at masked positions.
    pub targets: Vec<Option<usize>>,
    pub positions: Vec<(usize, usize)>,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

/// Selects non-reserved positions with probability `mask_prob`, then
/// replaces them by MASK, a random ordinary token, or leaves them as is.
pub fn mask_batch(
    seqs: &[&TokenSequence],
    vocab_size: usize,
    cfg: &LmConfig,
    rng: &mut dyn RngCore,
) -> MaskedBatch {
    let batch = collate(seqs);
    let mask_id = vocab_size as u32;
    let mut inputs = batch.ids.clone();
    let mut targets = vec![None; seqs.len() * batch.max_len];
    let mut positions = Vec::new();
    for (b, row) in inputs.iter_mut().enumerate() {
        for t in 0..batch.lens[b] {
            let id = row[t];
            if is_reserved(id) || rng.random::<f64>() >= cfg.mask_prob {
                continue;
            }
            targets[b * batch.max_len + t] = Some(id as usize);
            positions.push((b, t));
            let u = rng.random::<f64>();
            if u < cfg.mask_token_frac {
                row[t] = mask_id;
            } else if u < cfg.mask_token_frac + cfg.random_token_frac
                && vocab_size > NUM_RESERVED as usize
            {
                row[t] = rng.random_range(NUM_RESERVED..vocab_size as u32);
            }
        }
    }
    MaskedBatch {
        inputs,
        targets,
        positions,
        lens: batch.lens,
        max_len: batch.max_len,
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct MaskedLm {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    ln_emb: LayerNorm,
    blocks: Vec<Block>,
    head: Linear,
}

impl MaskedLm {
    pub fn new(cfg: &LmConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, 20);
        let mut store = ParamStore::new();
        let e = cfg.embed;
        let tok = store.add_normal("lm.tok", (vocab_size + 1, e), 0.02, &mut rng);
        let pos = store.add_normal("lm.pos", (cfg.max_len, e), 0.02, &mut rng);
        let ln_emb = LayerNorm::new(&mut store, "lm.ln_emb", e);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("lm.{l}.{s}");
                Block {
                    q: Linear::new(&mut store, &n("q"), e, e, true, &mut rng),
                    k: Linear::new(&mut store, &n("k"), e, e, true, &mut rng),
                    v: Linear::new(&mut store, &n("v"), e, e, true, &mut rng),
                    o: Linear::new(&mut store, &n("o"), e, e, true, &mut rng),
                    ln1: LayerNorm::new(&mut store, &n("ln1"), e),
                    ff1: Linear::new(&mut store, &n("ff1"), e, cfg.ff, true, &mut rng),
                    ff2: Linear::new(&mut store, &n("ff2"), cfg.ff, e, true, &mut rng),
                    ln2: LayerNorm::new(&mut store, &n("ln2"), e),
                }
            })
            .collect();
        let head = Linear::new(&mut store, "lm.head", e, vocab_size, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            store,
            tok,
            pos,
            ln_emb,
            blocks,
            head,
        })
    }

    /// Logits `(B*L) x vocab_size` for padded batch-major `inputs`.
    fn forward(
        &self,
        g: &mut Graph,
        inputs: &[Vec<u32>],
        lens: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let b = inputs.len();
        let l = inputs.first().map_or(0, Vec::len);
        if l > self.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {l} exceeds LM max_len {}",
                self.cfg.max_len
            )));
        }
        let ids: Vec<usize> = inputs.iter().flatten().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i > self.vocab_size) {
            return Err(Error::DimensionMismatch {
                expected: self.vocab_size + 1,
                got: bad + 1,
            });
        }
        let tok = g.param(&self.store, self.tok);
        let x = g.gather_rows(tok, ids);
        let pos = g.param(&self.store, self.pos);
        let p = g.gather_rows(pos, (0..b).flat_map(|_| 0..l).collect());
        let x = g.add(x, p);
        let x = self.ln_emb.forward(g, &self.store, x);
        let mut x = dropout(g, x, self.cfg.dropout, mode);

        let heads = self.cfg.heads;
        let scale = 1.0 / ((self.cfg.embed / heads) as f64).sqrt();
        // additive key mask: padding keys get a large negative logit
        let mut key_mask = Array2::zeros((b * heads * l, l));
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..l {
                    for j in lens[bi]..l {
                        key_mask[[(bi * heads + h) * l + i, j]] = -1e9;
                    }
                }
            }
        }
        let key_mask = g.constant(key_mask);
        for blk in &self.blocks {
            let q = blk.q.forward(g, &self.store, x);
            let k = blk.k.forward(g, &self.store, x);
            let v = blk.v.forward(g, &self.store, x);
            let s = g.attn_scores(q, k, l, heads, scale);
            let s = g.add(s, key_mask);
            let a = g.row_softmax(s);
            let mixed = g.attn_mix(a, v, l, heads);
            let att = blk.o.forward(g, &self.store, mixed);
            let att = dropout(g, att, self.cfg.dropout, mode);
            let y = g.add(x, att);
            let y = blk.ln1.forward(g, &self.store, y);
            let f = blk.ff1.forward(g, &self.store, y);
            let f = g.gelu(f);
            let f = blk.ff2.forward(g, &self.store, f);
            let f = dropout(g, f, self.cfg.dropout, mode);
            let z = g.add(y, f);
            x = blk.ln2.forward(g, &self.store, z);
        }
        Ok(self.head.forward(g, &self.store, x))
    }

    /// Mean masked cross-entropy and masked-token accuracy (eval mode).
    pub fn masked_metrics(&self, batch: &MaskedBatch) -> Result<(f64, f64)> {
        if batch.positions.is_empty() {
            return Ok((0.0, 0.0));
        }
        let mut g = Graph::new();
        let logits = self.forward(&mut g, &batch.inputs, &batch.lens, &mut Mode::Eval)?;
        let lv = g.value(logits).clone();
        let loss = g.cross_entropy(logits, batch.targets.clone());
        let mut correct = 0;
        for (r, t) in batch.targets.iter().enumerate() {
            if let Some(t) = t {
                let row = lv.row(r);
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
                correct += usize::from(arg == *t);
            }
        }
        Ok((
            g.scalar(loss),
            correct as f64 / batch.positions.len() as f64,
        ))
    }

    /// Input embeddings for ids `0..vocab_size` (the MASK row is dropped).
    pub fn input_embeddings(&self) -> Mat {
        self.store
            .get(self.tok)
            .slice(ndarray::s![..self.vocab_size, ..])
            .to_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub model: MaskedLm,
    pub history: Vec<LmEpoch>,
}

/// Trains on framed sequences; eval metrics use a fixed masking of the corpus.
pub fn pretrain_lm(
    corpus: &[TokenSequence],
    vocab_size: usize,
    cfg: &LmConfig,
) -> Result<LmOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(bad) = corpus
        .iter()
        .flat_map(|s| &s.ids)
        .find(|&&i| i as usize >= vocab_size)
    {
        return Err(Error::format(
            "LM corpus",
            format!("id {bad} outside vocabulary of size {vocab_size}"),
        ));
    }
    let mut model = MaskedLm::new(cfg, vocab_size)?;
    let mut adam = Adam::new();
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch);
    let schedule = TrainConfig {
        lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        ..TrainConfig::default()
    };
    let total = steps_per_epoch * cfg.epochs;
    let mut shuffle = stream(cfg.seed, 21);
    let mut masking = stream(cfg.seed, 22);
    let mut drop = stream(cfg.seed, 23);
    let eval_batches: Vec<MaskedBatch> = {
        let mut r = stream(cfg.seed, 24);
        corpus
            .chunks(cfg.batch)
            .map(|c| mask_batch(&c.iter().collect::<Vec<_>>(), vocab_size, cfg, &mut r))
            .collect()
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&TokenSequence> = chunk.iter().map(|&i| &corpus[i]).collect();
            let mb = mask_batch(&refs, vocab_size, cfg, &mut masking);
            step += 1;
            if mb.positions.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let logits =
                model.forward(&mut g, &mb.inputs, &mb.lens, &mut Mode::Train(&mut drop))?;
            let loss = g.cross_entropy(logits, mb.targets.clone());
            loss_sum += g.scalar(loss) * mb.positions.len() as f64;
            n += mb.positions.len();
            let grads = g.backward(loss).into_params();
            adam.update(
                &mut model.store,
                &grads,
                lr_at(step, total, &schedule),
                cfg.l2,
            );
        }
        let (mut el, mut ea, mut en) = (0.0, 0.0, 0usize);
        for b in &eval_batches {
            let (l, a) = model.masked_metrics(b)?;
            el += l * b.positions.len() as f64;
            ea += a * b.positions.len() as f64;
            en += b.positions.len();
        }
        let rec = LmEpoch {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            eval_loss: el / en.max(1) as f64,
            eval_accuracy: ea / en.max(1) as f64,
        };
        log::info!(
            "lm epoch {epoch}: train {:.4} eval {:.4} acc {:.3}",
            rec.train_loss,
            rec.eval_loss,
            rec.eval_accuracy
        );
        history.push(rec);
    }
    Ok(LmOutcome { model, history })
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MOTIFEMB";
pub const EMBEDDING_VERSION: u32 = 1;

/// `vocab_size x dim` float32 table tied to one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab_hash: u64,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn from_matrix(m: &Mat, vocab_hash: u64) -> Self {
        Self {
            vocab_hash,
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Mat {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("rows * cols values")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + 4 * self.data.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|_| Error::missing(path, "embedding table; run `motif lm` first"))?;
        let bad = |d: &str| Error::format("embeddings", d.to_string());
        if bytes.len() < 36 || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != EMBEDDING_VERSION {
            return Err(Error::SchemaVersion {
                what: "embeddings",
                found: version,
                expected: EMBEDDING_VERSION,
            });
        }
        let (vocab_hash, rows, cols) = (u64_at(12), u64_at(20) as usize, u64_at(28) as usize);
        let body = &bytes[36..];
        if body.len() != rows * cols * 4 {
            return Err(bad("payload size does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            vocab_hash,
            rows,
            cols,
            data,
        })
    }

    /// Fails with `VocabMismatch` unless the table was built for `vocab_hash`.
    pub fn check_vocab(&self, vocab_hash: u64) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: vocab_hash,
                got: self.vocab_hash,
            });
        }
        Ok(())
    }
}

/// Uniform-logit reference loss, `ln(vocab_size)`.
pub fn uniform_loss(vocab_size: usize) -> f64 {
    (vocab_size as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::PAD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn framed(n: usize, len: usize) -> Vec<TokenSequence> {
        (0..n)
            .map(|i| {
                let mut ids = vec![crate::tokens::START];
                ids.extend((0..len).map(|t| 4 + ((i + t) % 6) as u32));
                ids.push(crate::tokens::END);
                TokenSequence::new(ids, None, "P")
            })
            .collect()
    }

    #[test]
    fn masking_rules() {
        let seqs = framed(200, 48);
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = LmConfig {
            mask_prob: 0.0,
            ..LmConfig::tiny()
        };
        assert!(mask_batch(&refs, 10, &none, &mut rng).positions.is_empty());
        let all = LmConfig {
            mask_prob: 1.0,
            mask_token_frac: 1.0,
            random_token_frac: 0.0,
            ..LmConfig::tiny()
        };
        let mb = mask_batch(&refs, 10, &all, &mut rng);
        assert_eq!(mb.positions.len(), 200 * 48);
        for (b, row) in mb.inputs.iter().enumerate() {
            assert_eq!(row[0], crate::tokens::START);
            assert_eq!(row[49], crate::tokens::END);
            assert!(row[1..49].iter().all(|&i| i == 10));
            assert!(mb.targets[b * mb.max_len].is_none());
        }
        let mb = mask_batch(&refs, 10, &LmConfig::tiny(), &mut rng);
        let frac = mb.positions.len() as f64 / (200.0 * 48.0);
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
        for &(b, t) in &mb.positions {
            assert!(!is_reserved(seqs[b].ids[t]));
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let seqs = framed(32, 20);
        let model = MaskedLm::new(&LmConfig::tiny(), 10).unwrap();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mb = mask_batch(
            &refs,
            10,
            &LmConfig::tiny(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let (loss, _) = model.masked_metrics(&mb).unwrap();
        assert!((loss - uniform_loss(10)).abs() < 0.15, "{loss}");
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let model = MaskedLm::new(&LmConfig::tiny(), 10).unwrap();
        let seq = vec![2, 4, 5, 6, 3];
        let mut padded = seq.clone();
        padded.extend([PAD; 4]);
        let mut g = Graph::new();
        let a = model
            .forward(&mut g, std::slice::from_ref(&seq), &[5], &mut Mode::Eval)
            .unwrap();
        let b = model
            .forward(&mut g, &[padded], &[5], &mut Mode::Eval)
            .unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        for r in 0..5 {
            for c in 0..10 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embedding_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let t = EmbeddingTable::from_matrix(&m, 0xABCD);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("embeddings.bin");
        t.save(&p).unwrap();
        let back = EmbeddingTable::load(&p).unwrap();
        assert_eq!(back, t);
        assert!(back
            .data
            .iter()
            .zip(&t.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back.check_vocab(0xABCD).is_ok());
        assert!(matches!(
            back.check_vocab(1),
            Err(Error::VocabMismatch { .. })
        ));
    }
}
