//! Grouped online K-means vector quantization.
//!
//! A latent frame of width `d` is split into `G` equal partitions; each is
//! replaced by its nearest entry in that group's codebook of `V` vectors.
//! Forward values are the selected codewords; gradients reach the encoder
//! through a straight-through copy, and the codebook learns only from
//! `||sg(z) - zhat||^2`. The commitment term `||z - sg(zhat)||^2` is scaled by
//! `gamma` and trains the encoder only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::par;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub groups: usize,
    pub vars: usize,
    pub gamma: f64,
    /// Standard deviation of the normal initialization.
    pub init_std: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            vars: 100,
            gamma: 0.25,
            init_std: 0.1,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.groups == 0 || !dim.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "latent dim {dim} not divisible by {} groups",
                self.groups
            )));
        }
        if self.vars < 2 {
            return Err(Error::Config(
                "codebook needs at least 2 vars per group".into(),
            ));
        }
        Ok(())
    }

    /// Number of distinct composite codewords, `V^G`.
    pub fn composite_size(&self) -> u64 {
        (self.vars as u64).pow(self.groups as u32)
    }
}

/// Plain codebook values: one `V x (d/G)` matrix per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Vec<Mat>,
    pub gamma: f64,
}

impl Codebook {
    pub fn groups(&self) -> usize {
        self.entries.len()
    }

    pub fn vars(&self) -> usize {
        self.entries[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|e| e.ncols()).sum()
    }

    fn sub_dim(&self) -> usize {
        self.entries[0].ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSequence {
    /// `F x d`.
    pub zhat: Mat,
    /// `F x G`, each in `[0, V)`.
    pub indices: Array2<usize>,
    /// Mean over frames of `||sg(z) - zhat||^2`.
    pub codebook_term: f64,
    /// Mean over frames of `||z - sg(zhat)||^2`.
    pub commitment_term: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Index of the nearest row of `entries`; the smallest index wins ties.
pub fn nearest(entries: &Mat, x: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, e) in entries.rows().into_iter().enumerate() {
        let d = sq_dist(x, e);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Per-frame, per-group nearest codeword indices (`N x G`).
pub fn assign(z: &Mat, entries: &[Mat]) -> Array2<usize> {
    let g_count = entries.len();
    let sub = entries[0].ncols();
    let rows: Vec<Vec<usize>> = par::map_range(z.nrows(), |i| {
        (0..g_count)
            .map(|gi| nearest(&entries[gi], z.slice(s![i, gi * sub..(gi + 1) * sub])))
            .collect()
    });
    let mut out = Array2::zeros((z.nrows(), g_count));
    for (i, r) in rows.into_iter().enumerate() {
        for (gi, v) in r.into_iter().enumerate() {
            out[[i, gi]] = v;
        }
    }
    out
}

/// Concatenation of the selected entries for every frame.
pub fn lookup(indices: &Array2<usize>, entries: &[Mat]) -> Mat {
    let sub = entries[0].ncols();
    let mut out = Array2::zeros((indices.nrows(), sub * entries.len()));
    for i in 0..indices.nrows() {
        for (gi, e) in entries.iter().enumerate() {
            out.slice_mut(s![i, gi * sub..(gi + 1) * sub])
                .assign(&e.row(indices[[i, gi]]));
        }
    }
    out
}

/// Nearest-codeword quantization of a latent sequence, with the two VQ terms.
pub fn quantize(z: &Mat, cb: &Codebook) -> Result<QuantizedSequence> {
    if z.ncols() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            got: z.ncols(),
        });
    }
    debug_assert!(cb.entries.iter().all(|e| e.ncols() == cb.sub_dim()));
    let indices = assign(z, &cb.entries);
    let zhat = lookup(&indices, &cb.entries);
    let n = z.nrows().max(1) as f64;
    let sq = (z - &zhat).mapv(|v| v * v).sum() / n;
    Ok(QuantizedSequence {
        zhat,
        indices,
        codebook_term: sq,
        commitment_term: sq,
    })
}

/// `codebook_term + gamma * commitment_term`.
pub fn vq_loss_total(q: &QuantizedSequence, cb: &Codebook) -> f64 {
    q.codebook_term + cb.gamma * q.commitment_term
}

/// Flat id of a composite codeword: `sum_g i_g * V^(G-1-g)`.
/// Indices of up to `k` distinct rows chosen by k-means++ seeding.
pub fn kmeans_pp_rows<R: Rng>(x: ndarray::ArrayView2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = x.nrows();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut picks = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(picks[0]))).collect();
    while picks.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut next = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if u < d {
                next = i;
                break;
            }
            u -= d;
        }
        if d2[next] <= 0.0 {
            // rounding landed on an already-covered row
            match d2.iter().position(|&d| d > 0.0) {
                Some(i) => next = i,
                None => break,
            }
        }
        picks.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    picks
}

pub fn composite_id(indices: ArrayView1<usize>, vars: usize) -> u32 {
    indices
        .iter()
        .fold(0u64, |acc, &i| acc * vars as u64 + i as u64) as u32
}

/// Inverse of [`composite_id`].
pub fn decompose_id(id: u32, groups: usize, vars: usize) -> Vec<usize> {
    let mut out = vec![0; groups];
    let mut rest = id as usize;
    for g in (0..groups).rev() {
        out[g] = rest % vars;
        rest /= vars;
    }
    out
}

/// Graph-side quantizer: codebook entries are parameters `quantizer.<g>`.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub cfg: CodebookConfig,
    pub entries: Vec<ParamId>,
    pub dim: usize,
}

/// Graph nodes produced by [`Quantizer::forward`].
pub struct QuantizeNodes {
    /// Straight-through output: value `zhat`, gradient copied to `z`.
    pub st: Var,
    pub codebook_term: Var,
    pub commitment_term: Var,
    pub indices: Array2<usize>,
}

impl Quantizer {
    pub fn new<R: Rng>(
        cfg: CodebookConfig,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let sub = dim / cfg.groups;
        let entries = (0..cfg.groups)
            .map(|g| store.add_normal(format!("quantizer.{g}"), (cfg.vars, sub), cfg.init_std, rng))
            .collect();
        Ok(Self { cfg, entries, dim })
    }

    pub fn bind(cfg: CodebookConfig, dim: usize, store: &ParamStore) -> Result<Self> {
        cfg.validate(dim)?;
        let entries = (0..cfg.groups)
            .map(|g| crate::encoder::find(store, &format!("quantizer.{g}")))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, entries, dim })
    }

    pub fn codebook(&self, store: &ParamStore) -> Codebook {
        Codebook {
            entries: self
                .entries
                .iter()
                .map(|&id| store.get(id).clone())
                .collect(),
            gamma: self.cfg.gamma,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<QuantizeNodes> {
        let (n, d) = g.shape(z);
        if d != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: d,
            });
        }
        let cb = self.codebook(store);
        let indices = assign(g.value(z), &cb.entries);
        let zhat_value = lookup(&indices, &cb.entries);

        // codebook term: gradient flows into the selected entries only
        let parts: Vec<Var> = self
            .entries
            .iter()
            .enumerate()
            .map(|(gi, &id)| {
                let e = g.param(store, id);
                g.gather_rows(e, indices.column(gi).to_vec())
            })
            .collect();
        let zhat = g.concat_cols(&parts);
        let z_sg = g.constant(g.value(z).clone());
        let diff = g.sub(z_sg, zhat);
        let cb_sum = g.sum_sq(diff);
        let codebook_term = g.scale(cb_sum, 1.0 / n.max(1) as f64);

        // commitment term: gradient flows into the encoder only
        let zhat_sg = g.constant(zhat_value.clone());
        let diff = g.sub(z, zhat_sg);
        let cm_sum = g.sum_sq(diff);
        let commitment_term = g.scale(cm_sum, 1.0 / n.max(1) as f64);

        let st = g.straight_through(z, zhat_value);
        Ok(QuantizeNodes {
            st,
            codebook_term,
            commitment_term,
            indices,
        })
    }

    /// Re-seeds every group's codebook from `z` (rows are frames) with
    /// k-means++ draws, so that training starts with all codewords in use.
    /// Groups with fewer distinct sub-vectors than `V` keep their remaining
    /// random entries.
    pub fn init_from_data<R: Rng>(&self, store: &mut ParamStore, z: &Mat, rng: &mut R) {
        let sub = self.dim / self.cfg.groups;
        for (gi, &id) in self.entries.iter().enumerate() {
            let part = z.slice(s![.., gi * sub..(gi + 1) * sub]);
            let picks = kmeans_pp_rows(part, self.cfg.vars, rng);
            let entries = store.get_mut(id);
            for (v, &r) in picks.iter().enumerate() {
                entries.row_mut(v).assign(&part.row(r));
            }
        }
    }

    /// `codebook + gamma * commitment` as a graph node.
    pub fn loss(&self, g: &mut Graph, nodes: &QuantizeNodes) -> Var {
        let c = g.scale(nodes.commitment_term, self.cfg.gamma);
        g.add(nodes.codebook_term, c)
    }
}

/// Codeword usage over a corpus of composite ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub distinct_codewords: usize,
    pub entropy_bits: f64,
    pub total: usize,
    pub histogram: BTreeMap<u32, usize>,
}

pub fn usage_stats<'a>(codes: impl IntoIterator<Item = &'a u32>) -> UsageStats {
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for &c in codes {
        *histogram.entry(c).or_insert(0usize) += 1;
        total += 1;
    }
    let entropy_bits = if total == 0 {
        0.0
    } else {
        -histogram
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                p * p.log2()
            })
            .sum::<f64>()
    };
    UsageStats {
        distinct_codewords: histogram.len(),
        entropy_bits,
        total,
        histogram,
    }
}

impl UsageStats {
    /// CSV `codeword,count`; codewords printed as `i0-i1-...` group tuples.
    pub fn write_csv(&self, path: &Path, groups: usize, vars: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "codeword,count")?;
        for (&code, &count) in &self.histogram {
            let tuple: Vec<String> = decompose_id(code, groups, vars)
                .iter()
                .map(|i| i.to_string())
                .collect();
            writeln!(f, "{},{}", tuple.join("-"), count)?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn picks_nearest_codeword() {
        let cb = Codebook {
            entries: vec![array![[1.0, 0.0], [3.0, 0.0]]],
            gamma: 0.25,
        };
        let q = quantize(&array![[0.0, 0.0]], &cb).unwrap();
        assert_eq!(q.indices[[0, 0]], 0);
        assert_eq!(q.zhat, array![[1.0, 0.0]]);
        assert_eq!(q.codebook_term, 1.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook {
            entries: vec![array![[1.0], [-1.0], [1.0]]],
            gamma: 0.25,
        };
        let q = quantize(&array![[0.0]], &cb).unwrap();
        assert_eq!(q.indices[[0, 0]], 0);
    }

    #[test]
    fn codeword_input_has_zero_loss() {
        let cb = Codebook {
            entries: vec![
                array![[1.0, 2.0], [3.0, 0.5]],
                array![[0.0, 0.0], [-1.0, 1.0]],
            ],
            gamma: 0.25,
        };
        let z = array![[3.0, 0.5, -1.0, 1.0]];
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.zhat, z);
        assert_eq!(vq_loss_total(&q, &cb), 0.0);
        assert_eq!(q.indices.row(0).to_vec(), vec![1, 1]);
    }

    #[test]
    fn total_weights_commitment_by_gamma() {
        let q = QuantizedSequence {
            zhat: Array2::zeros((1, 1)),
            indices: Array2::zeros((1, 1)),
            codebook_term: 0.8,
            commitment_term: 0.4,
        };
        let cb = Codebook {
            entries: vec![Array2::zeros((2, 1))],
            gamma: 0.25,
        };
        assert!((vq_loss_total(&q, &cb) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cb = Codebook {
            entries: vec![Array2::zeros((2, 3))],
            gamma: 0.25,
        };
        assert!(matches!(
            quantize(&Array2::zeros((2, 4)), &cb),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn usage_entropy() {
        let one = usage_stats(&[5u32, 5, 5]);
        assert_eq!((one.distinct_codewords, one.entropy_bits), (1, 0.0));
        let four = usage_stats(&[0u32, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(four.distinct_codewords, 4);
        assert!((four.entropy_bits - 2.0).abs() < 1e-12);
    }

    #[test]
    fn composite_ids_round_trip() {
        let idx = array![7usize, 93];
        let id = composite_id(idx.view(), 100);
        assert_eq!(id, 793);
        assert_eq!(decompose_id(id, 2, 100), vec![7, 93]);
    }
}
