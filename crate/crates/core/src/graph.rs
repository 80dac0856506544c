//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes hold their
//! forward value; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every node and every parameter that was read from a
//! [`ParamStore`].
//!
//! Sequences are stored as stacked rows: a batch of `B` sequences of length
//! `L` with `C` channels is a `(B*L) x C` matrix, sequence-major.

use ndarray::{s, Array2, Axis, Zip};

use crate::par;
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One candidate score: `dot(a[a_row, a_col..a_col+width], b[b_row, ..width])`.
#[derive(Clone, Copy, Debug)]
pub struct ScorePair {
    pub a_row: usize,
    pub a_col: usize,
    pub b_row: usize,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Im2Col {
        x: Var,
        seq_len: usize,
        kernel: usize,
        stride: usize,
        left_pad: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Scores {
        a: Var,
        b: Var,
        pairs: Vec<ScorePair>,
        width: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
        count: usize,
    },
    Sum(Var),
    SumSq(Var),
    StraightThrough(Var),
    Select {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    AttnScores {
        q: Var,
        k: Var,
        seq_len: usize,
        heads: usize,
        scale: f64,
    },
    RowSoftmax(Var),
    AttnMix {
        p: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a parameter, summed over all reads.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[Option<Mat>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const, false)
    }

    /// Leaf that receives gradient (for probing gradients w.r.t. inputs).
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = par::matmul(self.value(a).view(), self.value(b).view());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1xm row");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `a * row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1xm row");
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Unfolds a batch of sequences into convolution patches.
    ///
    /// `x` holds `B` sequences of `seq_len` rows each. Every sequence is
    /// left-padded with `left_pad` zero rows; the output has one row per
    /// output position holding `kernel` consecutive input rows concatenated
    /// tap-major. Output length per sequence is
    /// `(seq_len + left_pad - kernel) / stride + 1`.
    pub fn im2col(
        &mut self,
        x: Var,
        seq_len: usize,
        kernel: usize,
        stride: usize,
        left_pad: usize,
    ) -> Var {
        let xv = self.value(x);
        let (rows, ch) = xv.dim();
        assert!(
            seq_len > 0 && rows % seq_len == 0,
            "im2col: rows not a multiple of seq_len"
        );
        assert!(
            seq_len + left_pad >= kernel,
            "im2col: sequence shorter than kernel"
        );
        let batch = rows / seq_len;
        let out_len = (seq_len + left_pad - kernel) / stride + 1;
        let mut out = Array2::zeros((batch * out_len, kernel * ch));
        for b in 0..batch {
            for t in 0..out_len {
                let mut row = out.row_mut(b * out_len + t);
                for k in 0..kernel {
                    let pos = t * stride + k;
                    if pos < left_pad {
                        continue;
                    }
                    let src = xv.row(b * seq_len + pos - left_pad);
                    row.slice_mut(s![k * ch..(k + 1) * ch]).assign(&src);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Im2Col {
                x,
                seq_len,
                kernel,
                stride,
                left_pad,
            },
            ng,
        )
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut out = Array2::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(out.row_mut(i))
                .and(&row)
                .for_each(|o, &v| *o = (v - mean) * is);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Per-column standardization over the batch (training-mode batch norm,
    /// no affine part). Returns the node plus the batch mean and biased
    /// variance for running-statistics updates.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mean = xv.mean_axis(Axis(0)).expect("batch_norm on empty batch");
        let mut var = vec![0.0; m];
        for row in xv.rows() {
            for j in 0..m {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            for j in 0..m {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let ng = self.ng(x);
        let v = self.push(out, Op::BatchNorm { x, inv_std }, ng);
        (v, mean.to_vec(), var)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceCols(x, start), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup (embedding tables, frame selection). Repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, idx), ng)
    }

    /// Dot products between selected row segments of `a` and rows of `b`,
    /// laid out as a `(pairs / cols) x cols` matrix.
    pub fn scores(
        &mut self,
        a: Var,
        b: Var,
        pairs: Vec<ScorePair>,
        width: usize,
        cols: usize,
    ) -> Var {
        assert!(
            cols > 0 && pairs.len().is_multiple_of(cols),
            "scores: pairs not divisible by cols"
        );
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(bv.ncols(), width, "scores: b width");
        let mut out = Array2::zeros((pairs.len() / cols, cols));
        {
            let flat = out.as_slice_mut().expect("fresh array is contiguous");
            par::for_each_chunk_mut(flat, 1024, |ci, chunk| {
                for (j, o) in chunk.iter_mut().enumerate() {
                    let p = pairs[ci * 1024 + j];
                    let ar = av.slice(s![p.a_row, p.a_col..p.a_col + width]);
                    *o = ar.dot(&bv.row(p.b_row));
                }
            });
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Scores { a, b, pairs, width }, ng)
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(
            lv.nrows(),
            targets.len(),
            "cross_entropy: one target per row"
        );
        let mut probs = Array2::zeros(lv.dim());
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let Some(t) = targets[i] else { continue };
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[[i, j]] = e;
                z += e;
            }
            probs.row_mut(i).mapv_inplace(|p| p / z);
            total += -(row[t] - max - z.ln());
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), v), Op::Sum(x), ng)
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|a| a * a).sum();
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), v), Op::SumSq(x), ng)
    }

    /// Takes the forward value `value` but sends all incoming gradient to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, value: Mat) -> Var {
        assert_eq!(
            self.value(z).dim(),
            value.dim(),
            "straight_through shape mismatch"
        );
        let ng = self.ng(z);
        self.push(value, Op::StraightThrough(z), ng)
    }

    /// Row-wise choice: row `i` from `a` when `take_a[i]`, else from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "select_rows shape mismatch");
        let mut out = bv.clone();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                out.row_mut(i).assign(&av.row(i));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Select { a, b, take_a }, ng)
    }

    /// Scaled per-head attention logits for a batch of sequences.
    ///
    /// `q`, `k` are `(B*L) x D`; heads split `D` into equal column blocks.
    /// Output row `(b*H + h)*L + i` holds `scale * <q_i, k_j>` for every key `j`.
    pub fn attn_scores(&mut self, q: Var, k: Var, seq_len: usize, heads: usize, scale: f64) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        let (rows, d) = qv.dim();
        let batch = rows / seq_len;
        let dh = d / heads;
        let blocks = par::map_range(batch * heads, |bh| {
            let (b, h) = (bh / heads, bh % heads);
            let qb = qv.slice(s![b * seq_len..(b + 1) * seq_len, h * dh..(h + 1) * dh]);
            let kb = kv.slice(s![b * seq_len..(b + 1) * seq_len, h * dh..(h + 1) * dh]);
            qb.dot(&kb.t()) * scale
        });
        let views: Vec<_> = blocks.iter().map(|m| m.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("attn block shapes");
        let ng = self.ng(q) || self.ng(k);
        self.push(
            out,
            Op::AttnScores {
                q,
                k,
                seq_len,
                heads,
                scale,
            },
            ng,
        )
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let ng = self.ng(x);
        self.push(out, Op::RowSoftmax(x), ng)
    }

    /// Applies per-head attention weights (from [`Graph::attn_scores`] layout) to values.
    pub fn attn_mix(&mut self, p: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (pv, vv) = (self.value(p), self.value(v));
        let (rows, d) = vv.dim();
        let batch = rows / seq_len;
        let dh = d / heads;
        let mut out = Array2::zeros((rows, d));
        let blocks = par::map_range(batch * heads, |bh| {
            let (b, h) = (bh / heads, bh % heads);
            let pb = pv.slice(s![bh * seq_len..(bh + 1) * seq_len, ..]);
            let vb = vv.slice(s![b * seq_len..(b + 1) * seq_len, h * dh..(h + 1) * dh]);
            pb.dot(&vb)
        });
        for (bh, blk) in blocks.iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            out.slice_mut(s![b * seq_len..(b + 1) * seq_len, h * dh..(h + 1) * dh])
                .assign(blk);
        }
        let ng = self.ng(p) || self.ng(v);
        self.push(
            out,
            Op::AttnMix {
                p,
                v,
                seq_len,
                heads,
            },
            ng,
        )
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Mat>> = Vec::new();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Mat,
        grads: &mut [Option<Mat>],
        params: &mut Vec<Option<Mat>>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Const => {}
            Op::Param(id) => {
                let idx = id.index();
                if params.len() <= idx {
                    params.resize_with(idx + 1, || None);
                }
                match &mut params[idx] {
                    Some(e) => *e += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, par::matmul(g.view(), val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, par::matmul(val(*a).t(), g.view()));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * val(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.ng(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    acc(*a, g * val(*r));
                }
                if self.ng(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d *= gelu_parts(x).1);
                acc(*a, d);
            }
            Op::Im2Col {
                x,
                seq_len,
                kernel,
                stride,
                left_pad,
            } => {
                let (rows, ch) = val(*x).dim();
                let batch = rows / seq_len;
                let out_len = (seq_len + left_pad - kernel) / stride + 1;
                let mut d = Array2::zeros((rows, ch));
                for b in 0..batch {
                    for t in 0..out_len {
                        let grow = g.row(b * out_len + t);
                        for k in 0..*kernel {
                            let pos = t * stride + k;
                            if pos < *left_pad {
                                continue;
                            }
                            let mut dst = d.row_mut(b * seq_len + pos - left_pad);
                            dst += &grow.slice(s![k * ch..(k + 1) * ch]);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let m = y.ncols() as f64;
                let mut d = Array2::zeros(y.dim());
                for (i, &s) in inv_std.iter().enumerate() {
                    let gy = g.row(i);
                    let yy = y.row(i);
                    let mean_g = gy.sum() / m;
                    let mean_gy = gy.dot(&yy) / m;
                    Zip::from(d.row_mut(i))
                        .and(&gy)
                        .and(&yy)
                        .for_each(|o, &gi, &yi| *o = s * (gi - mean_g - yi * mean_gy));
                }
                acc(*x, d);
            }
            Op::BatchNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.nrows() as f64;
                let mean_g = g.sum_axis(Axis(0)) / n;
                let mean_gy = (g * y).sum_axis(Axis(0)) / n;
                let mut d = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    for j in 0..y.ncols() {
                        d[[i, j]] = inv_std[j] * (g[[i, j]] - mean_g[j] - y[[i, j]] * mean_gy[j]);
                    }
                }
                acc(*x, d);
            }
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, d);
            }
            Op::SliceRows(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::GatherRows(x, idx) => {
                let mut d = Array2::zeros(val(*x).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(i);
                    dst += &g.row(r);
                }
                acc(*x, d);
            }
            Op::Scores { a, b, pairs, width } => {
                let (av, bv) = (val(*a), val(*b));
                let gflat: Vec<f64> = g.iter().copied().collect();
                let w = *width;
                if self.ng(*a) {
                    let mut d = Array2::zeros(av.dim());
                    for (p, &gs) in pairs.iter().zip(&gflat) {
                        if gs == 0.0 {
                            continue;
                        }
                        let mut dst = d.slice_mut(s![p.a_row, p.a_col..p.a_col + w]);
                        dst.scaled_add(gs, &bv.row(p.b_row));
                    }
                    acc(*a, d);
                }
                if self.ng(*b) {
                    let mut d = Array2::zeros(bv.dim());
                    for (p, &gs) in pairs.iter().zip(&gflat) {
                        if gs == 0.0 {
                            continue;
                        }
                        let mut dst = d.row_mut(p.b_row);
                        dst.scaled_add(gs, &av.slice(s![p.a_row, p.a_col..p.a_col + w]));
                    }
                    acc(*b, d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let mut d = Array2::zeros(probs.dim());
                if *count > 0 {
                    let k = g[[0, 0]] / *count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let mut row = d.row_mut(i);
                        row.assign(&probs.row(i));
                        row[*t] -= 1.0;
                        row *= k;
                    }
                }
                acc(*logits, d);
            }
            Op::Sum(x) => acc(*x, Array2::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::SumSq(x) => acc(*x, val(*x) * (2.0 * g[[0, 0]])),
            Op::StraightThrough(z) => acc(*z, g.clone()),
            Op::Select { a, b, take_a } => {
                let mut da = Array2::zeros(g.dim());
                let mut db = Array2::zeros(g.dim());
                for (i, &t) in take_a.iter().enumerate() {
                    if t {
                        da.row_mut(i).assign(&g.row(i));
                    } else {
                        db.row_mut(i).assign(&g.row(i));
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::AttnScores {
                q,
                k,
                seq_len,
                heads,
                scale,
            } => {
                let (qv, kv) = (val(*q), val(*k));
                let (rows, dm) = qv.dim();
                let (l, hs) = (*seq_len, *heads);
                let dh = dm / hs;
                let mut dq = Array2::zeros((rows, dm));
                let mut dk = Array2::zeros((rows, dm));
                for bh in 0..(rows / l) * hs {
                    let (b, h) = (bh / hs, bh % hs);
                    let gb = g.slice(s![bh * l..(bh + 1) * l, ..]);
                    let rs = s![b * l..(b + 1) * l, h * dh..(h + 1) * dh];
                    let qb = qv.slice(rs);
                    let kb = kv.slice(rs);
                    dq.slice_mut(rs).assign(&(gb.dot(&kb) * *scale));
                    dk.slice_mut(rs).assign(&(gb.t().dot(&qb) * *scale));
                }
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot = g.row(i).dot(&y.row(i));
                    Zip::from(d.row_mut(i))
                        .and(g.row(i))
                        .and(y.row(i))
                        .for_each(|o, &gi, &yi| *o = yi * (gi - dot));
                }
                acc(*x, d);
            }
            Op::AttnMix {
                p,
                v,
                seq_len,
                heads,
            } => {
                let (pv, vv) = (val(*p), val(*v));
                let (rows, dm) = vv.dim();
                let (l, hs) = (*seq_len, *heads);
                let dh = dm / hs;
                let mut dp = Array2::zeros(pv.dim());
                let mut dv = Array2::zeros((rows, dm));
                for bh in 0..(rows / l) * hs {
                    let (b, h) = (bh / hs, bh % hs);
                    let rs = s![b * l..(b + 1) * l, h * dh..(h + 1) * dh];
                    let gb = g.slice(rs);
                    let pb = pv.slice(s![bh * l..(bh + 1) * l, ..]);
                    dp.slice_mut(s![bh * l..(bh + 1) * l, ..])
                        .assign(&gb.dot(&vv.slice(rs).t()));
                    dv.slice_mut(rs).assign(&pb.t().dot(&gb));
                }
                acc(*p, dp);
                acc(*v, dv);
            }
        }
    }
}
