//! Layers built on [`Graph`]: linear maps, normalization, dropout and
//! recurrent cells.

use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::graph::{Graph, Mat, Var};
use crate::params::{ParamId, ParamStore};

/// Forward-pass mode. Dropout and batch statistics are only active in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: &mut Mode) -> Var {
    let Mode::Train(rng) = mode else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_fn(
        g.shape(x),
        |_| if rng.random::<f64>() < p { 0.0 } else { keep },
    );
    let m = g.constant(mask);
    g.mul(x, m)
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), (input, output), input, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), (1, output), input, rng));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), (1, dim), 1.0),
            bias: store.add_const(format!("{name}.bias"), (1, dim), 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Per-feature batch mean and unbiased variance.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Batch normalization over rows. Running statistics live in the store as
/// `1 x dim` entries but never receive gradient.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), (1, dim), 1.0),
            beta: store.add_const(format!("{name}.beta"), (1, dim), 0.0),
            running_mean: store.add_const(format!("{name}.running_mean"), (1, dim), 0.0),
            running_var: store.add_const(format!("{name}.running_var"), (1, dim), 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Returns the output and, in training mode, the batch statistics to fold
    /// into the running estimates with [`BatchNorm::update_running`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        train: bool,
    ) -> (Var, Option<BatchStats>) {
        let (normed, stats) = if train && g.shape(x).0 > 1 {
            let n = g.shape(x).0 as f64;
            let (v, mean, var) = g.batch_norm(x, self.eps);
            let unbiased: Vec<f64> = var.iter().map(|v| v * n / (n - 1.0)).collect();
            (v, Some((mean, unbiased)))
        } else {
            let rm = store.get(self.running_mean);
            let rv = store.get(self.running_var);
            let scale: Mat = rv.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let shift: Mat = -(rm * &scale);
            let sc = g.constant(scale);
            let sh = g.constant(shift);
            let y = g.mul_row(x, sc);
            (g.add_row(y, sh), None)
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(normed, gamma);
        (g.add_row(y, beta), stats)
    }

    pub fn update_running(&self, store: &mut ParamStore, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in store.get_mut(self.running_mean).iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(self.running_var).iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Which rows of a time-major batch are real (non-padding) at each step.
pub fn step_masks(lens: &[usize], steps: usize) -> Vec<Vec<bool>> {
    (0..steps)
        .map(|t| lens.iter().map(|&l| t < l).collect())
        .collect()
}

/// Single GRU layer (PyTorch gate layout `r, z, n`).
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub ih: Linear,
    pub hh: Linear,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ih: uniform_linear(store, &format!("{name}.ih"), input, 3 * hidden, hidden, rng),
            hh: uniform_linear(
                store,
                &format!("{name}.hh"),
                hidden,
                3 * hidden,
                hidden,
                rng,
            ),
            hidden,
        }
    }

    /// Runs over a time-major `(T*B) x in` input. Rows past a sequence's
    /// length carry the previous state forward unchanged. Returns the state
    /// after every step.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: Var,
        batch: usize,
        masks: &[Vec<bool>],
    ) -> Vec<Var> {
        let h_dim = self.hidden;
        let gx_all = self.ih.forward(g, store, xs);
        let mut h = g.constant(Array2::zeros((batch, h_dim)));
        let mut out = Vec::with_capacity(masks.len());
        for (t, mask) in masks.iter().enumerate() {
            let gx = g.slice_rows(gx_all, t * batch, (t + 1) * batch);
            let gh = self.hh.forward(g, store, h);
            let rz_x = g.slice_cols(gx, 0, 2 * h_dim);
            let rz_h = g.slice_cols(gh, 0, 2 * h_dim);
            let rz = g.add(rz_x, rz_h);
            let rz = g.sigmoid(rz);
            let r = g.slice_cols(rz, 0, h_dim);
            let z = g.slice_cols(rz, h_dim, 2 * h_dim);
            let n_x = g.slice_cols(gx, 2 * h_dim, 3 * h_dim);
            let n_h = g.slice_cols(gh, 2 * h_dim, 3 * h_dim);
            let rn = g.mul(r, n_h);
            let n = g.add(n_x, rn);
            let n = g.tanh(n);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            let h_new = g.add(n, zd);
            h = g.select_rows(h_new, h, mask.clone());
            out.push(h);
        }
        out
    }
}

/// Single LSTM layer (PyTorch gate layout `i, f, g, o`).
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub ih: Linear,
    pub hh: Linear,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ih: uniform_linear(store, &format!("{name}.ih"), input, 4 * hidden, hidden, rng),
            hh: uniform_linear(
                store,
                &format!("{name}.hh"),
                hidden,
                4 * hidden,
                hidden,
                rng,
            ),
            hidden,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: Var,
        batch: usize,
        masks: &[Vec<bool>],
    ) -> Vec<Var> {
        let h_dim = self.hidden;
        let gx_all = self.ih.forward(g, store, xs);
        let mut h = g.constant(Array2::zeros((batch, h_dim)));
        let mut c = g.constant(Array2::zeros((batch, h_dim)));
        let mut out = Vec::with_capacity(masks.len());
        for (t, mask) in masks.iter().enumerate() {
            let gx = g.slice_rows(gx_all, t * batch, (t + 1) * batch);
            let gh = self.hh.forward(g, store, h);
            let gates = g.add(gx, gh);
            let if_pre = g.slice_cols(gates, 0, 2 * h_dim);
            let o_pre = g.slice_cols(gates, 3 * h_dim, 4 * h_dim);
            let ifo_pre = g.concat_cols(&[if_pre, o_pre]);
            let ifo = g.sigmoid(ifo_pre);
            let i = g.slice_cols(ifo, 0, h_dim);
            let f = g.slice_cols(ifo, h_dim, 2 * h_dim);
            let o = g.slice_cols(ifo, 2 * h_dim, 3 * h_dim);
            let cand = g.slice_cols(gates, 2 * h_dim, 3 * h_dim);
            let cand = g.tanh(cand);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cand);
            let c_new = g.add(fc, ic);
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc);
            c = g.select_rows(c_new, c, mask.clone());
            h = g.select_rows(h_new, h, mask.clone());
            out.push(h);
        }
        out
    }
}

/// Linear layer with PyTorch's recurrent init `U(-1/sqrt(hidden), 1/sqrt(hidden))`.
fn uniform_linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    output: usize,
    hidden: usize,
    rng: &mut R,
) -> Linear {
    let w = store.add_uniform(format!("{name}.weight"), (input, output), hidden, rng);
    let b = store.add_uniform(format!("{name}.bias"), (1, output), hidden, rng);
    Linear { w, b: Some(b) }
}
