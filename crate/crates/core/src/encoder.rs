//! Strided 1-D convolutional encoder: sensor window -> latent frames.
//!
//! Every block is `conv -> ReLU -> dropout` without padding, so a block with
//! kernel `k` and stride `s` maps `L` timesteps to `floor((L - k) / s) + 1`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::SensorWindow;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{dropout, Mode};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Named encoder layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// 49 frames per 100 input steps (24.5 Hz at 50 Hz input).
    Base,
    /// Nominal 50 Hz; pad-free arithmetic gives 97 frames per 100 steps.
    Full50Hz,
    /// 23 frames per 100 input steps.
    Half11_5Hz,
    Kernel8,
    Kernel16,
    Custom,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 5] = [
        EncoderVariant::Base,
        EncoderVariant::Full50Hz,
        EncoderVariant::Half11_5Hz,
        EncoderVariant::Kernel8,
        EncoderVariant::Kernel16,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EncoderVariant::Base => "base_24.5Hz",
            EncoderVariant::Full50Hz => "full_50Hz",
            EncoderVariant::Half11_5Hz => "half_11.5Hz",
            EncoderVariant::Kernel8 => "kernel8",
            EncoderVariant::Kernel16 => "kernel16",
            EncoderVariant::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
    pub dropout: f64,
    pub variant: EncoderVariant,
}

const BASE_CHANNELS: [usize; 4] = [32, 64, 128, 256];

fn blocks(channels: [usize; 4], kernels: [usize; 4], strides: [usize; 4]) -> Vec<ConvBlock> {
    (0..4)
        .map(|i| ConvBlock {
            channels: channels[i],
            kernel: kernels[i],
            stride: strides[i],
        })
        .collect()
}

impl EncoderConfig {
    pub fn variant(variant: EncoderVariant) -> Self {
        let b = match variant {
            EncoderVariant::Base | EncoderVariant::Custom => {
                blocks(BASE_CHANNELS, [4, 1, 1, 1], [2, 1, 1, 1])
            }
            EncoderVariant::Full50Hz => blocks(BASE_CHANNELS, [4, 1, 1, 1], [1, 1, 1, 1]),
            EncoderVariant::Half11_5Hz => blocks(BASE_CHANNELS, [4, 4, 1, 1], [2, 2, 1, 1]),
            EncoderVariant::Kernel8 => blocks(BASE_CHANNELS, [8, 1, 1, 1], [2, 1, 1, 1]),
            EncoderVariant::Kernel16 => blocks(BASE_CHANNELS, [16, 1, 1, 1], [2, 1, 1, 1]),
        };
        Self {
            in_channels: 3,
            blocks: b,
            dropout: 0.2,
            variant,
        }
    }

    pub fn base() -> Self {
        Self::variant(EncoderVariant::Base)
    }

    /// Same kernels and strides with different block widths.
    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        assert_eq!(channels.len(), self.blocks.len(), "one width per block");
        for (b, &c) in self.blocks.iter_mut().zip(channels) {
            b.channels = c;
        }
        self
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.channels)
    }

    /// Frames produced for `input_len` timesteps (0 when too short).
    pub fn output_len(&self, input_len: usize) -> usize {
        let mut len = input_len;
        for b in &self.blocks {
            if len < b.kernel {
                return 0;
            }
            len = (len - b.kernel) / b.stride + 1;
        }
        len
    }

    /// Smallest input length yielding at least one frame.
    pub fn receptive_field(&self) -> usize {
        self.blocks
            .iter()
            .rev()
            .fold(1, |need, b| (need - 1) * b.stride + b.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty()
            || self
                .blocks
                .iter()
                .any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0)
        {
            return Err(Error::Config(
                "encoder blocks need positive channels, kernel and stride".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Output of [`Encoder::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `F x d`.
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    layers: Vec<ConvParams>,
}

impl Encoder {
    /// Registers parameters (uniform fan-in init) under `encoder.*`.
    pub fn new<R: Rng>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(cfg.blocks.len());
        let mut c_in = cfg.in_channels;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let fan_in = c_in * b.kernel;
            let w = store.add_uniform(
                format!("encoder.{i}.weight"),
                (fan_in, b.channels),
                fan_in,
                rng,
            );
            let bias = store.add_uniform(format!("encoder.{i}.bias"), (1, b.channels), fan_in, rng);
            layers.push(ConvParams { w, b: bias });
            c_in = b.channels;
        }
        Self { cfg, layers }
    }

    /// Rebinds to parameters already present in `store` (e.g. after loading).
    pub fn bind(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        let layers = (0..cfg.blocks.len())
            .map(|i| {
                let w = find(store, &format!("encoder.{i}.weight"))?;
                let b = find(store, &format!("encoder.{i}.bias"))?;
                Ok(ConvParams { w, b })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// `x` is `(B*W) x C`; returns `(B*F) x d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        window_len: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let need = self.cfg.receptive_field();
        if window_len < need {
            return Err(Error::WindowTooShort {
                len: window_len,
                needed: need,
            });
        }
        let mut h = x;
        let mut len = window_len;
        for (b, p) in self.cfg.blocks.iter().zip(&self.layers) {
            let cols = if b.kernel == 1 && b.stride == 1 {
                h
            } else {
                g.im2col(h, len, b.kernel, b.stride, 0)
            };
            let w = g.param(store, p.w);
            let bias = g.param(store, p.b);
            let y = g.matmul(cols, w);
            let y = g.add_row(y, bias);
            let y = g.relu(y);
            h = dropout(g, y, self.cfg.dropout, mode);
            len = (len - b.kernel) / b.stride + 1;
        }
        Ok(h)
    }

    /// Eval-mode encoding of one window.
    pub fn encode(
        &self,
        store: &ParamStore,
        window: &SensorWindow,
        input_rate_hz: f64,
    ) -> Result<LatentSequence> {
        if window.channels() != self.cfg.in_channels {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.in_channels,
                got: window.channels(),
            });
        }
        let mut g = Graph::new();
        let x = g.constant(window.values.clone());
        let z = self.forward(&mut g, store, x, window.len(), &mut Mode::Eval)?;
        let frames = g.value(z).clone();
        let seconds = window.len() as f64 / input_rate_hz;
        Ok(LatentSequence {
            frame_rate: frames.nrows() as f64 / seconds,
            frames,
        })
    }
}

pub(crate) fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))
}

/// Stacks windows into a `(B*W) x C` matrix.
pub fn stack_windows(windows: &[&SensorWindow]) -> Array2<f64> {
    let views: Vec<_> = windows.iter().map(|w| w.values.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("windows share length and channels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(len: usize, seed: u64) -> SensorWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SensorWindow {
            values: Array2::from_shape_fn((len, 3), |_| rng.random_range(-1.0..1.0)),
            label: None,
            participant_id: "p".into(),
        }
    }

    #[test]
    fn length_arithmetic() {
        assert_eq!(EncoderConfig::base().output_len(100), 49);
        assert_eq!(EncoderConfig::base().output_len(4), 1);
        assert_eq!(EncoderConfig::base().output_len(3), 0);
        assert_eq!(
            EncoderConfig::variant(EncoderVariant::Kernel8).output_len(100),
            47
        );
        assert_eq!(
            EncoderConfig::variant(EncoderVariant::Kernel16).output_len(100),
            43
        );
        assert_eq!(
            EncoderConfig::variant(EncoderVariant::Full50Hz).output_len(100),
            97
        );
        assert_eq!(
            EncoderConfig::variant(EncoderVariant::Half11_5Hz).output_len(100),
            23
        );
        assert_eq!(
            EncoderConfig::variant(EncoderVariant::Half11_5Hz).receptive_field(),
            10
        );
    }

    #[test]
    fn encode_matches_output_len_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in EncoderVariant::ALL {
            let cfg = EncoderConfig::variant(v).with_channels(&[4, 4, 4, 8]);
            let mut store = ParamStore::new();
            let enc = Encoder::new(cfg.clone(), &mut store, &mut rng);
            for len in [cfg.receptive_field(), 37, 100] {
                let z = enc.encode(&store, &window(len, 1), 50.0).unwrap();
                assert_eq!(z.frames.nrows(), cfg.output_len(len), "{v:?} len {len}");
                assert_eq!(z.frames.ncols(), 8);
            }
        }
    }

    #[test]
    fn base_frame_rate_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(EncoderConfig::base(), &mut store, &mut rng);
        let w = window(100, 2);
        let a = enc.encode(&store, &w, 50.0).unwrap();
        let b = enc.encode(&store, &w, 50.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.dim(), (49, 256));
        assert!((a.frame_rate - 24.5).abs() < 1e-12);
        assert!(a.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_short_window_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(EncoderConfig::base(), &mut store, &mut rng);
        assert!(matches!(
            enc.encode(&store, &window(3, 0), 50.0),
            Err(Error::WindowTooShort { .. })
        ));
    }
}
