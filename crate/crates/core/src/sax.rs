//! Symbolic baselines: PAA, SAX on the acceleration magnitude, and
//! SAX-REPEAT (per-channel SAX followed by k-means over symbol tuples).

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::SensorWindow;
use crate::error::{Error, Result};
use crate::par;
use crate::quantizer::kmeans_pp_rows;
use crate::tokens::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaxConfig {
    pub alphabet_size: usize,
    /// Timesteps per symbol.
    pub paa_ratio: usize,
}

impl Default for SaxConfig {
    fn default() -> Self {
        Self {
            alphabet_size: 512,
            paa_ratio: 2,
        }
    }
}

impl SaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 || self.paa_ratio == 0 {
            return Err(Error::Config(
                "SAX needs alphabet_size >= 2 and paa_ratio >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        breakpoints(self.alphabet_size)
    }
}

/// Inverse of the standard normal CDF (Wichura's AS241, about 1e-16 relative).
#[allow(clippy::excessive_precision)]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must be in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2_509.080_928_730_122_7 * r + 33_430.575_583_588_13) * r
            + 67_265.770_927_008_7)
            * r
            + 45_921.953_931_549_87)
            * r
            + 13_731.693_765_509_46)
            * r
            + 1_971.590_950_306_551_3)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5_226.495_278_852_546 * r + 28_729.085_735_721_943) * r
            + 39_307.895_800_092_71)
            * r
            + 21_213.794_301_586_597)
            * r
            + 5_394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_87)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_888)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// `alphabet - 1` standard-normal quantiles at `j / alphabet`.
pub fn breakpoints(alphabet: usize) -> Vec<f64> {
    (1..alphabet)
        .map(|j| inverse_normal_cdf(j as f64 / alphabet as f64))
        .collect()
}

/// Bin `j` holds `bp[j-1] < v <= bp[j]`.
pub fn symbol(v: f64, breakpoints: &[f64]) -> u32 {
    breakpoints.partition_point(|&b| b < v) as u32
}

/// Segment means; the length must split evenly.
pub fn paa(series: &[f64], segments: usize) -> Result<Vec<f64>> {
    if segments == 0 || !series.len().is_multiple_of(segments) {
        return Err(Error::NonDivisibleLength {
            len: series.len(),
            segments,
        });
    }
    let w = series.len() / segments;
    Ok(series
        .chunks(w)
        .map(|c| c.iter().sum::<f64>() / w as f64)
        .collect())
}

/// Per-timestep Euclidean norm over channels.
pub fn magnitude(window: &SensorWindow) -> Vec<f64> {
    window
        .values
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect()
}

/// Z-normalized copy, or `ZeroVariance` for a (numerically) constant series.
pub fn znorm(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-10 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance { channel: 0 });
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

/// Symbols of one series: z-normalize, PAA, bin. A constant series maps to
/// the middle symbol everywhere.
pub fn series_symbols(x: &[f64], cfg: &SaxConfig, bps: &[f64]) -> Result<Vec<u32>> {
    if !x.len().is_multiple_of(cfg.paa_ratio) {
        return Err(Error::NonDivisibleLength {
            len: x.len(),
            segments: x.len() / cfg.paa_ratio,
        });
    }
    let segments = x.len() / cfg.paa_ratio;
    match znorm(x) {
        Ok(z) => Ok(paa(&z, segments)?
            .into_iter()
            .map(|v| symbol(v, bps))
            .collect()),
        Err(Error::ZeroVariance { .. }) => Ok(vec![(cfg.alphabet_size / 2) as u32; segments]),
        Err(e) => Err(e),
    }
}

/// Magnitude SAX of one window: `W / paa_ratio` symbols.
pub fn sax_discretize(window: &SensorWindow, cfg: &SaxConfig) -> Result<TokenSequence> {
    cfg.validate()?;
    let ids = series_symbols(&magnitude(window), cfg, &cfg.breakpoints())?;
    Ok(TokenSequence::new(
        ids,
        window.label,
        window.participant_id.clone(),
    ))
}

pub fn sax_discretize_all(windows: &[SensorWindow], cfg: &SaxConfig) -> Result<Vec<TokenSequence>> {
    par::map(windows, |w| sax_discretize(w, cfg))
        .into_iter()
        .collect()
}

/// Per-channel symbols, one row per PAA segment and one column per channel.
pub fn channel_tuples(window: &SensorWindow, cfg: &SaxConfig, bps: &[f64]) -> Result<Array2<f64>> {
    let segments = window.len() / cfg.paa_ratio;
    let mut out = Array2::zeros((segments, window.channels()));
    for (c, col) in window.values.columns().into_iter().enumerate() {
        let syms = series_symbols(&col.to_vec(), cfg, bps)?;
        for (t, s) in syms.into_iter().enumerate() {
            out[[t, c]] = s as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 512,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    /// `k x dim`, stored row-major.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Requested `k` when it was reduced to the distinct-point count.
    pub requested_k: Option<usize>,
}

fn sq(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn distinct_rows(x: &Array2<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

impl KMeans {
    /// Lloyd iterations from k-means++ seeds. `k` is capped at the number of
    /// distinct points.
    pub fn fit(points: &Array2<f64>, cfg: &KMeansConfig) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptySplit("k-means"));
        }
        let distinct = distinct_rows(points);
        let k = cfg.k.min(distinct).max(1);
        let requested_k = (k < cfg.k).then_some(cfg.k);
        if requested_k.is_some() {
            log::warn!(
                "k-means: only {distinct} distinct tuples, reducing k from {} to {k}",
                cfg.k
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut centroids: Vec<Vec<f64>> = kmeans_pp_rows(points.view(), k, &mut rng)
            .into_iter()
            .map(|i| points.row(i).to_vec())
            .collect();
        let n = points.nrows();
        let dim = points.ncols();
        let mut prev = f64::INFINITY;
        let mut inertia = f64::INFINITY;
        let mut iterations = 0;
        for it in 0..cfg.max_iter {
            iterations = it + 1;
            let assign: Vec<(usize, f64)> =
                par::map_range(n, |i| nearest_centroid(&centroids, points.row(i)));
            inertia = assign.iter().map(|a| a.1).sum();
            let mut sums = vec![vec![0.0; dim]; centroids.len()];
            let mut counts = vec![0usize; centroids.len()];
            for (i, &(c, _)) in assign.iter().enumerate() {
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
                    *s += v;
                }
            }
            let mut taken = vec![false; n];
            for c in 0..centroids.len() {
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                } else {
                    // reseed from the point farthest from its centroid
                    let far = (0..n)
                        .filter(|&i| !taken[i])
                        .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)))
                        .expect("more points than clusters");
                    taken[far] = true;
                    centroids[c] = points.row(far).to_vec();
                }
            }
            if prev.is_finite() && (prev - inertia).abs() <= cfg.tol * prev.max(f64::MIN_POSITIVE) {
                break;
            }
            prev = inertia;
        }
        Ok(Self {
            centroids,
            inertia,
            iterations,
            requested_k,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn predict(&self, points: &Array2<f64>) -> Vec<u32> {
        par::map_range(points.nrows(), |i| {
            nearest_centroid(&self.centroids, points.row(i)).0 as u32
        })
    }
}

/// Fitted SAX-REPEAT discretizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaxRepeat {
    pub sax: SaxConfig,
    pub kmeans: KMeans,
}

impl SaxRepeat {
    /// Fits the tuple clustering on `train` only.
    pub fn fit(train: &[SensorWindow], sax: &SaxConfig, kmeans: &KMeansConfig) -> Result<Self> {
        sax.validate()?;
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let bps = sax.breakpoints();
        let parts = par::map(train, |w| channel_tuples(w, sax, &bps))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let points = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|_| {
            Error::DimensionMismatch {
                expected: train[0].channels(),
                got: 0,
            }
        })?;
        Ok(Self {
            sax: sax.clone(),
            kmeans: KMeans::fit(&points, kmeans)?,
        })
    }

    pub fn transform(&self, windows: &[SensorWindow]) -> Result<Vec<TokenSequence>> {
        let bps = self.sax.breakpoints();
        par::map(windows, |w| {
            let t = channel_tuples(w, &self.sax, &bps)?;
            Ok(TokenSequence::new(
                self.kmeans.predict(&t),
                w.label,
                w.participant_id.clone(),
            ))
        })
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(values: Array2<f64>) -> SensorWindow {
        SensorWindow {
            values,
            label: Some(1),
            participant_id: "P".into(),
        }
    }

    #[test]
    fn paa_examples() {
        assert_eq!(paa(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.5, 3.5]);
        assert_eq!(paa(&[5.0; 4], 2).unwrap(), vec![5.0, 5.0]);
        assert_eq!(
            paa(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3).unwrap(),
            vec![1.5, 3.5, 5.5]
        );
        assert!(matches!(
            paa(&[1.0; 5], 2),
            Err(Error::NonDivisibleLength {
                len: 5,
                segments: 2
            })
        ));
    }

    #[test]
    fn breakpoint_and_bin_examples() {
        let b = breakpoints(4);
        assert_eq!(b.len(), 3);
        assert!((b[0] + 0.6744897501960817).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
        assert!((b[2] - 0.6744897501960817).abs() < 1e-12);
        let syms: Vec<u32> = [-1.0, -0.1, 0.1, 1.0]
            .iter()
            .map(|&v| symbol(v, &b))
            .collect();
        assert_eq!(syms, vec![0, 1, 2, 3]);
        assert_eq!(symbol(0.0, &b), 1);
        let cfg = SaxConfig {
            alphabet_size: 4,
            paa_ratio: 1,
        };
        assert_eq!(
            series_symbols(&[-1.0, -0.1, 0.1, 1.0], &cfg, &b)
                .unwrap()
                .len(),
            4
        );
    }

    #[test]
    fn constant_magnitude_gives_middle_symbol() {
        let w = win(Array2::from_elem((100, 3), 1.0));
        let t = sax_discretize(&w, &SaxConfig::default()).unwrap();
        assert_eq!(t.ids, vec![256; 50]);
    }

    #[test]
    fn kmeans_caps_k_and_matches_brute_force() {
        let pts = Array2::from_shape_fn((60, 2), |(i, j)| ((i % 5) * (j + 1)) as f64);
        let km = KMeans::fit(
            &pts,
            &KMeansConfig {
                k: 8,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        assert_eq!(km.k(), 5);
        assert_eq!(km.requested_k, Some(8));
        assert!(km.inertia.abs() < 1e-12);
        for (i, &c) in km.predict(&pts).iter().enumerate() {
            let d: Vec<f64> = km.centroids.iter().map(|ce| sq(pts.row(i), ce)).collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(c as usize, d.iter().position(|&x| x == best).unwrap());
        }
    }
}
