//! Sensor recordings: ingestion, decimation, windowing, normalization,
//! participant-wise folds and the synthetic activity generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub type ActivityId = u32;

/// Raw multichannel accelerometer stream of one participant.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub participant_id: String,
    /// Seconds, strictly increasing.
    pub timestamps: Vec<f64>,
    /// `T x C`, units of g.
    pub samples: Array2<f64>,
    pub labels: Vec<Option<ActivityId>>,
}

impl Recording {
    pub fn new(
        participant_id: impl Into<String>,
        timestamps: Vec<f64>,
        samples: Array2<f64>,
        labels: Vec<Option<ActivityId>>,
    ) -> Result<Self> {
        let rec = Self {
            participant_id: participant_id.into(),
            timestamps,
            samples,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.timestamps.len();
        if self.samples.nrows() != t || self.labels.len() != t {
            return Err(Error::InvalidRecording(format!(
                "{}: {} timestamps, {} sample rows, {} labels",
                self.participant_id,
                t,
                self.samples.nrows(),
                self.labels.len()
            )));
        }
        if self.samples.ncols() == 0 {
            return Err(Error::InvalidRecording(format!(
                "{}: no channels",
                self.participant_id
            )));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRecording(format!(
                "{}: timestamps not strictly increasing",
                self.participant_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }

    /// Sampling rate from the median timestamp spacing.
    pub fn rate_hz(&self) -> Option<f64> {
        if self.timestamps.len() < 2 {
            return None;
        }
        let mut dts: Vec<f64> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        dts.sort_by(f64::total_cmp);
        let dt = dts[dts.len() / 2];
        Some(1.0 / dt)
    }
}

/// Fixed-length slice of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorWindow {
    /// `W x C`.
    pub values: Array2<f64>,
    pub label: Option<ActivityId>,
    pub participant_id: String,
}

impl SensorWindow {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Keeps every `(rate / target_hz)`-th sample. Rejects non-integer ratios.
pub fn resample(rec: &Recording, target_hz: f64) -> Result<Recording> {
    let Some(rate) = rec.rate_hz() else {
        return Ok(rec.clone());
    };
    let ratio = rate / target_hz;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-6 * ratio.max(1.0) {
        return Err(Error::NonIntegerDecimation {
            from_hz: rate,
            to_hz: target_hz,
        });
    }
    let factor = factor as usize;
    if factor == 1 {
        return Ok(rec.clone());
    }
    let keep: Vec<usize> = (0..rec.len()).step_by(factor).collect();
    Ok(Recording {
        participant_id: rec.participant_id.clone(),
        timestamps: keep.iter().map(|&i| rec.timestamps[i]).collect(),
        samples: rec.samples.select(Axis(0), &keep),
        labels: keep.iter().map(|&i| rec.labels[i]).collect(),
    })
}

/// Most frequent label, smallest id on ties; `None` when nothing is labeled.
pub fn modal_label(labels: &[Option<ActivityId>]) -> Option<ActivityId> {
    let mut counts: BTreeMap<ActivityId, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(*l).or_default() += 1;
    }
    // BTreeMap iterates ascending, so `>` keeps the smallest id among equals.
    let mut best: Option<(ActivityId, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l)
}

pub fn window_stride(length: usize, overlap: f64) -> usize {
    ((length as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Sliding windows of exactly `length` timesteps; a ragged tail is dropped.
pub fn window(rec: &Recording, length: usize, overlap: f64) -> Vec<SensorWindow> {
    assert!(length >= 1, "window length must be positive");
    assert!((0.0..1.0).contains(&overlap), "overlap must be in [0, 1)");
    let t = rec.len();
    if t < length {
        return Vec::new();
    }
    let stride = window_stride(length, overlap);
    let count = (t - length) / stride + 1;
    (0..count)
        .map(|i| {
            let lo = i * stride;
            SensorWindow {
                values: rec.samples.slice(s![lo..lo + length, ..]).to_owned(),
                label: modal_label(&rec.labels[lo..lo + length]),
                participant_id: rec.participant_id.clone(),
            }
        })
        .collect()
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_norm(train: &[SensorWindow]) -> Result<NormStats> {
    let first = train.first().ok_or(Error::EmptySplit("train"))?;
    let c = first.channels();
    let mut n = 0usize;
    let mut mean = vec![0.0; c];
    for w in train {
        if w.channels() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: w.channels(),
            });
        }
        for row in w.values.rows() {
            for j in 0..c {
                mean[j] += row[j];
            }
            n += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for w in train {
        for row in w.values.rows() {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
    }
    let mut std = Vec::with_capacity(c);
    for (j, v) in var.iter().enumerate() {
        let sd = (v / n as f64).sqrt();
        if sd.is_nan() || sd <= 1e-12 * (1.0 + mean[j].abs()) {
            return Err(Error::ZeroVariance { channel: j });
        }
        std.push(sd);
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn apply_value(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }
}

pub fn apply_norm(windows: &[SensorWindow], stats: &NormStats) -> Vec<SensorWindow> {
    par::map(windows, |w| {
        let mut out = w.clone();
        for mut row in out.values.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = stats.apply_value(j, *v);
            }
        }
        out
    })
}

/// One evaluation fold, as participant ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

pub const NUM_FOLDS: usize = 5;

/// Five participant-disjoint test groups; the rest of each fold is split
/// 80:20 into train and validation.
pub fn make_folds(participants: &[String], seed: u64) -> Result<FoldPlan> {
    let mut ids: Vec<String> = participants.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < NUM_FOLDS {
        return Err(Error::TooFewParticipants {
            needed: NUM_FOLDS,
            got: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for f in 0..NUM_FOLDS {
        let lo = f * n / NUM_FOLDS;
        let hi = (f + 1) * n / NUM_FOLDS;
        let test: Vec<String> = ids[lo..hi].to_vec();
        let mut rest: Vec<String> = ids[..lo].iter().chain(&ids[hi..]).cloned().collect();
        rest.shuffle(&mut rng);
        let n_val = ((rest.len() as f64) * 0.2).round().max(1.0) as usize;
        let val = rest.split_off(rest.len() - n_val);
        folds.push(Fold {
            train: rest,
            val,
            test,
        });
    }
    Ok(FoldPlan { folds })
}

impl FoldPlan {
    /// Checks disjointness within folds and uniqueness of test participants.
    pub fn validate(&self) -> Result<()> {
        let mut tested = std::collections::HashSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for p in f.train.iter().chain(&f.val).chain(&f.test) {
                if !seen.insert(p) {
                    return Err(Error::Config(format!(
                        "fold {i}: participant {p} in two splits"
                    )));
                }
            }
            for p in &f.test {
                if !tested.insert(p) {
                    return Err(Error::Config(format!(
                        "participant {p} tested in more than one fold"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::missing(
                path,
                "fold plan JSON; `motif synth` and `motif ingest` write one",
            ),
            _ => e.into(),
        })?;
        let plan: FoldPlan = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Minimum participants for a train/validation/test holdout.
pub const HOLDOUT_MIN: usize = 3;

/// One participant-disjoint split: a seeded shuffle cut 60:20:20 (at least one
/// participant each for validation and test).
pub fn holdout_split(participants: &[String], seed: u64) -> Result<Fold> {
    let mut ids: Vec<String> = participants.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < HOLDOUT_MIN {
        return Err(Error::TooFewParticipants {
            needed: HOLDOUT_MIN,
            got: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_hold = ((n as f64) * 0.2).round().max(1.0) as usize;
    let test = ids.split_off(n - n_hold);
    let val = ids.split_off(ids.len() - n_hold);
    Ok(Fold {
        train: ids,
        val,
        test,
    })
}

/// Sampling rate and sliding-window geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub len: usize,
    pub overlap: f64,
    pub rate_hz: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            len: 100,
            overlap: 0.5,
            rate_hz: 50.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0
            || !(0.0..1.0).contains(&self.overlap)
            || self.rate_hz.is_nan()
            || self.rate_hz <= 0.0
        {
            return Err(Error::Config(
                "window needs len > 0, overlap in [0, 1) and a positive rate".into(),
            ));
        }
        Ok(())
    }
}

/// Resampled, un-normalized windows of the given participants, in recording order.
pub fn windows_of(
    recs: &[Recording],
    participants: &[String],
    cfg: &WindowConfig,
) -> Result<Vec<SensorWindow>> {
    let mut out = Vec::new();
    for rec in recs
        .iter()
        .filter(|r| participants.contains(&r.participant_id))
    {
        out.extend(window(&resample(rec, cfg.rate_hz)?, cfg.len, cfg.overlap));
    }
    Ok(out)
}

pub fn participant_ids(recs: &[Recording]) -> Vec<String> {
    let mut ids: Vec<String> = recs.iter().map(|r| r.participant_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Split and normalization statistics fitted on its training participants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPrep {
    pub window: WindowConfig,
    pub split: Fold,
    pub norm: NormStats,
}

impl DataPrep {
    pub fn fit(recs: &[Recording], window: &WindowConfig, seed: u64) -> Result<Self> {
        window.validate()?;
        let split = holdout_split(&participant_ids(recs), seed)?;
        let train = windows_of(recs, &split.train, window)?;
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        Ok(Self {
            window: window.clone(),
            norm: fit_norm(&train)?,
            split,
        })
    }

    /// Normalized windows of the given participants.
    pub fn windows(
        &self,
        recs: &[Recording],
        participants: &[String],
    ) -> Result<Vec<SensorWindow>> {
        Ok(apply_norm(
            &windows_of(recs, participants, &self.window)?,
            &self.norm,
        ))
    }
}

/// Parameters of the synthetic activity generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub participants: usize,
    pub classes: usize,
    pub seconds_per_class: f64,
    pub rate_hz: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            participants: 10,
            classes: 4,
            seconds_per_class: 40.0,
            rate_hz: 50.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Human-readable class names of the synthetic generator.
pub fn synth_class_name(class: usize) -> String {
    match class {
        0 => "rest".into(),
        1 => "pos-phase".into(),
        2 => "neg-phase".into(),
        3 => "walk".into(),
        c => format!("motion-{c}"),
    }
}

/// Whether a synthetic class is (nearly) motionless.
pub fn synth_class_is_static(class: usize) -> bool {
    class == 0
}

struct ParticipantStyle {
    tempo: f64,
    vigor: f64,
}

fn class_signal(class: usize, t: f64, phase: f64, style: &ParticipantStyle) -> [f64; 3] {
    let tempo = style.tempo;
    let vigor = style.vigor;
    match class {
        0 => {
            let drift = 0.02 * (2.0 * PI * 0.15 * t + phase).sin();
            [drift, 0.5 * drift, 1.0]
        }
        // Same oscillation, mirrored along y: per-channel magnitudes (and
        // the vector norm) coincide, only the direction differs.
        1 | 2 => {
            let s = 0.6 * vigor * (2.0 * PI * 1.2 * tempo * t + phase).sin();
            let sign = if class == 1 { 1.0 } else { -1.0 };
            [s, sign * s, 1.0]
        }
        3 => {
            let w = 2.0 * PI * 2.0 * tempo * t + phase;
            let a = 0.5 * vigor;
            [
                a * w.sin() + 0.3 * a * (2.0 * w + 0.7).sin(),
                0.4 * a * (w + 1.3).sin(),
                1.0 + 0.8 * a * (2.0 * w).cos(),
            ]
        }
        c => {
            let f = 0.6 + 0.45 * c as f64;
            let a = (0.3 + 0.08 * c as f64) * vigor;
            let w = 2.0 * PI * f * tempo * t + phase;
            let lag = 0.4 * c as f64;
            [
                a * w.sin(),
                a * (w + lag).sin(),
                1.0 + 0.5 * a * (w + 2.0 * lag).sin(),
            ]
        }
    }
}

/// Deterministic labeled 3-axis recordings, one per participant, each
/// containing one contiguous segment per class.
pub fn synth_recordings(cfg: &SynthConfig) -> Vec<Recording> {
    assert!(
        cfg.classes >= 2,
        "synthetic data needs at least two classes"
    );
    par::map_range(cfg.participants, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(p as u64),
        );
        let style = ParticipantStyle {
            tempo: rng.random_range(0.9..1.1),
            vigor: rng.random_range(0.85..1.15),
        };
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
        let per_class = (cfg.seconds_per_class * cfg.rate_hz).round() as usize;
        let total = per_class * cfg.classes;
        let mut samples = Array2::zeros((total, 3));
        let mut labels = Vec::with_capacity(total);
        let mut order: Vec<usize> = (0..cfg.classes).collect();
        order.shuffle(&mut rng);
        for (seg, &class) in order.iter().enumerate() {
            let phase = rng.random_range(0.0..2.0 * PI);
            for i in 0..per_class {
                let t = i as f64 / cfg.rate_hz;
                let v = class_signal(class, t, phase, &style);
                let row = seg * per_class + i;
                for (j, x) in v.iter().enumerate() {
                    samples[[row, j]] = x + noise.sample(&mut rng);
                }
                labels.push(Some(class as ActivityId));
            }
        }
        let timestamps = (0..total).map(|i| i as f64 / cfg.rate_hz).collect();
        Recording {
            participant_id: format!("P{p:03}"),
            timestamps,
            samples,
            labels,
        }
    })
}

/// Shorthand for [`synth_recordings`] with default timing and noise.
pub fn synth_dataset(num_participants: usize, classes: usize, seed: u64) -> Vec<Recording> {
    synth_recordings(&SynthConfig {
        participants: num_participants,
        classes,
        seed,
        ..SynthConfig::default()
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    timestamp: f64,
    x: f64,
    y: f64,
    z: f64,
    label: Option<ActivityId>,
}

/// Writes `timestamp,x,y,z,label` (label empty when unknown).
pub fn write_recording_csv(rec: &Recording, path: &Path) -> Result<()> {
    if rec.channels() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: rec.channels(),
        });
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for i in 0..rec.len() {
        w.serialize(CsvRow {
            timestamp: rec.timestamps[i],
            x: rec.samples[[i, 0]],
            y: rec.samples[[i, 1]],
            z: rec.samples[[i, 2]],
            label: rec.labels[i],
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

pub fn read_recording_csv(path: &Path) -> Result<Recording> {
    let participant = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format("csv", format!("bad file name {}", path.display())))?
        .to_string();
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let want = ["timestamp", "x", "y", "z", "label"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::format(
            "csv",
            format!("{}: header must be {}", path.display(), want.join(",")),
        ));
    }
    let mut ts = Vec::new();
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(csv_err)?;
        ts.push(row.timestamp);
        vals.extend([row.x, row.y, row.z]);
        labels.push(row.label);
    }
    let samples = Array2::from_shape_vec((ts.len(), 3), vals).expect("three values per row");
    Recording::new(participant, ts, samples, labels)
}

/// Reads every `*.csv` in a directory, sorted by file name.
pub fn read_recordings_dir(dir: &Path) -> Result<Vec<Recording>> {
    if !dir.is_dir() {
        return Err(Error::missing(
            dir,
            "directory of per-participant CSV files",
        ));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::missing(dir, "no *.csv recordings found"));
    }
    paths.iter().map(|p| read_recording_csv(p)).collect()
}

pub fn write_recordings_dir(recs: &[Recording], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for rec in recs {
        write_recording_csv(rec, &dir.join(format!("{}.csv", rec.participant_id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(n: usize, hz: f64) -> Recording {
        let ts = (0..n).map(|i| i as f64 / hz).collect();
        let samples = Array::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let labels = (0..n).map(|i| Some((i % 3) as ActivityId)).collect();
        Recording::new("r", ts, samples, labels).unwrap()
    }

    #[test]
    fn decimates_by_integer_factor() {
        let rec = ramp(200, 200.0);
        let out = resample(&rec, 50.0).unwrap();
        assert_eq!(out.len(), 50);
        assert_eq!(out.samples[[1, 0]], rec.samples[[4, 0]]);
        assert_eq!(out.labels[1], rec.labels[4]);

        let rec = ramp(10, 100.0);
        let out = resample(&rec, 50.0).unwrap();
        let firsts: Vec<f64> = out.samples.column(0).iter().map(|v| v / 3.0).collect();
        assert_eq!(firsts, vec![0.0, 2.0, 4.0, 6.0, 8.0]);

        let rec = ramp(40, 50.0);
        assert_eq!(resample(&rec, 50.0).unwrap(), rec);
    }

    #[test]
    fn rejects_non_integer_decimation() {
        let rec = ramp(30, 75.0);
        assert!(matches!(
            resample(&rec, 50.0),
            Err(Error::NonIntegerDecimation { .. })
        ));
        assert!(matches!(
            resample(&rec, 100.0),
            Err(Error::NonIntegerDecimation { .. })
        ));
    }

    #[test]
    fn window_counts_and_starts() {
        assert_eq!(window(&ramp(100, 50.0), 100, 0.0).len(), 1);
        assert!(window(&ramp(99, 50.0), 100, 0.0).is_empty());
        let rec = ramp(300, 50.0);
        let ws = window(&rec, 100, 0.5);
        assert_eq!(ws.len(), 5);
        for (i, w) in ws.iter().enumerate() {
            assert_eq!(w.values[[0, 0]], rec.samples[[i * 50, 0]]);
            assert_eq!(w.len(), 100);
        }
    }

    #[test]
    fn modal_label_breaks_ties_low() {
        assert_eq!(modal_label(&[Some(3), Some(1), Some(3), Some(1)]), Some(1));
        assert_eq!(
            modal_label(&[Some(3), Some(3), Some(1), None, None, None]),
            Some(3)
        );
        assert_eq!(modal_label(&[None, None]), None);
    }

    #[test]
    fn normalization_round_trip() {
        let recs = synth_dataset(2, 4, 3);
        let ws: Vec<_> = recs.iter().flat_map(|r| window(r, 100, 0.5)).collect();
        let stats = fit_norm(&ws).unwrap();
        let normed = apply_norm(&ws, &stats);
        let refit = fit_norm(&normed).unwrap();
        for j in 0..3 {
            assert!(refit.mean[j].abs() < 1e-6);
            assert!((refit.std[j] - 1.0).abs() < 1e-6);
        }
        let s = NormStats {
            mean: vec![1.0],
            std: vec![2.0],
        };
        assert_eq!(s.apply_value(0, 5.0), 2.0);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let w = SensorWindow {
            values: Array::from_shape_fn((10, 2), |(i, j)| if j == 0 { i as f64 } else { 7.0 }),
            label: None,
            participant_id: "a".into(),
        };
        assert!(matches!(
            fit_norm(&[w]),
            Err(Error::ZeroVariance { channel: 1 })
        ));
        assert!(matches!(fit_norm(&[]), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn folds_for_small_groups() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let plan = make_folds(&ids, 1).unwrap();
        plan.validate().unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 2));
        let ids5: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let plan = make_folds(&ids5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 1));
        assert!(matches!(
            make_folds(&ids5[..4], 1),
            Err(Error::TooFewParticipants { .. })
        ));
        assert_eq!(make_folds(&ids, 9).unwrap(), make_folds(&ids, 9).unwrap());
    }

    #[test]
    fn synth_is_deterministic_and_labeled() {
        let a = synth_dataset(6, 4, 11);
        let b = synth_dataset(6, 4, 11);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for r in &a {
            r.validate().unwrap();
            assert!((r.rate_hz().unwrap() - 50.0).abs() < 1e-9);
            assert!(r.labels.iter().all(|l| l.is_some_and(|l| l < 4)));
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = synth_dataset(2, 2, 5);
        write_recordings_dir(&recs, dir.path()).unwrap();
        let back = read_recordings_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].participant_id, recs[0].participant_id);
        assert_eq!(back[0].labels, recs[0].labels);
        let max_diff = (&back[1].samples - &recs[1].samples)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(max_diff < 1e-12);
    }
}
