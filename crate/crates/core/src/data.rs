//! Dataset loading, splits, Z-score normalization, windowing, time features
//! and the synthetic benchmark generator.

use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, fourier_transform, FourierBasis, StgGraph};

/// Std-devs below this are replaced by 1 during normalization.
pub const MIN_STD: f64 = 1e-12;

/// Raw (unnormalized) spatio-temporal series on a sensor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct StgDataset {
    /// `N × T`, one row per node.
    pub values: Array2<f64>,
    pub interval_minutes: u32,
    pub start: NaiveDateTime,
    pub graph: StgGraph,
    /// Distance list behind `graph`, if it came from (or can be written as) one.
    pub distances: Vec<(usize, usize, f64)>,
}

impl StgDataset {
    pub fn num_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(t as i64 * self.interval_minutes as i64)
    }
}

/// Reads a headerless CSV with one row per node and one column per time point.
pub fn read_values_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let mut row = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    bad.push(format!("({r},{c})={field:?}"));
                    row.push(f64::NAN);
                }
            }
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(
                    path,
                    format!(
                        "row {r} has {} columns, expected {}",
                        row.len(),
                        first.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    if !bad.is_empty() {
        let shown: Vec<_> = bad.iter().take(10).cloned().collect();
        let more = if bad.len() > 10 {
            format!(" and {} more", bad.len() - 10)
        } else {
            String::new()
        };
        return Err(Error::format(
            path,
            format!("non-finite cells {}{more}", shown.join(", ")),
        ));
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::format(path, "no values"));
    }
    let (n, t) = (rows.len(), rows[0].len());
    Array2::from_shape_vec((n, t), rows.into_iter().flatten().collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_values_csv(path: &Path, values: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for row in values.rows() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads values and a distance-list graph; node counts must agree.
pub fn load_dataset(
    values_path: &Path,
    graph_path: &Path,
    interval_minutes: u32,
    start: NaiveDateTime,
    mode: crate::graph::AdjacencyMode,
) -> Result<StgDataset> {
    let values = read_values_csv(values_path)?;
    let distances = crate::graph::read_distance_csv(graph_path)?;
    let n = values.nrows();
    if let Some(&(i, j, _)) = distances.iter().find(|&&(i, j, _)| i >= n || j >= n) {
        return Err(Error::format(
            graph_path,
            format!("edge ({i}, {j}) references a node beyond the {n} rows of the values file"),
        ));
    }
    let graph = crate::graph::graph_from_distance_file(graph_path, n, mode)?;
    if interval_minutes == 0 {
        return Err(Error::Config("interval must be positive".into()));
    }
    Ok(StgDataset {
        values,
        interval_minutes,
        start,
        graph,
        distances,
    })
}

/// Joint Z-score statistics over all nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// Population mean and std of `values`, with the small-std guard.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Normalization {
            mean,
            std: if std < MIN_STD { 1.0 } else { std },
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Chronological split with statistics fitted on the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub stats: Normalization,
}

/// Splits `0..T` into train/val/test by `ratios` and fits the Z-score on the
/// training columns. Boundaries are `round(T·r)` cumulative.
pub fn split_and_normalize(
    ds: &StgDataset,
    ratios: [f64; 3],
    context: usize,
    horizon: usize,
) -> Result<Split> {
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let t = ds.len();
    let a = (t as f64 * ratios[0]).round() as usize;
    let b = (t as f64 * (ratios[0] + ratios[1])).round() as usize;
    let (train, val, test) = (0..a, a..b, b..t);
    for (name, r) in [("train", &train), ("val", &val), ("test", &test)] {
        if r.len() < context + horizon {
            return Err(Error::Config(format!(
                "{name} split has {} time points, fewer than context + horizon = {}",
                r.len(),
                context + horizon
            )));
        }
    }
    let train_vals: Vec<f64> = ds
        .values
        .slice(s![.., train.clone()])
        .iter()
        .copied()
        .collect();
    Ok(Split {
        stats: Normalization::fit(&train_vals),
        train,
        val,
        test,
    })
}

/// Start offsets of sliding windows inside `range`.
pub fn window_starts(
    range: &Range<usize>,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Vec<usize> {
    let span = context + horizon;
    if range.len() < span || stride == 0 {
        return Vec::new();
    }
    (0..=(range.len() - span) / stride)
        .map(|i| range.start + i * stride)
        .collect()
}

/// Which calendar features are appended to the encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeFeatureConfig {
    pub day_of_week: bool,
    pub week_of_month: bool,
    pub time_of_day: bool,
    /// Project the features with `Uᵀ` like the signal (otherwise raw).
    pub spectral: bool,
}

impl Default for TimeFeatureConfig {
    fn default() -> Self {
        TimeFeatureConfig {
            day_of_week: true,
            week_of_month: true,
            time_of_day: true,
            spectral: true,
        }
    }
}

impl TimeFeatureConfig {
    pub fn count(&self) -> usize {
        [self.day_of_week, self.week_of_month, self.time_of_day]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Integer codes of the enabled features at time `ts`.
    pub fn codes(&self, ts: NaiveDateTime, interval_minutes: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(3);
        if self.day_of_week {
            out.push(ts.weekday().num_days_from_monday());
        }
        if self.week_of_month {
            out.push((ts.day() - 1) / 7);
        }
        if self.time_of_day {
            out.push((ts.hour() * 60 + ts.minute()) / interval_minutes);
        }
        out
    }

    /// Codes min-max scaled to `[0, 1]` by their fixed code ranges.
    pub fn scaled(&self, ts: NaiveDateTime, interval_minutes: u32) -> Vec<f64> {
        let slots = (1440 / interval_minutes).max(2);
        let mut maxima = Vec::with_capacity(3);
        if self.day_of_week {
            maxima.push(6.0);
        }
        if self.week_of_month {
            maxima.push(4.0);
        }
        if self.time_of_day {
            maxima.push((slots - 1) as f64);
        }
        self.codes(ts, interval_minutes)
            .into_iter()
            .zip(maxima)
            .map(|(c, m)| c as f64 / m)
            .collect()
    }
}

/// One normalized forecasting window in the original (node) domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub start: usize,
    /// `N × c`.
    pub context: Array2<f64>,
    /// `N × f`.
    pub future: Array2<f64>,
    /// `(c + f) × F` integer codes.
    pub time_features: Array2<u32>,
}

/// Sliding windows over `range` of the normalized series.
pub fn make_windows(
    ds: &StgDataset,
    stats: &Normalization,
    range: &Range<usize>,
    context: usize,
    horizon: usize,
    stride: usize,
    features: &TimeFeatureConfig,
) -> Vec<SeriesWindow> {
    window_starts(range, context, horizon, stride)
        .into_iter()
        .map(|start| {
            let norm = ds
                .values
                .slice(s![.., start..start + context + horizon])
                .mapv(|v| stats.normalize(v));
            let f = features.count();
            let mut codes = Array2::<u32>::zeros((context + horizon, f));
            for t in 0..context + horizon {
                let row = features.codes(ds.timestamp(start + t), ds.interval_minutes);
                for (j, c) in row.into_iter().enumerate() {
                    codes[[t, j]] = c;
                }
            }
            SeriesWindow {
                start,
                context: norm.slice(s![.., ..context]).to_owned(),
                future: norm.slice(s![.., context..]).to_owned(),
                time_features: codes,
            }
        })
        .collect()
}

/// A window after the graph Fourier transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWindow {
    pub context: Array2<f64>,
    pub future: Array2<f64>,
}

/// Transforms both halves of a normalized window.
pub fn to_spectral(basis: &FourierBasis, window: &SeriesWindow) -> Result<SpectralWindow> {
    Ok(SpectralWindow {
        context: fourier_transform(basis, &window.context)?,
        future: fourier_transform(basis, &window.future)?,
    })
}

/// The whole normalized series transformed once, plus scaled time features.
/// Windows are column ranges of it; because the transform treats every column
/// independently, a slice equals the transform of the window bit for bit.
#[derive(Debug, Clone)]
pub struct SpectralSeries {
    /// `N × T` spectral values of the normalized series.
    pub spectral: Array2<f64>,
    /// `T × F` scaled time features.
    pub features: Array2<f64>,
    /// `Uᵀ1` when features are projected, for [`crate::nn::encoder_input`].
    pub feature_scale: Option<Vec<f64>>,
    pub stats: Normalization,
}

impl SpectralSeries {
    pub fn new(
        ds: &StgDataset,
        basis: &FourierBasis,
        stats: Normalization,
        features: &TimeFeatureConfig,
    ) -> Result<Self> {
        let norm = ds.values.mapv(|v| stats.normalize(v));
        let spectral = fourier_transform(basis, &norm)?;
        let f = features.count();
        let mut table = Array2::<f64>::zeros((ds.len(), f));
        for t in 0..ds.len() {
            for (j, v) in features
                .scaled(ds.timestamp(t), ds.interval_minutes)
                .into_iter()
                .enumerate()
            {
                table[[t, j]] = v;
            }
        }
        Ok(SpectralSeries {
            spectral,
            features: table,
            feature_scale: features.spectral.then(|| basis.transformed_ones().to_vec()),
            stats,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.spectral.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Spectral window starting at `start` (cached form of [`to_spectral`]).
    pub fn window(&self, start: usize, context: usize, horizon: usize) -> SpectralWindow {
        SpectralWindow {
            context: self
                .spectral
                .slice(s![.., start..start + context])
                .to_owned(),
            future: self
                .spectral
                .slice(s![.., start + context..start + context + horizon])
                .to_owned(),
        }
    }

    /// Encoder input rows (`N × (1 + F)`) for signal `column` at time `t`.
    pub fn encoder_input(&self, signal: &[f64], t: usize) -> Vec<f64> {
        let feats = self.features.row(t).to_vec();
        crate::nn::encoder_input(signal, &feats, self.feature_scale.as_deref())
    }
}

/// Fixed calendar origin of synthetic datasets.
pub fn synth_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2018, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// Time steps per synthetic day (5-minute interval).
pub const SYNTH_DAY: usize = 288;

/// Desk-scale stand-in for a traffic dataset.
///
/// A ring with random chords forms the graph. Each tick the latent state
/// follows an AR(2) recursion whose prediction is mixed once with the
/// neighbor average; observations add a shared daily sinusoid and noise
/// around a positive level.
pub fn synth_dataset(num_nodes: usize, len: usize, seed: u64) -> Result<StgDataset> {
    if num_nodes < 2 || len < 200 {
        return Err(Error::Config(format!(
            "synthetic data needs N >= 2 and T >= 200, got N={num_nodes}, T={len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_nodes;
    let mut distances = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        if i < j || n > 2 {
            distances.push((i.min(j), i.max(j), rng.gen_range(1.0..3.0)));
        }
    }
    distances.dedup_by_key(|e| (e.0, e.1));
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 2)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !(i == 0 && j == n - 1))
        .collect();
    candidates.shuffle(&mut rng);
    for &(i, j) in candidates.iter().take(n / 2) {
        distances.push((i, j, rng.gen_range(2.0..5.0)));
    }
    distances.sort_by_key(|e| (e.0, e.1));
    let edges: Vec<_> = distances.iter().map(|&(i, j, _)| (i, j, 1.0)).collect();
    let graph = build_graph(&edges, n, true, None)?;

    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| graph.adjacency[[i, j]] > 0.0).collect())
        .collect();
    let level: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..120.0)).collect();
    let amplitude: Vec<f64> = (0..n).map(|_| rng.gen_range(15.0..30.0)).collect();
    let (phi1, phi2) = (0.6, 0.25);
    let (state_scale, obs_noise) = (8.0, 2.0);

    let burn_in = 50;
    let mut prev2 = vec![0.0; n];
    let mut prev1 = vec![0.0; n];
    let mut values = Array2::<f64>::zeros((n, len));
    for t in 0..burn_in + len {
        let pred: Vec<f64> = (0..n).map(|i| phi1 * prev1[i] + phi2 * prev2[i]).collect();
        let mut next = vec![0.0; n];
        for i in 0..n {
            let nb = &neighbors[i];
            let avg = nb.iter().map(|&j| pred[j]).sum::<f64>() / nb.len().max(1) as f64;
            let shock: f64 = rng.sample(StandardNormal);
            next[i] = 0.5 * pred[i] + 0.5 * avg + shock;
        }
        prev2 = std::mem::replace(&mut prev1, next);
        if t >= burn_in {
            let tt = t - burn_in;
            let phase = 2.0 * std::f64::consts::PI * tt as f64 / SYNTH_DAY as f64;
            for i in 0..n {
                let noise: f64 = rng.sample(StandardNormal);
                values[[i, tt]] = level[i]
                    + amplitude[i] * phase.sin()
                    + state_scale * prev1[i]
                    + obs_noise * noise;
            }
        }
    }
    Ok(StgDataset {
        values,
        interval_minutes: 5,
        start: synth_start(),
        graph,
        distances,
    })
}
