//! RMSE, MAE and quantile-based CRPS, per window and aggregated, plus the
//! persistence baselines used as comparators.
//!
//! Node reduction: every per-time value averages over nodes first. A window's
//! RMSE is `√(mean_t mean_n e²)`, its MAE `mean_t mean_n |e|`. Dataset
//! averages are means of the per-window values.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `0.05, 0.10, …, 0.95`.
pub fn quantile_levels() -> [f64; 19] {
    std::array::from_fn(|i| (i + 1) as f64 * 0.05)
}

/// 1-based horizons reported as point metrics (15/30/60 minutes at 5-minute steps).
pub const POINT_HORIZONS: [usize; 3] = [3, 6, 12];

/// Empirical quantile of sorted data with linear interpolation between
/// order statistics (position `q·(S−1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted(samples: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = samples.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn check_same(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} differ",
            pred.dim(),
            truth.dim()
        )));
    }
    Ok(())
}

/// Per-time RMSE `√(mean_n e²)` for `N × f` inputs.
pub fn rmse_per_t(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>> {
    check_same(pred, truth)?;
    Ok((pred - truth)
        .axis_iter(Axis(1))
        .map(|c| c.mapv(|e| e * e).mean().unwrap_or(0.0).sqrt())
        .collect())
}

/// Window RMSE `√((1/f) Σ_t mean_n e²)`.
pub fn rmse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let per_t = rmse_per_t(pred, truth)?;
    Ok((per_t.iter().map(|r| r * r).sum::<f64>() / per_t.len() as f64).sqrt())
}

/// Per-time MAE `mean_n |e|`.
pub fn mae_per_t(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>> {
    check_same(pred, truth)?;
    Ok((pred - truth)
        .axis_iter(Axis(1))
        .map(|c| c.mapv(f64::abs).mean().unwrap_or(0.0))
        .collect())
}

/// Window MAE `(1/f) Σ_t mean_n |e|`.
pub fn mae(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let per_t = mae_per_t(pred, truth)?;
    Ok(per_t.iter().sum::<f64>() / per_t.len() as f64)
}

fn crps_of_sorted(sorted: &[f64], x: f64) -> f64 {
    let levels = quantile_levels();
    let total: f64 = levels
        .iter()
        .map(|&k| {
            let q = quantile_sorted(sorted, k);
            let ind = if x < q { 1.0 } else { 0.0 };
            (k - ind) * (x - q)
        })
        .sum();
    2.0 * total / levels.len() as f64
}

/// Quantile-loss approximation of CRPS on the 19-level grid.
pub fn crps_empirical(samples: &[f64], x: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Usage(format!(
            "CRPS needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    Ok(crps_of_sorted(&sorted(samples.iter().copied()), x))
}

/// `Σ_n CRPS_n / Σ_n |x_n|` for `S × N` samples; `None` when the truth is all zero.
pub fn crps_normalized(samples: &Array2<f64>, truth: ArrayView1<f64>) -> Result<Option<f64>> {
    if samples.ncols() != truth.len() {
        return Err(Error::Shape(format!(
            "{} sample columns for {} truth values",
            samples.ncols(),
            truth.len()
        )));
    }
    let mut num = 0.0;
    for (col, &x) in samples.axis_iter(Axis(1)).zip(truth.iter()) {
        num += crps_empirical(&col.to_vec(), x)?;
    }
    let den: f64 = truth.iter().map(|x| x.abs()).sum();
    Ok((den > 0.0).then(|| num / den))
}

/// `Σ_{t,n} CRPS / Σ_{t,n} |x|` for `S × N × f` samples.
pub fn crps_avg(samples: &Array3<f64>, truth: &Array2<f64>) -> Result<Option<f64>> {
    let (s, n, f) = samples.dim();
    if (n, f) != truth.dim() {
        return Err(Error::Shape(format!(
            "samples {:?} do not match truth {:?}",
            (s, n, f),
            truth.dim()
        )));
    }
    let (num, den) = crps_sums(samples, truth)?
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok((den > 0.0).then(|| num / den))
}

/// Per-time `(Σ_n CRPS, Σ_n |x|)`.
fn crps_sums(samples: &Array3<f64>, truth: &Array2<f64>) -> Result<Vec<(f64, f64)>> {
    let (s, n, f) = samples.dim();
    if s < 2 {
        return Err(Error::Usage(format!(
            "CRPS needs at least 2 samples, got {s}"
        )));
    }
    Ok((0..f)
        .map(|t| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let col = sorted((0..s).map(|k| samples[[k, i, t]]));
                let x = truth[[i, t]];
                num += crps_of_sorted(&col, x);
                den += x.abs();
            }
            (num, den)
        })
        .collect())
}

/// Metrics of one forecast window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
    pub rmse_t: Vec<f64>,
    pub mae_t: Vec<f64>,
    pub crps_t: Vec<Option<f64>>,
}

pub fn window_metrics(samples: &Array3<f64>, truth: &Array2<f64>) -> Result<WindowMetrics> {
    let pred = samples
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Usage("no samples".into()))?;
    let rmse_t = rmse_per_t(&pred, truth)?;
    let mae_t = mae_per_t(&pred, truth)?;
    // a single sample has no spread to score; its CRPS cells stay undefined
    let sums = if samples.dim().0 >= 2 {
        crps_sums(samples, truth)?
    } else {
        vec![(0.0, 0.0); rmse_t.len()]
    };
    let crps_t = sums
        .iter()
        .map(|&(a, b)| (b > 0.0).then(|| a / b))
        .collect();
    let (num, den) = sums
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let f = rmse_t.len() as f64;
    Ok(WindowMetrics {
        rmse: (rmse_t.iter().map(|r| r * r).sum::<f64>() / f).sqrt(),
        mae: mae_t.iter().sum::<f64>() / f,
        crps: (den > 0.0).then(|| num / den),
        rmse_t,
        mae_t,
        crps_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// 1-based step from the forecast start.
    pub horizon: usize,
    pub rmse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
}

/// Averages over all windows, with point values at [`POINT_HORIZONS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_avg: f64,
    pub mae_avg: f64,
    pub crps_avg: Option<f64>,
    pub points: Vec<PointMetrics>,
    /// Window/time cells without a CRPS (truth sums to zero, or a single
    /// sample), left out of CRPS means.
    pub undefined_crps: usize,
    pub windows: Vec<WindowMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut count, mut missing) = (0.0, 0, 0);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                count += 1;
            }
            None => missing += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

/// Aggregates per-window metrics; `samples[w]` is `S × N × f`, `truths[w]` is `N × f`.
pub fn evaluate(samples: &[Array3<f64>], truths: &[Array2<f64>]) -> Result<EvalReport> {
    if samples.len() != truths.len() || samples.is_empty() {
        return Err(Error::Misaligned(format!(
            "{} forecast windows against {} truth windows",
            samples.len(),
            truths.len()
        )));
    }
    let mut windows = Vec::with_capacity(samples.len());
    for (w, (s, t)) in samples.iter().zip(truths).enumerate() {
        let (_, n, f) = s.dim();
        if (n, f) != t.dim() {
            return Err(Error::Misaligned(format!(
                "window {w}: forecast is {n}x{f}, truth is {:?}",
                t.dim()
            )));
        }
        windows.push(window_metrics(s, t)?);
    }
    let nw = windows.len() as f64;
    let f = windows[0].rmse_t.len();
    if windows.iter().any(|w| w.rmse_t.len() != f) {
        return Err(Error::Misaligned("windows have different horizons".into()));
    }
    let (crps_avg, _) = mean_defined(windows.iter().map(|w| w.crps));
    let mut undefined = 0;
    for t in 0..f {
        undefined += windows.iter().filter(|w| w.crps_t[t].is_none()).count();
    }
    let points = POINT_HORIZONS
        .iter()
        .filter(|&&h| h <= f)
        .map(|&h| PointMetrics {
            horizon: h,
            rmse: windows.iter().map(|w| w.rmse_t[h - 1]).sum::<f64>() / nw,
            mae: windows.iter().map(|w| w.mae_t[h - 1]).sum::<f64>() / nw,
            crps: mean_defined(windows.iter().map(|w| w.crps_t[h - 1])).0,
        })
        .collect();
    Ok(EvalReport {
        rmse_avg: windows.iter().map(|w| w.rmse).sum::<f64>() / nw,
        mae_avg: windows.iter().map(|w| w.mae).sum::<f64>() / nw,
        crps_avg,
        points,
        undefined_crps: undefined,
        windows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    /// One row per metric: `metric,avg,h3,h6,h12`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,avg");
        for p in &self.points {
            out.push_str(&format!(",h{}", p.horizon));
        }
        out.push('\n');
        out.push_str(&format!("rmse,{}", self.rmse_avg));
        for p in &self.points {
            out.push_str(&format!(",{}", p.rmse));
        }
        out.push_str(&format!("\nmae,{}", self.mae_avg));
        for p in &self.points {
            out.push_str(&format!(",{}", p.mae));
        }
        out.push_str(&format!("\ncrps,{}", fmt_opt(self.crps_avg)));
        for p in &self.points {
            out.push_str(&format!(",{}", fmt_opt(p.crps)));
        }
        out.push('\n');
        out
    }

    /// Per-window table: `window,rmse,mae,crps`.
    pub fn windows_csv(&self) -> String {
        let mut out = String::from("window,rmse,mae,crps\n");
        for (i, w) in self.windows.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", w.rmse, w.mae, fmt_opt(w.crps)));
        }
        out
    }

    /// Text table laid out like the usual forecasting results table.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        let mut head = format!("{:<8}{:>12}", "metric", "avg");
        for p in &self.points {
            head.push_str(&format!("{:>12}", format!("{} min", p.horizon * 5)));
        }
        let mut lines = vec![head];
        let mut row = |name: &str, avg: String, vals: Vec<String>| {
            let mut l = format!("{name:<8}{avg:>12}");
            for v in vals {
                l.push_str(&format!("{v:>12}"));
            }
            lines.push(l);
        };
        row(
            "RMSE",
            format!("{:.4}", self.rmse_avg),
            self.points
                .iter()
                .map(|p| format!("{:.4}", p.rmse))
                .collect(),
        );
        row(
            "MAE",
            format!("{:.4}", self.mae_avg),
            self.points
                .iter()
                .map(|p| format!("{:.4}", p.mae))
                .collect(),
        );
        row(
            "CRPS",
            opt(self.crps_avg),
            self.points.iter().map(|p| opt(p.crps)).collect(),
        );
        let mut text = lines.join("\n");
        text.push_str(&format!("\nwindows: {}\n", self.windows.len()));
        if self.undefined_crps > 0 {
            text.push_str(&format!(
                "undefined CRPS cells (zero truth): {}\n",
                self.undefined_crps
            ));
        }
        text
    }
}

/// Repeats the last context column over the horizon.
pub fn persistence(context: &Array2<f64>, horizon: usize) -> Array2<f64> {
    let last = context.column(context.ncols() - 1).to_owned();
    Array2::from_shape_fn((context.nrows(), horizon), |(i, _)| last[i])
}

/// Root-mean-square persistence error over the windows at `starts`: the
/// width of the Gaussian baseline, fitted on training data.
pub fn persistence_width(
    values: &Array2<f64>,
    starts: &[usize],
    context: usize,
    horizon: usize,
) -> f64 {
    let (mut acc, mut count) = (0.0, 0usize);
    for &st in starts {
        for i in 0..values.nrows() {
            let last = values[[i, st + context - 1]];
            for t in 0..horizon {
                let e = values[[i, st + context + t]] - last;
                acc += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (acc / count as f64).sqrt()
    }
}

/// `S` draws from `N(last value, width²)` for each node and step.
pub fn gaussian_persistence_samples<R: Rng>(
    context: &Array2<f64>,
    horizon: usize,
    width: f64,
    samples: usize,
    rng: &mut R,
) -> Array3<f64> {
    let center = persistence(context, horizon);
    let mut out = Array3::<f64>::zeros((samples, context.nrows(), horizon));
    for s in 0..samples {
        for i in 0..context.nrows() {
            for t in 0..horizon {
                let z: f64 = rng.sample(StandardNormal);
                out[[s, i, t]] = center[[i, t]] + width * z;
            }
        }
    }
    out
}
