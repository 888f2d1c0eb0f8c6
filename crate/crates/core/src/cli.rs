//! Command-line front end. Each command is a plain function as well, so
//! tests drive runs in-process.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{bench_csv, bench_specconv, BenchConfig};
use crate::data::{
    load_dataset, split_and_normalize, synth_dataset, synth_start, window_starts, write_values_csv,
    SpectralSeries, Split, StgDataset,
};
use crate::diffusion::{init_model, train, window_seed, Sampler, TrainerConfig, TrainingLog};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::graph::{fourier_basis, write_distance_csv, AdjacencyMode, FourierBasis};
use crate::metrics::{
    evaluate, gaussian_persistence_samples, persistence, persistence_width, quantile_sorted,
    EvalReport,
};
use crate::nn::{ModelConfig, SpecStgNet};
use crate::params::{Checkpoint, ParamStore};

/// Names the output directory when neither `--out` nor the config sets one.
pub const OUT_DIR_ENV: &str = "SPECSTG_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "specstg-out";

pub const SAMPLE_MAGIC: &[u8; 8] = b"SSTGSMP1";
pub const SAMPLE_VERSION: u32 = 1;

pub const SWEEP_BETAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
pub const SWEEP_STEPS: [usize; 3] = [50, 100, 200];

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const BASELINE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            len: 2000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `N × T` values CSV. Without it a synthetic dataset is generated.
    pub values: Option<PathBuf>,
    /// `from,to,cost` distance list; required together with `values`.
    pub distances: Option<PathBuf>,
    pub adjacency: AdjacencyMode,
    pub interval_minutes: u32,
    /// Timestamp of the first column, `YYYY-MM-DDTHH:MM:SS`.
    pub start: String,
    pub split: [f64; 3],
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            values: None,
            distances: None,
            adjacency: AdjacencyMode::Binary,
            interval_minutes: 5,
            start: synth_start().format(TIME_FORMAT).to_string(),
            split: [0.6, 0.2, 0.2],
            synthetic: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Spacing of test windows; 1 uses every available window.
    pub stride: usize,
    pub max_windows: Option<usize>,
    /// Also score the persistence and Gaussian-persistence baselines.
    pub baselines: bool,
    /// Write every sample to `samples.bin`.
    pub dump_samples: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            max_windows: None,
            baselines: true,
            dump_samples: false,
        }
    }
}

/// Complete description of a run. Missing keys take the defaults above;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub forecast: ForecastConfig,
    pub output_dir: Option<PathBuf>,
    /// Record wall-clock seconds in the training log. Turn off for
    /// byte-identical reruns.
    pub log_timing: bool,
    /// SHA-256 of the dataset. When set, loading different data fails.
    pub data_sha256: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            trainer: TrainerConfig::default(),
            forecast: ForecastConfig::default(),
            output_dir: None,
            log_timing: true,
            data_sha256: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.forecast.stride == 0 {
            return Err(Error::Config("forecast.stride must be positive".into()));
        }
        if self.data.values.is_some() != self.data.distances.is_some() {
            return Err(Error::Config(
                "data.values and data.distances must be given together".into(),
            ));
        }
        self.start_time()?;
        Ok(())
    }

    fn start_time(&self) -> Result<NaiveDateTime> {
        NaiveDateTime::parse_from_str(&self.data.start, TIME_FORMAT)
            .map_err(|e| Error::Config(format!("data.start {:?}: {e}", self.data.start)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Model hyperparameters stored next to the trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub model: ModelConfig,
    pub params: Checkpoint,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: ModelCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        ParamStore::from_checkpoint(&ck.params)?;
        Ok(ck)
    }
}

/// Dataset, basis, split and spectral series of a run.
pub struct Prepared {
    pub ds: StgDataset,
    pub basis: FourierBasis,
    pub split: Split,
    pub series: SpectralSeries,
    pub data_sha256: String,
}

/// Hash of everything that defines the dataset: values, distances,
/// interval and start time.
pub fn dataset_hash(ds: &StgDataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.values.nrows() as u64).to_le_bytes());
    h.update((ds.values.ncols() as u64).to_le_bytes());
    for v in ds.values.iter() {
        h.update(v.to_le_bytes());
    }
    for &(i, j, c) in &ds.distances {
        h.update((i as u64).to_le_bytes());
        h.update((j as u64).to_le_bytes());
        h.update(c.to_le_bytes());
    }
    h.update(ds.interval_minutes.to_le_bytes());
    h.update(ds.start.format(TIME_FORMAT).to_string().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let start = cfg.start_time()?;
    let ds = match (&cfg.data.values, &cfg.data.distances) {
        (Some(v), Some(d)) => {
            load_dataset(v, d, cfg.data.interval_minutes, start, cfg.data.adjacency)?
        }
        _ => {
            let sc = &cfg.data.synthetic;
            let mut ds = synth_dataset(sc.nodes, sc.len, sc.seed)?;
            ds.start = start;
            ds.interval_minutes = cfg.data.interval_minutes;
            ds
        }
    };
    let hash = dataset_hash(&ds);
    if let Some(expected) = &cfg.data_sha256 {
        if *expected != hash {
            return Err(Error::Input(format!(
                "dataset hash {hash} differs from the recorded {expected}"
            )));
        }
    }
    let basis = fourier_basis(&ds.graph)?;
    let t = &cfg.trainer;
    let split = split_and_normalize(&ds, cfg.data.split, t.context, t.horizon)?;
    let series = SpectralSeries::new(&ds, &basis, split.stats, &t.time_features)?;
    Ok(Prepared {
        ds,
        basis,
        split,
        series,
        data_sha256: hash,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains, then writes `checkpoint.json`, `train_log.csv` and the
/// resolved config `resolved_config.json` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainingLog> {
    let prep = prepare(cfg)?;
    create_dir(out)?;
    let (net, init) = init_model(&cfg.trainer, &prep.basis)?;
    let outcome = train(&net, init, &prep.series, &prep.split, &cfg.trainer)?;
    let ck = ModelCheckpoint {
        model: net.cfg.clone(),
        params: outcome.params.to_checkpoint(),
    };
    ck.save(&out.join("checkpoint.json"))?;
    write_file(
        &out.join("train_log.csv"),
        &outcome.log.to_csv(cfg.log_timing),
    )?;
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(out.to_path_buf());
    resolved.data_sha256 = Some(prep.data_sha256);
    write_file(&out.join("resolved_config.json"), &resolved.to_json()?)?;
    Ok(outcome.log)
}

/// One forecast window with its ground truth.
#[derive(Debug, Clone)]
pub struct WindowForecast {
    pub id: usize,
    pub start: usize,
    /// `S × N × f`, original units.
    pub samples: Array3<f64>,
    /// `N × f` point forecast.
    pub mean: Array2<f64>,
    pub truth: Array2<f64>,
}

pub fn test_window_starts(cfg: &RunConfig, split: &Split) -> Vec<usize> {
    let t = &cfg.trainer;
    let mut starts = window_starts(&split.test, t.context, t.horizon, cfg.forecast.stride);
    if let Some(m) = cfg.forecast.max_windows {
        starts.truncate(m);
    }
    starts
}

/// Rebuilds the network of a checkpoint for the prepared graph.
pub fn load_model(
    ck: &ModelCheckpoint,
    cfg: &RunConfig,
    prep: &Prepared,
) -> Result<(SpecStgNet, ParamStore)> {
    let n = prep.ds.num_nodes();
    if ck.model.num_nodes != n {
        return Err(Error::NodeMismatch {
            checkpoint: ck.model.num_nodes,
            graph: n,
        });
    }
    let expected = cfg.trainer.model_config(n);
    if expected != ck.model {
        return Err(Error::Config(format!(
            "checkpoint model {:?} does not match the configured model {:?}",
            ck.model, expected
        )));
    }
    // parameter values are overwritten below; the rng only fills shapes
    let (net, mut store) = SpecStgNet::new(
        ck.model.clone(),
        &prep.basis,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    store.load_values(&ParamStore::from_checkpoint(&ck.params)?)?;
    Ok((net, store))
}

pub fn forecast_windows(
    net: &SpecStgNet,
    params: &ParamStore,
    cfg: &RunConfig,
    prep: &Prepared,
) -> Result<Vec<WindowForecast>> {
    let t = &cfg.trainer;
    let mut sampler = Sampler::new(net, params, t.schedule()?)?;
    test_window_starts(cfg, &prep.split)
        .into_iter()
        .enumerate()
        .map(|(w, st)| {
            let r = sampler.forecast(
                &prep.basis,
                &prep.series,
                st,
                t.context,
                t.horizon,
                t.samples,
                window_seed(t.seed, w),
            )?;
            let truth = prep
                .ds
                .values
                .slice(s![.., st + t.context..st + t.context + t.horizon])
                .to_owned();
            Ok(WindowForecast {
                id: w,
                start: st,
                samples: r.samples,
                mean: r.predictions,
                truth,
            })
        })
        .collect()
}

pub const QUANTILE_BANDS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub fn forecast_csv(windows: &[WindowForecast]) -> String {
    let mut out = String::from("window_id,node,t,mean,q05,q25,q50,q75,q95\n");
    for w in windows {
        let (s, n, f) = w.samples.dim();
        let mut col = vec![0.0; s];
        for i in 0..n {
            for t in 0..f {
                for (k, v) in col.iter_mut().enumerate() {
                    *v = w.samples[[k, i, t]];
                }
                col.sort_by(f64::total_cmp);
                out.push_str(&format!("{},{},{},{}", w.id, i, t + 1, w.mean[[i, t]]));
                for q in QUANTILE_BANDS {
                    out.push_str(&format!(",{}", quantile_sorted(&col, q)));
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn truth_csv(windows: &[WindowForecast]) -> String {
    let mut out = String::from("window_id,start,node,t,value\n");
    for w in windows {
        for ((i, t), v) in w.truth.indexed_iter() {
            out.push_str(&format!("{},{},{},{},{}\n", w.id, w.start, i, t + 1, v));
        }
    }
    out
}

/// Reads `truth.csv` back into per-window `N × f` arrays.
pub fn read_truth_csv(path: &Path) -> Result<Vec<Array2<f64>>> {
    #[derive(Deserialize)]
    struct Row {
        window_id: usize,
        #[allow(dead_code)]
        start: usize,
        node: usize,
        t: usize,
        value: f64,
    }
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let rows: Vec<Row> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let windows = rows.iter().map(|r| r.window_id).max().unwrap_or(0) + 1;
    let n = rows.iter().map(|r| r.node).max().unwrap_or(0) + 1;
    let f = rows.iter().map(|r| r.t).max().unwrap_or(0);
    if rows.len() != windows * n * f || rows.iter().any(|r| r.t == 0) {
        return Err(Error::format(
            path,
            format!("expected {windows}×{n}×{f} rows, got {}", rows.len()),
        ));
    }
    let mut out = vec![Array2::<f64>::from_elem((n, f), f64::NAN); windows];
    for r in rows {
        out[r.window_id][[r.node, r.t - 1]] = r.value;
    }
    if out.iter().any(|a| a.iter().any(|v| v.is_nan())) {
        return Err(Error::format(
            path,
            "duplicate or missing (window, node, t) cells",
        ));
    }
    Ok(out)
}

/// Binary sample dump: magic `SSTGSMP1`, `u32` version, `u32` rank (4),
/// four `u64` dimensions (windows, samples, nodes, horizon), then the
/// values as little-endian `f64` in row-major order.
pub fn write_samples(path: &Path, windows: &[Array3<f64>]) -> Result<()> {
    let dims = windows.first().map_or((0, 0, 0), |a| a.dim());
    if windows.iter().any(|a| a.dim() != dims) {
        return Err(Error::Shape("sample arrays differ in shape".into()));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(SAMPLE_MAGIC).map_err(io)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&4u32.to_le_bytes()).map_err(io)?;
    for d in [windows.len(), dims.0, dims.1, dims.2] {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    for a in windows {
        for v in a.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_samples(path: &Path) -> Result<Vec<Array3<f64>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 48 || &bytes[..8] != SAMPLE_MAGIC {
        return Err(bad("not a sample dump"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(8) != SAMPLE_VERSION || u32_at(12) != 4 {
        return Err(bad("unsupported sample dump version or rank"));
    }
    let dim = |k: usize| {
        u64::from_le_bytes(bytes[16 + 8 * k..24 + 8 * k].try_into().expect("8 bytes")) as usize
    };
    let (w, s, n, f) = (dim(0), dim(1), dim(2), dim(3));
    let per = s * n * f;
    if bytes.len() != 48 + 8 * w * per {
        return Err(bad("length does not match the header"));
    }
    let values: Vec<f64> = bytes[48..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    values
        .chunks(per.max(1))
        .take(w)
        .map(|c| {
            Array3::from_shape_vec((s, n, f), c.to_vec()).map_err(|e| Error::Shape(e.to_string()))
        })
        .collect()
}

/// Scores of one forecast run.
#[derive(Debug, Clone)]
pub struct ForecastSummary {
    pub windows: usize,
    pub model: EvalReport,
    pub persistence: Option<EvalReport>,
    pub gaussian: Option<EvalReport>,
}

fn baseline_reports(
    cfg: &RunConfig,
    prep: &Prepared,
    windows: &[WindowForecast],
) -> Result<(EvalReport, EvalReport)> {
    let t = &cfg.trainer;
    let train_starts = window_starts(&prep.split.train, t.context, t.horizon, 1);
    let width = persistence_width(&prep.ds.values, &train_starts, t.context, t.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(BASELINE_STREAM);
    let truths: Vec<Array2<f64>> = windows.iter().map(|w| w.truth.clone()).collect();
    let (mut point, mut gauss) = (Vec::new(), Vec::new());
    for w in windows {
        let ctx = prep
            .ds
            .values
            .slice(s![.., w.start..w.start + t.context])
            .to_owned();
        let p = persistence(&ctx, t.horizon);
        // two identical members keep the CRPS estimator defined
        point.push(Array3::from_shape_fn(
            (2, p.nrows(), p.ncols()),
            |(_, i, j)| p[[i, j]],
        ));
        gauss.push(gaussian_persistence_samples(
            &ctx,
            t.horizon,
            width,
            t.samples.max(2),
            &mut rng,
        ));
    }
    Ok((evaluate(&point, &truths)?, evaluate(&gauss, &truths)?))
}

fn write_report(out: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_file(&out.join(format!("{stem}.csv")), &report.to_csv())?;
    write_file(&out.join(format!("{stem}.txt")), &report.to_table())
}

/// Forecasts every test window with the checkpoint and writes
/// `forecast.csv`, `truth.csv`, `report.{csv,txt}`, `windows.csv`, the
/// baseline reports and optionally `samples.bin`.
pub fn cmd_forecast(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<ForecastSummary> {
    let prep = prepare(cfg)?;
    let ck = ModelCheckpoint::load(checkpoint)?;
    let (net, params) = load_model(&ck, cfg, &prep)?;
    create_dir(out)?;
    let windows = forecast_windows(&net, &params, cfg, &prep)?;
    write_file(&out.join("forecast.csv"), &forecast_csv(&windows))?;
    write_file(&out.join("truth.csv"), &truth_csv(&windows))?;
    let samples: Vec<Array3<f64>> = windows.iter().map(|w| w.samples.clone()).collect();
    let truths: Vec<Array2<f64>> = windows.iter().map(|w| w.truth.clone()).collect();
    if cfg.forecast.dump_samples {
        write_samples(&out.join("samples.bin"), &samples)?;
    }
    let model = evaluate(&samples, &truths)?;
    write_report(out, "report", &model)?;
    write_file(&out.join("windows.csv"), &model.windows_csv())?;
    let (persistence, gaussian) = if cfg.forecast.baselines {
        let (p, g) = baseline_reports(cfg, &prep, &windows)?;
        write_report(out, "report_persistence", &p)?;
        write_report(out, "report_gaussian", &g)?;
        (Some(p), Some(g))
    } else {
        (None, None)
    };
    Ok(ForecastSummary {
        windows: windows.len(),
        model,
        persistence,
        gaussian,
    })
}

/// Scores a sample dump against a truth file.
pub fn cmd_eval(samples: &Path, truth: &Path, out: &Path) -> Result<EvalReport> {
    let s = read_samples(samples)?;
    let t = read_truth_csv(truth)?;
    let report = evaluate(&s, &t)?;
    create_dir(out)?;
    write_report(out, "eval_report", &report)?;
    write_file(&out.join("eval_windows.csv"), &report.windows_csv())?;
    Ok(report)
}

pub fn cmd_gradcheck(seed: u64, out: &Path) -> Result<GradcheckReport> {
    let report = run_gradcheck(seed, None)?;
    create_dir(out)?;
    write_file(&out.join("gradcheck.txt"), &report.to_text())?;
    Ok(report)
}

pub fn cmd_synth(sc: &SynthConfig, out: &Path) -> Result<StgDataset> {
    let ds = synth_dataset(sc.nodes, sc.len, sc.seed)?;
    create_dir(out)?;
    write_values_csv(&out.join("values.csv"), &ds.values)?;
    write_distance_csv(&out.join("distances.csv"), &ds.distances)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub beta_end: f64,
    pub num_steps: usize,
    pub rmse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
    pub best_val_loss: Option<f64>,
}

/// `(max − min) / mean` of each metric across the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpread {
    pub rmse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
}

fn relative_spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (max - min) / mean
}

pub fn sweep_spread(cells: &[SweepCell]) -> SweepSpread {
    let col = |f: fn(&SweepCell) -> f64| cells.iter().map(f).collect::<Vec<_>>();
    let crps: Option<Vec<f64>> = cells.iter().map(|c| c.crps).collect();
    SweepSpread {
        rmse: relative_spread(&col(|c| c.rmse)),
        mae: relative_spread(&col(|c| c.mae)),
        crps: crps.map(|v| relative_spread(&v)),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("beta_end,num_steps,rmse,mae,crps,best_val_loss\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.beta_end,
            c.num_steps,
            c.rmse,
            c.mae,
            fmt_opt(c.crps),
            fmt_opt(c.best_val_loss)
        ));
    }
    out
}

/// One metric as a `β_K × K` matrix, rows in the order of `betas`.
pub fn sweep_heatmap(
    cells: &[SweepCell],
    betas: &[f64],
    steps: &[usize],
    metric: fn(&SweepCell) -> Option<f64>,
) -> String {
    let mut out = String::from("beta_end");
    for k in steps {
        out.push_str(&format!(",K={k}"));
    }
    out.push('\n');
    for &b in betas {
        out.push_str(&b.to_string());
        for &k in steps {
            let v = cells
                .iter()
                .find(|c| c.beta_end == b && c.num_steps == k)
                .and_then(metric);
            out.push_str(&format!(",{}", fmt_opt(v)));
        }
        out.push('\n');
    }
    out
}

/// Trains and evaluates one model per `(β_K, K)` cell. Writes `sweep.csv`,
/// one heatmap CSV per metric and `sweep_spread.csv`.
pub fn cmd_sweep(
    cfg: &RunConfig,
    betas: &[f64],
    steps: &[usize],
    out: &Path,
) -> Result<(Vec<SweepCell>, SweepSpread)> {
    if betas.is_empty() || steps.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let prep = prepare(cfg)?;
    create_dir(out)?;
    let mut cells = Vec::with_capacity(betas.len() * steps.len());
    for &beta_end in betas {
        for &num_steps in steps {
            let mut cell_cfg = cfg.clone();
            cell_cfg.trainer.beta_end = beta_end;
            cell_cfg.trainer.num_steps = num_steps;
            cell_cfg.validate()?;
            let (net, init) = init_model(&cell_cfg.trainer, &prep.basis)?;
            let outcome = train(&net, init, &prep.series, &prep.split, &cell_cfg.trainer)?;
            let windows = forecast_windows(&net, &outcome.params, &cell_cfg, &prep)?;
            let samples: Vec<Array3<f64>> = windows.iter().map(|w| w.samples.clone()).collect();
            let truths: Vec<Array2<f64>> = windows.iter().map(|w| w.truth.clone()).collect();
            let report = evaluate(&samples, &truths)?;
            cells.push(SweepCell {
                beta_end,
                num_steps,
                rmse: report.rmse_avg,
                mae: report.mae_avg,
                crps: report.crps_avg,
                best_val_loss: outcome.log.best_val_loss(),
            });
        }
    }
    let spread = sweep_spread(&cells);
    write_file(&out.join("sweep.csv"), &sweep_csv(&cells))?;
    write_file(
        &out.join("sweep_rmse.csv"),
        &sweep_heatmap(&cells, betas, steps, |c| Some(c.rmse)),
    )?;
    write_file(
        &out.join("sweep_mae.csv"),
        &sweep_heatmap(&cells, betas, steps, |c| Some(c.mae)),
    )?;
    write_file(
        &out.join("sweep_crps.csv"),
        &sweep_heatmap(&cells, betas, steps, |c| c.crps),
    )?;
    write_file(
        &out.join("sweep_spread.csv"),
        &format!(
            "metric,relative_spread\nrmse,{}\nmae,{}\ncrps,{}\n",
            spread.rmse,
            spread.mae,
            fmt_opt(spread.crps)
        ),
    )?;
    Ok((cells, spread))
}

#[derive(Debug, Parser)]
#[command(
    name = "specstg",
    version,
    about = "Spectral diffusion forecasting for graph time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by the commands that run the model. Flags override the
/// JSON config.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Falls back to the config, then $SPECSTG_OUT_DIR, then ./specstg-out.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Values CSV (nodes × time, no header).
    #[arg(long, requires = "distances")]
    pub values: Option<PathBuf>,
    /// Distance list CSV with header from,to,cost.
    #[arg(long, requires = "values")]
    pub distances: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per forecast window.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Test window stride.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub max_windows: Option<usize>,
    /// Write 0 in the seconds column of the training log.
    #[arg(long)]
    pub no_timing: bool,
}

impl RunArgs {
    /// Loads the config file (or defaults) and applies the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.trainer.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let (Some(v), Some(d)) = (&self.values, &self.distances) {
            cfg.data.values = Some(v.clone());
            cfg.data.distances = Some(d.clone());
        }
        if let Some(e) = self.epochs {
            cfg.trainer.epochs = e;
        }
        if let Some(s) = self.samples {
            cfg.trainer.samples = s;
        }
        if let Some(s) = self.stride {
            cfg.forecast.stride = s;
        }
        if self.max_windows.is_some() {
            cfg.forecast.max_windows = self.max_windows;
        }
        if self.no_timing {
            cfg.log_timing = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (values.csv, distances.csv).
    Synth {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, log and resolved config.
    Train(RunArgs),
    /// Forecast the test windows with a trained checkpoint.
    Forecast {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dump_samples: bool,
    },
    /// Score a sample dump against a truth file.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer type.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the spectral convolution against the dense oracle.
    BenchSpecconv {
        #[arg(long, value_delimiter = ',', default_values_t = vec![250, 500, 1000, 2000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        calls: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        cheb_order: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a (beta_end, num_steps) grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
}

fn out_dir(flag: Option<&PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn print_summary(s: &ForecastSummary) {
    println!("{} windows\nmodel\n{}", s.windows, s.model.to_table());
    if let (Some(p), Some(g)) = (&s.persistence, &s.gaussian) {
        println!(
            "persistence\n{}\ngaussian persistence\n{}",
            p.to_table(),
            g.to_table()
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            nodes,
            len,
            seed,
            out,
        } => {
            let out = out_dir(out.as_ref(), None);
            let ds = cmd_synth(&SynthConfig { nodes, len, seed }, &out)?;
            println!(
                "wrote {} nodes × {} steps to {}",
                ds.num_nodes(),
                ds.len(),
                out.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = out_dir(None, Some(&cfg));
            let log = cmd_train(&cfg, &out)?;
            match (log.best_epoch, log.best_val_loss()) {
                (Some(e), Some(v)) => println!(
                    "best epoch {e}: validation loss {v:.6} (initial {:.6})",
                    log.initial_val_loss
                ),
                _ => println!(
                    "no epochs run; initial validation loss {:.6}",
                    log.initial_val_loss
                ),
            }
            println!("outputs in {}", out.display());
        }
        Command::Forecast {
            run,
            checkpoint,
            dump_samples,
        } => {
            let mut cfg = run.resolve()?;
            cfg.forecast.dump_samples |= dump_samples;
            let out = out_dir(None, Some(&cfg));
            let ck = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
            let summary = cmd_forecast(&cfg, &ck, &out)?;
            print_summary(&summary);
        }
        Command::Eval {
            samples,
            truth,
            out,
        } => {
            let out = out_dir(out.as_ref(), None);
            let report = cmd_eval(&samples, &truth, &out)?;
            println!("{}", report.to_table());
        }
        Command::Gradcheck { seed, out } => {
            let out = out_dir(out.as_ref(), None);
            let report = cmd_gradcheck(seed, &out)?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(Error::CheckFailed(format!(
                    "relative error above {}",
                    report.tolerance
                )));
            }
        }
        Command::BenchSpecconv {
            sizes,
            calls,
            repeats,
            cheb_order,
            channels,
            seed,
            out,
        } => {
            let out = out_dir(out.as_ref(), None);
            let rows = bench_specconv(
                &sizes,
                &BenchConfig {
                    cheb_order,
                    channels,
                    calls,
                    repeats,
                    seed,
                },
            )?;
            let csv = bench_csv(&rows);
            create_dir(&out)?;
            write_file(&out.join("bench_specconv.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Sweep { run, betas, steps } => {
            let cfg = run.resolve()?;
            let out = out_dir(None, Some(&cfg));
            let betas = betas.unwrap_or_else(|| SWEEP_BETAS.to_vec());
            let steps = steps.unwrap_or_else(|| SWEEP_STEPS.to_vec());
            let (cells, spread) = cmd_sweep(&cfg, &betas, &steps, &out)?;
            print!("{}", sweep_csv(&cells));
            println!(
                "relative spread: rmse {:.4}, mae {:.4}, crps {}",
                spread.rmse,
                spread.mae,
                spread.crps.map_or("NA".into(), |v| format!("{v:.4}"))
            );
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
