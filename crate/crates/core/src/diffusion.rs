//! Noise schedule, forward corruption, the noise-regression objective, the
//! trainer and the autoregressive reverse-chain sampler.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{window_starts, SpectralSeries, Split, TimeFeatureConfig};
use crate::error::{Error, Result};
use crate::graph::{fourier_reconstruct, FourierBasis};
use crate::nn::{ModelConfig, SpecStgNet, WaveKernel};
use crate::params::{Adam, ParamStore};
use crate::tensor::{Tape, Var};

/// Standard deviation of the backward kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_k = √β_k`.
    #[default]
    Beta,
    /// `σ_k² = β_k (1 − α̃_{k−1}) / (1 − α̃_k)`.
    Posterior,
}

/// Quadratic DDPM schedule. Index `k − 1` holds step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_k = (√β_1 + (k−1)/(K−1)·(√β_K − √β_1))²`.
    pub fn quadratic(steps: usize, beta_1: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "need at least 2 diffusion steps, got {steps}"
            )));
        }
        if !(0.0 < beta_1 && beta_1 < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise levels must satisfy 0 < beta_1 < beta_end < 1, got {beta_1} and {beta_end}"
            )));
        }
        let (a, b) = (beta_1.sqrt(), beta_end.sqrt());
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let r = a + i as f64 / (steps - 1) as f64 * (b - a);
                r * r
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &bk in &beta {
            acc *= 1.0 - bk;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            beta,
            alpha_bar,
            sigma,
        })
    }

    pub fn with_sigma(mut self, mode: SigmaMode) -> Self {
        self.sigma = match mode {
            SigmaMode::Beta => self.beta.iter().map(|b| b.sqrt()).collect(),
            SigmaMode::Posterior => (0..self.beta.len())
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { self.alpha_bar[i - 1] };
                    (self.beta[i] * (1.0 - prev) / (1.0 - self.alpha_bar[i])).sqrt()
                })
                .collect(),
        };
        self
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.beta.len() {
            return Err(Error::Usage(format!(
                "diffusion step {k} outside 1..={}",
                self.beta.len()
            )));
        }
        Ok(k - 1)
    }
}

/// `x̃ᵏ = √α̃_k x̃⁰ + √(1−α̃_k) ε`.
pub fn forward_corrupt(
    sched: &NoiseSchedule,
    x0: &[f64],
    k: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let i = sched.check_step(k)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "x0 has {} values, noise {}",
            x0.len(),
            eps.len()
        )));
    }
    let (a, b) = (sched.alpha_bar[i].sqrt(), (1.0 - sched.alpha_bar[i]).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse update given the predicted noise. `e` is ignored at `k = 1`.
pub fn sample_step(
    sched: &NoiseSchedule,
    xk: &[f64],
    k: usize,
    eps_hat: &[f64],
    e: &[f64],
) -> Result<Vec<f64>> {
    let i = sched.check_step(k)?;
    if eps_hat.len() != xk.len() || (k > 1 && e.len() != xk.len()) {
        return Err(Error::Shape("sample_step inputs differ in length".into()));
    }
    let beta = sched.beta[i];
    let coef = beta / (1.0 - sched.alpha_bar[i]).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sigma = if k == 1 { 0.0 } else { sched.sigma[i] };
    Ok(xk
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(j, (x, eh))| {
            let noise = if k == 1 { 0.0 } else { sigma * e[j] };
            (x - coef * eh) * inv + noise
        })
        .collect())
}

/// Every hyperparameter of a training and forecasting run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub num_steps: usize,
    pub beta_1: f64,
    pub beta_end: f64,
    pub sigma: SigmaMode,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Fraction of all optimizer steps spent warming up from `lr_min` to `lr_max`.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_size: usize,
    pub residual_blocks: usize,
    pub residual_channels: usize,
    pub cheb_order: usize,
    pub context: usize,
    pub horizon: usize,
    pub samples: usize,
    /// Also score the context time points, not only the horizon.
    pub loss_from_context: bool,
    pub time_features: TimeFeatureConfig,
    pub train_stride: usize,
    pub val_stride: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            num_steps: 50,
            beta_1: 1e-4,
            beta_end: 0.3,
            sigma: SigmaMode::Beta,
            lr_min: 5e-4,
            lr_max: 1e-2,
            warmup_fraction: 0.1,
            epochs: 100,
            batch_size: 64,
            hidden_size: 64,
            residual_blocks: 8,
            residual_channels: 8,
            cheb_order: 3,
            context: 12,
            horizon: 12,
            samples: 100,
            loss_from_context: false,
            time_features: TimeFeatureConfig::default(),
            train_stride: 1,
            val_stride: 1,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_steps", self.num_steps),
            ("batch_size", self.batch_size),
            ("hidden_size", self.hidden_size),
            ("residual_blocks", self.residual_blocks),
            ("residual_channels", self.residual_channels),
            ("cheb_order", self.cheb_order),
            ("context", self.context),
            ("horizon", self.horizon),
            ("samples", self.samples),
            ("train_stride", self.train_stride),
            ("val_stride", self.val_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(
            NoiseSchedule::quadratic(self.num_steps, self.beta_1, self.beta_end)?
                .with_sigma(self.sigma),
        )
    }

    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            num_nodes,
            input_features: 1 + self.time_features.count(),
            hidden_size: self.hidden_size,
            cheb_order: self.cheb_order,
            residual_blocks: self.residual_blocks,
            residual_channels: self.residual_channels,
            num_steps: self.num_steps,
        }
    }

    /// Linear warm-up from `lr_min` to `lr_max`, then constant.
    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        let warm = (self.warmup_fraction * total_steps as f64).ceil() as usize;
        if warm == 0 || step >= warm {
            return self.lr_max;
        }
        self.lr_min + (self.lr_max - self.lr_min) * step as f64 / warm as f64
    }
}

/// Noise draws for one batch: one `(k, ε)` per time point per window.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    /// Step per group; group `g` covers rows `g·N .. (g+1)·N`.
    pub steps: Vec<usize>,
    pub eps: Vec<f64>,
    pub noisy: Vec<f64>,
}

/// Draws `k ~ U{1..K}` and `ε ~ N(0, I)` for each group of `n` clean values.
pub fn draw_noise<R: Rng>(
    sched: &NoiseSchedule,
    clean: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<NoiseDraw> {
    if n == 0 || !clean.len().is_multiple_of(n) {
        return Err(Error::Shape(format!(
            "{} values do not split into groups of {n}",
            clean.len()
        )));
    }
    let groups = clean.len() / n;
    let mut steps = Vec::with_capacity(groups);
    let mut eps = Vec::with_capacity(clean.len());
    let mut noisy = Vec::with_capacity(clean.len());
    for g in 0..groups {
        let k = rng.gen_range(1..=sched.num_steps());
        let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        noisy.extend(forward_corrupt(sched, &clean[g * n..(g + 1) * n], k, &e)?);
        eps.extend(e);
        steps.push(k);
    }
    Ok(NoiseDraw { steps, eps, noisy })
}

/// `‖ε − ε̂‖²` summed over the `n` rows of each group, averaged over groups.
pub fn noise_loss(tape: &mut Tape, pred: Var, eps: Var, n: usize) -> Result<Var> {
    let mse = tape.mse_loss(pred, eps)?;
    tape.scale(mse, n as f64)
}

/// First and one-past-last window offsets scored by the loss.
fn loss_span(cfg: &TrainerConfig) -> (usize, usize) {
    let end = cfg.context + cfg.horizon;
    (
        if cfg.loss_from_context {
            0
        } else {
            cfg.context
        },
        end,
    )
}

/// Teacher-forced encoder states for a batch of windows.
///
/// Returns `states[τ]` = hidden state that conditions window offset `τ`
/// (zeros for `τ = 0`, otherwise the state after consuming offset `τ − 1`).
fn teacher_forced_states(
    net: &SpecStgNet,
    tape: &mut Tape,
    bound: &crate::params::Bound,
    series: &SpectralSeries,
    starts: &[usize],
    last: usize,
) -> Result<Vec<Var>> {
    let n = series.num_nodes();
    let rows = starts.len() * n;
    let h0 = tape.constant(
        vec![rows, net.cfg.hidden_size],
        vec![0.0; rows * net.cfg.hidden_size],
    )?;
    let mut states = vec![h0];
    let f_in = net.cfg.input_features;
    let mut h = h0;
    for tau in 0..last {
        let mut input = Vec::with_capacity(rows * f_in);
        for &s in starts {
            let col = series.spectral.column(s + tau).to_vec();
            input.extend(series.encoder_input(&col, s + tau));
        }
        let x = tape.constant(vec![rows, f_in], input)?;
        h = net.gru.step(tape, bound, &net.cheb, x, h)?.h;
        states.push(h);
    }
    Ok(states)
}

/// Noise-regression loss of a batch of windows starting at `starts`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<R: Rng>(
    net: &SpecStgNet,
    tape: &mut Tape,
    bound: &crate::params::Bound,
    sched: &NoiseSchedule,
    series: &SpectralSeries,
    cfg: &TrainerConfig,
    starts: &[usize],
    rng: &mut R,
) -> Result<Var> {
    if starts.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let n = series.num_nodes();
    let (first, end) = loss_span(cfg);
    let states = teacher_forced_states(net, tape, bound, series, starts, end - 1)?;

    let mut clean = Vec::with_capacity((end - first) * starts.len() * n);
    for tau in first..end {
        for &s in starts {
            clean.extend(series.spectral.column(s + tau).iter());
        }
    }
    let draw = draw_noise(sched, &clean, n, rng)?;
    let rows = clean.len();

    let h = tape.concat(&states[first..end], 0)?;
    let cond = net.wave.condition(tape, bound, &net.cheb_cond, h)?;
    let step_rows = net.wave.step_terms(tape, bound, &draw.steps)?;
    let index: Arc<[usize]> = (0..rows).map(|r| r / n).collect();
    let steps = step_rows
        .into_iter()
        .map(|s| tape.gather_rows(s, index.clone()))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(vec![rows, 1], draw.noisy)?;
    let eps = tape.constant(vec![rows, 1], draw.eps)?;
    let pred = net.wave.denoise(tape, bound, x, &cond, &steps)?;
    noise_loss(tape, pred, eps, n)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Validation loss of the initialized parameters.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e - 1].val_loss)
    }

    /// CSV with header `epoch,train_loss,val_loss,seconds`. With
    /// `with_timing = false` the seconds column is written as 0 so that
    /// seeded reruns produce identical files.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            let secs = if with_timing { e.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, secs
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: TrainingLog,
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const SAMPLE_STREAM_BASE: u64 = 1 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a network and initial parameters from the config seed.
pub fn init_model(cfg: &TrainerConfig, basis: &FourierBasis) -> Result<(SpecStgNet, ParamStore)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    SpecStgNet::new(cfg.model_config(basis.num_nodes()), basis, &mut rng)
}

/// Mean loss over windows at `starts`, with a fixed noise stream.
pub fn validation_loss(
    net: &SpecStgNet,
    store: &ParamStore,
    sched: &NoiseSchedule,
    series: &SpectralSeries,
    cfg: &TrainerConfig,
    starts: &[usize],
) -> Result<f64> {
    let mut rng = stream_rng(cfg.seed, VAL_STREAM);
    let mut total = 0.0;
    for batch in starts.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape)?;
        let loss = training_loss(net, &mut tape, &bound, sched, series, cfg, batch, &mut rng)?;
        total += tape.item(loss) * batch.len() as f64;
    }
    Ok(total / starts.len().max(1) as f64)
}

/// Adam training with model selection on validation loss.
pub fn train(
    net: &SpecStgNet,
    init: ParamStore,
    series: &SpectralSeries,
    split: &Split,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let span = cfg.context + cfg.horizon;
    let mut train_starts = window_starts(&split.train, cfg.context, cfg.horizon, cfg.train_stride);
    let val_starts = window_starts(&split.val, cfg.context, cfg.horizon, cfg.val_stride);
    if train_starts.is_empty() || val_starts.is_empty() {
        return Err(Error::Config(format!(
            "train and validation splits need at least {span} time points"
        )));
    }

    let mut store = init;
    let initial_val_loss = validation_loss(net, &store, &sched, series, cfg, &val_starts)?;
    let mut log = TrainingLog {
        initial_val_loss,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
    };
    let mut best = store.clone();
    let mut best_loss = f64::INFINITY;

    let batches_per_epoch = train_starts.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut adam = Adam::default();
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        train_starts.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_starts.chunks(cfg.batch_size) {
            let lr = cfg.learning_rate(step, total_steps);
            let diverged = |loss: f64| Error::Divergence {
                step,
                lr,
                beta_1: cfg.beta_1,
                beta_end: cfg.beta_end,
                loss,
            };
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape)?;
            let loss = training_loss(net, &mut tape, &bound, &sched, series, cfg, batch, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(_) => diverged(f64::NAN),
                    other => other,
                })?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(diverged(value));
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::Numeric(_) => diverged(value),
                other => other,
            })?;
            store.accumulate(&bound, &grads);
            adam.step(&mut store, lr)?;
            epoch_loss += value * batch.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / train_starts.len() as f64;
        let val_loss = validation_loss(net, &store, &sched, series, cfg, &val_starts)?;
        if val_loss < best_loss {
            best_loss = val_loss;
            best = store.clone();
            log.best_epoch = Some(epoch);
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }
    best.clear_grad();
    Ok(TrainOutcome { params: best, log })
}

/// Probabilistic forecast of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    /// `S × N × f`, original units.
    pub samples: Array3<f64>,
    /// `N × f`, normalized spectral sample means.
    pub spectral_means: Array2<f64>,
    /// `N × f`, original units: the reconstructed, de-normalized means.
    pub predictions: Array2<f64>,
}

/// Reusable inference state: frozen parameters and the step-term table.
pub struct Sampler<'a> {
    net: &'a SpecStgNet,
    sched: NoiseSchedule,
    tape: Tape,
    bound: crate::params::Bound,
    /// `step_table[m]` is `K × 2·D_r`; row `k − 1` is block `m`'s term for step `k`.
    step_table: Vec<Array2<f64>>,
    kernel: WaveKernel,
}

impl<'a> Sampler<'a> {
    pub fn new(net: &'a SpecStgNet, store: &ParamStore, sched: NoiseSchedule) -> Result<Self> {
        if sched.num_steps() != net.cfg.num_steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the model embeds {}",
                sched.num_steps(),
                net.cfg.num_steps
            )));
        }
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape)?;
        let mark = tape.len();
        let ks: Vec<usize> = (1..=sched.num_steps()).collect();
        let terms = net.wave.step_terms(&mut tape, &bound, &ks)?;
        let step_table = terms
            .into_iter()
            .map(|v| tape.to_array2(v))
            .collect::<Result<Vec<_>>>()?;
        tape.truncate(mark);
        Ok(Sampler {
            net,
            sched,
            tape,
            bound,
            step_table,
            kernel: WaveKernel::new(&net.wave, store),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Advances the encoder by one time point (`input`: `N × F` row-major).
    pub fn encode_step(&mut self, input: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let n = self.net.cfg.num_nodes;
        let mark = self.tape.len();
        let x = self
            .tape
            .constant(vec![n, self.net.cfg.input_features], input.to_vec())?;
        let hv = self
            .tape
            .constant(vec![n, self.net.cfg.hidden_size], h.to_vec())?;
        let out = self
            .net
            .gru
            .step(&mut self.tape, &self.bound, &self.net.cheb, x, hv)?;
        let value = self.tape.value(out.h).to_vec();
        self.tape.truncate(mark);
        Ok(value)
    }

    /// Per-block condition terms for hidden state `h` (`N × D_h`).
    pub fn condition(&mut self, h: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.net.cfg.num_nodes;
        let mark = self.tape.len();
        let hv = self
            .tape
            .constant(vec![n, self.net.cfg.hidden_size], h.to_vec())?;
        let cond = self
            .net
            .wave
            .condition(&mut self.tape, &self.bound, &self.net.cheb_cond, hv)?;
        let out = cond.iter().map(|&c| self.tape.value(c).to_vec()).collect();
        self.tape.truncate(mark);
        Ok(out)
    }

    /// `ε_θ` for stacked chains `x` (`S·N` values) at step `k`.
    pub fn predict_noise(&mut self, x: &[f64], k: usize, cond: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.sched.check_step(k)?;
        let steps: Vec<Vec<f64>> = self
            .step_table
            .iter()
            .map(|t| t.row(k - 1).to_vec())
            .collect();
        self.kernel.denoise(x, self.net.cfg.num_nodes, cond, &steps)
    }

    /// Runs `S` reverse chains for one time point. `rngs[s]` drives chain `s`.
    pub fn sample_chains(
        &mut self,
        cond: &[Vec<f64>],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<f64>> {
        let n = self.net.cfg.num_nodes;
        let mut x = Vec::with_capacity(rngs.len() * n);
        for rng in rngs.iter_mut() {
            x.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        let mut e = vec![0.0; x.len()];
        for k in (1..=self.sched.num_steps()).rev() {
            let eps_hat = self.predict_noise(&x, k, cond)?;
            if k > 1 {
                for (s, rng) in rngs.iter_mut().enumerate() {
                    for v in &mut e[s * n..(s + 1) * n] {
                        *v = rng.sample(StandardNormal);
                    }
                }
            }
            x = sample_step(&self.sched, &x, k, &eps_hat, &e)?;
        }
        Ok(x)
    }

    /// Autoregressive forecast of the window starting at `start`.
    #[allow(clippy::too_many_arguments)]
    pub fn forecast(
        &mut self,
        basis: &FourierBasis,
        series: &SpectralSeries,
        start: usize,
        context: usize,
        horizon: usize,
        samples: usize,
        seed: u64,
    ) -> Result<ForecastResult> {
        if samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if context == 0 {
            return Err(Error::Usage("empty context".into()));
        }
        let n = self.net.cfg.num_nodes;
        if series.num_nodes() != n || basis.num_nodes() != n {
            return Err(Error::NodeMismatch {
                checkpoint: n,
                graph: series.num_nodes(),
            });
        }
        if start + context + horizon > series.spectral.ncols() {
            return Err(Error::Usage(format!(
                "window at {start} runs past the end of the series"
            )));
        }
        let mut h = vec![0.0; n * self.net.cfg.hidden_size];
        for t in start..start + context {
            let col = series.spectral.column(t).to_vec();
            h = self.encode_step(&series.encoder_input(&col, t), &h)?;
        }

        let mut rngs: Vec<ChaCha8Rng> = (0..samples)
            .map(|s| stream_rng(seed, SAMPLE_STREAM_BASE + s as u64))
            .collect();
        let mut spectral_samples = Array3::<f64>::zeros((samples, n, horizon));
        let mut spectral_means = Array2::<f64>::zeros((n, horizon));
        for step in 0..horizon {
            let cond = self.condition(&h)?;
            let x = self.sample_chains(&cond, &mut rngs)?;
            let mut mean = vec![0.0; n];
            for s in 0..samples {
                for i in 0..n {
                    let v = x[s * n + i];
                    spectral_samples[[s, i, step]] = v;
                    mean[i] += v;
                }
            }
            for (i, m) in mean.iter_mut().enumerate() {
                *m /= samples as f64;
                spectral_means[[i, step]] = *m;
            }
            if step + 1 < horizon {
                let t = start + context + step;
                h = self.encode_step(&series.encoder_input(&mean, t), &h)?;
            }
        }

        let stats = series.stats;
        let predictions =
            fourier_reconstruct(basis, &spectral_means)?.mapv(|z| stats.denormalize(z));
        let mut out = Array3::<f64>::zeros((samples, n, horizon));
        for s in 0..samples {
            let spec = spectral_samples.index_axis(ndarray::Axis(0), s).to_owned();
            let rec = fourier_reconstruct(basis, &spec)?;
            out.index_axis_mut(ndarray::Axis(0), s)
                .assign(&rec.mapv(|z| stats.denormalize(z)));
        }
        Ok(ForecastResult {
            samples: out,
            spectral_means,
            predictions,
        })
    }
}

/// Seed of window `window_id` derived from the run seed.
pub fn window_seed(seed: u64, window_id: usize) -> u64 {
    seed ^ (window_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
