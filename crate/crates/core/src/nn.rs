//! SpecConv, the spectral GRU encoder and the spectral WaveNet denoiser.
//!
//! All layers work on spectral inputs laid out as `rows × channels` matrices
//! where row `r` belongs to graph node `r % N`. A batch of `B` windows is
//! simply `B·N` stacked rows, which lets the diagonal Chebyshev operators act
//! on every batch element at once.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{fourier_reconstruct, fourier_transform, FourierBasis};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Width of the sinusoidal diffusion-step embedding.
pub const STEP_EMBED_DIM: usize = 64;
/// Polynomial count of the SpecConv in every denoiser condition path.
pub const COND_CHEB_ORDER: usize = 2;
/// Largest supported filter length (maximum polynomial degree 2).
pub const MAX_CHEB_ORDER: usize = 3;

/// `T_j(λ̃_i)` for `j < order`, one row per polynomial.
pub fn chebyshev_diag(scaled_eigvals: &[f64], order: usize) -> Array2<f64> {
    let n = scaled_eigvals.len();
    let mut t = Array2::<f64>::zeros((order, n));
    for (i, &l) in scaled_eigvals.iter().enumerate() {
        for j in 0..order {
            t[[j, i]] = match j {
                0 => 1.0,
                1 => l,
                _ => 2.0 * l * t[[j - 1, i]] - t[[j - 2, i]],
            };
        }
    }
    t
}

/// Chebyshev spectral filter: one `C_in × C_out` coefficient matrix per
/// polynomial order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecConvFilter {
    coeffs: Vec<Array2<f64>>,
}

impl SpecConvFilter {
    pub fn new(coeffs: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = coeffs.first() else {
            return Err(Error::Shape(
                "SpecConv filter needs at least one order".into(),
            ));
        };
        if coeffs.iter().any(|c| c.dim() != first.dim()) {
            return Err(Error::Shape("SpecConv coefficients differ in shape".into()));
        }
        Ok(SpecConvFilter { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn in_channels(&self) -> usize {
        self.coeffs[0].nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.coeffs[0].ncols()
    }

    pub fn coeffs(&self) -> &[Array2<f64>] {
        &self.coeffs
    }

    /// Coefficients stacked as a `(J·C_in) × C_out` matrix.
    pub fn stacked(&self) -> Array2<f64> {
        let views: Vec<_> = self.coeffs.iter().map(|c| c.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal shapes")
    }
}

fn check_conv_input(filter: &SpecConvFilter, basis: &FourierBasis, x: &Array2<f64>) -> Result<()> {
    if x.nrows() != basis.num_nodes() || x.ncols() != filter.in_channels() {
        return Err(Error::Shape(format!(
            "SpecConv input {:?} does not match {} nodes x {} channels",
            x.dim(),
            basis.num_nodes(),
            filter.in_channels()
        )));
    }
    Ok(())
}

/// `Σ_j T_j(Λ̃) X̃ φ_j` on an `N × C` spectral input.
///
/// `T_j(Λ̃)` is diagonal, so the cost is `O(N·J·C·C_out)`.
pub fn spec_conv(
    filter: &SpecConvFilter,
    basis: &FourierBasis,
    xt: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_conv_input(filter, basis, xt)?;
    let cheb = chebyshev_diag(
        basis.scaled_eigvals.as_slice().expect("contiguous"),
        filter.order(),
    );
    let mut out = Array2::<f64>::zeros((xt.nrows(), filter.out_channels()));
    let mut scaled = xt.clone();
    for (j, phi) in filter.coeffs.iter().enumerate() {
        for (mut row, (&w, src)) in scaled
            .rows_mut()
            .into_iter()
            .zip(cheb.row(j).iter().zip(xt.rows()))
        {
            row.zip_mut_with(&src, |d, &v| *d = w * v);
        }
        ndarray::linalg::general_mat_mul(1.0, &scaled, phi, 1.0, &mut out);
    }
    Ok(out)
}

/// Classic Chebyshev graph convolution `U Σ_j T_j(Λ̃) Uᵀ X φ_j` on an
/// original-domain signal. Quadratic in `N`; the reference for [`spec_conv`].
pub fn cheb_conv_dense(
    filter: &SpecConvFilter,
    basis: &FourierBasis,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_conv_input(filter, basis, x)?;
    let u = &basis.eigvecs;
    let xt = u.t().dot(x);
    let cheb = chebyshev_diag(
        basis.scaled_eigvals.as_slice().expect("contiguous"),
        filter.order(),
    );
    let mut filtered = Array2::<f64>::zeros((x.nrows(), filter.out_channels()));
    for (j, phi) in filter.coeffs.iter().enumerate() {
        let mut scaled = xt.clone();
        for (mut row, &w) in scaled.rows_mut().into_iter().zip(cheb.row(j)) {
            row.mapv_inplace(|v| w * v);
        }
        filtered = filtered + scaled.dot(phi);
    }
    Ok(u.dot(&filtered))
}

/// Chebyshev diagonals shared with the tape ops.
#[derive(Debug, Clone)]
pub struct ChebTable {
    rows: Vec<Arc<[f64]>>,
}

impl ChebTable {
    pub fn new(basis: &FourierBasis, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("Chebyshev order must be >= 1".into()));
        }
        let t = chebyshev_diag(basis.scaled_eigvals.as_slice().expect("contiguous"), order);
        Ok(ChebTable {
            rows: t
                .rows()
                .into_iter()
                .map(|r| Arc::from(r.to_vec()))
                .collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.rows.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.rows[0].len()
    }

    /// `[T_0 X | T_1 X | …]`, the input of a stacked-coefficient SpecConv.
    pub fn expand(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut parts = vec![x];
        for row in &self.rows[1..] {
            parts.push(tape.scale_rows(x, row.clone())?);
        }
        if parts.len() == 1 {
            return Ok(x);
        }
        tape.concat(&parts, 1)
    }
}

/// SpecConv on the tape with a stacked `(J·C_in) × C_out` weight.
pub fn spec_conv_var(tape: &mut Tape, cheb: &ChebTable, x: Var, weight: Var) -> Result<Var> {
    let e = cheb.expand(tape, x)?;
    tape.matmul(e, weight)
}

/// Hyperparameters that fix the parameter shapes of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_nodes: usize,
    /// Encoder input columns: the signal plus any time features.
    pub input_features: usize,
    pub hidden_size: usize,
    /// Number of Chebyshev polynomials `J` in the encoder SpecConvs.
    pub cheb_order: usize,
    pub residual_blocks: usize,
    pub residual_channels: usize,
    pub num_steps: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_nodes", self.num_nodes),
            ("input_features", self.input_features),
            ("hidden_size", self.hidden_size),
            ("cheb_order", self.cheb_order),
            ("residual_blocks", self.residual_blocks),
            ("residual_channels", self.residual_channels),
            ("num_steps", self.num_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.cheb_order > MAX_CHEB_ORDER {
            return Err(Error::Config(format!(
                "cheb_order {} exceeds the maximum of {MAX_CHEB_ORDER}",
                self.cheb_order
            )));
        }
        Ok(())
    }
}

/// Spectral GRU weights. Each `W` holds one block per Chebyshev order, so
/// `SpecConv(x) W` becomes a single product with the expanded input.
#[derive(Debug, Clone)]
pub struct SgGru {
    pub w_z1: ParamId,
    pub w_r1: ParamId,
    pub w_zeta1: ParamId,
    pub w_z2: ParamId,
    pub w_r2: ParamId,
    pub w_zeta2: ParamId,
    pub hidden: usize,
}

/// Output of one encoder step, with the gates kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct GruStep {
    pub h: Var,
    pub z: Var,
    pub r: Var,
    pub zeta: Var,
}

impl SgGru {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (j, f, d) = (cfg.cheb_order, cfg.input_features, cfg.hidden_size);
        let in_std = 1.0 / ((j * f) as f64).sqrt();
        let h_std = 1.0 / ((j * d) as f64).sqrt();
        Ok(SgGru {
            w_z1: store.insert_normal("gru.w_z1", &[j * f, d], in_std, rng)?,
            w_r1: store.insert_normal("gru.w_r1", &[j * f, d], in_std, rng)?,
            w_zeta1: store.insert_normal("gru.w_zeta1", &[j * f, d], in_std, rng)?,
            w_z2: store.insert_normal("gru.w_z2", &[j * d, d], h_std, rng)?,
            w_r2: store.insert_normal("gru.w_r2", &[j * d, d], h_std, rng)?,
            w_zeta2: store.insert_normal("gru.w_zeta2", &[j * d, d], h_std, rng)?,
            hidden: d,
        })
    }

    /// One recurrence step; every gate reads the previous state only.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cheb: &ChebTable,
        input: Var,
        h_prev: Var,
    ) -> Result<GruStep> {
        let d = self.hidden;
        let rows = tape.shape(input)[0];
        if tape.shape(h_prev) != [rows, d] {
            return Err(Error::Shape(format!(
                "hidden state {:?} does not match [{rows}, {d}]",
                tape.shape(h_prev)
            )));
        }
        let x_exp = cheb.expand(tape, input)?;
        let w_x = tape.concat(
            &[
                bound.get(self.w_z1),
                bound.get(self.w_r1),
                bound.get(self.w_zeta1),
            ],
            1,
        )?;
        let from_x = tape.matmul(x_exp, w_x)?;

        let h_exp = cheb.expand(tape, h_prev)?;
        let w_h = tape.concat(&[bound.get(self.w_z2), bound.get(self.w_r2)], 1)?;
        let from_h = tape.matmul(h_exp, w_h)?;

        let x_zr = tape.slice(from_x, 1, 0, 2 * d)?;
        let zr_pre = tape.add(x_zr, from_h)?;
        let zr = tape.sigmoid(zr_pre)?;
        let z = tape.slice(zr, 1, 0, d)?;
        let r = tape.slice(zr, 1, d, 2 * d)?;

        let rh = tape.mul(r, h_prev)?;
        let rh_conv = spec_conv_var(tape, cheb, rh, bound.get(self.w_zeta2))?;
        let x_zeta = tape.slice(from_x, 1, 2 * d, 3 * d)?;
        let zeta_pre = tape.add(x_zeta, rh_conv)?;
        let zeta = tape.tanh(zeta_pre)?;

        // z ⊙ h + (1 − z) ⊙ ζ  ==  ζ + z ⊙ (h − ζ)
        let diff = tape.sub(h_prev, zeta)?;
        let gated = tape.mul(z, diff)?;
        let h = tape.add(zeta, gated)?;
        Ok(GruStep { h, z, r, zeta })
    }

    /// Runs the recurrence over `inputs` from `h0`, returning every state.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cheb: &ChebTable,
        inputs: &[Var],
        h0: Var,
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::Usage("encoder needs at least one input step".into()));
        }
        let mut states = Vec::with_capacity(inputs.len());
        let mut h = h0;
        for &x in inputs {
            h = self.step(tape, bound, cheb, x, h)?.h;
            states.push(h);
        }
        Ok(states)
    }
}

#[derive(Debug, Clone)]
pub struct WaveBlock {
    pub dil_w: ParamId,
    pub dil_b: ParamId,
    pub cond_w: ParamId,
    pub step_w: ParamId,
    pub step_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Residual WaveNet over single spectral time points.
#[derive(Debug, Clone)]
pub struct SgWave {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub emb_w: ParamId,
    pub emb_b: ParamId,
    pub blocks: Vec<WaveBlock>,
    pub skip_w: ParamId,
    pub skip_b: ParamId,
    pub final_w: ParamId,
    pub final_b: ParamId,
    pub channels: usize,
    pub num_steps: usize,
}

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(k: usize) -> [f64; STEP_EMBED_DIM] {
    let half = STEP_EMBED_DIM / 2;
    let mut out = [0.0; STEP_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

impl SgWave {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.residual_channels;
        let e = STEP_EMBED_DIM;
        let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
        let in_w = store.insert_normal("wave.in_w", &[1, c], 1.0, rng)?;
        let in_b = store.insert_zeros("wave.in_b", &[1, c])?;
        let emb_w = store.insert_normal("wave.emb_w", &[e, e], inv(e), rng)?;
        let emb_b = store.insert_zeros("wave.emb_b", &[1, e])?;
        let mut blocks = Vec::with_capacity(cfg.residual_blocks);
        for m in 0..cfg.residual_blocks {
            let p = format!("wave.block{m}");
            blocks.push(WaveBlock {
                dil_w: store.insert_normal(&format!("{p}.dil_w"), &[c, 2 * c], inv(c), rng)?,
                dil_b: store.insert_zeros(&format!("{p}.dil_b"), &[1, 2 * c])?,
                cond_w: store.insert_normal(
                    &format!("{p}.cond_w"),
                    &[COND_CHEB_ORDER * cfg.hidden_size, 2 * c],
                    inv(COND_CHEB_ORDER * cfg.hidden_size),
                    rng,
                )?,
                step_w: store.insert_normal(&format!("{p}.step_w"), &[e, 2 * c], inv(e), rng)?,
                step_b: store.insert_zeros(&format!("{p}.step_b"), &[1, 2 * c])?,
                out_w: store.insert_normal(&format!("{p}.out_w"), &[c, 2 * c], inv(c), rng)?,
                out_b: store.insert_zeros(&format!("{p}.out_b"), &[1, 2 * c])?,
            });
        }
        Ok(SgWave {
            in_w,
            in_b,
            emb_w,
            emb_b,
            blocks,
            skip_w: store.insert_normal("wave.skip_w", &[c, c], inv(c), rng)?,
            skip_b: store.insert_zeros("wave.skip_b", &[1, c])?,
            final_w: store.insert_zeros("wave.final_w", &[c, 1])?,
            final_b: store.insert_zeros("wave.final_b", &[1, 1])?,
            channels: c,
            num_steps: cfg.num_steps,
        })
    }

    /// Per-block condition terms `SpecConv(h̃)` with `2·D_r` outputs.
    pub fn condition(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cheb_cond: &ChebTable,
        h: Var,
    ) -> Result<Vec<Var>> {
        let h_exp = cheb_cond.expand(tape, h)?;
        self.blocks
            .iter()
            .map(|b| tape.matmul(h_exp, bound.get(b.cond_w)))
            .collect()
    }

    /// Per-block step projections, one row per entry of `steps`.
    pub fn step_terms(&self, tape: &mut Tape, bound: &Bound, steps: &[usize]) -> Result<Vec<Var>> {
        if steps.is_empty() {
            return Err(Error::Usage("no diffusion steps given".into()));
        }
        if let Some(&k) = steps.iter().find(|&&k| k == 0 || k > self.num_steps) {
            return Err(Error::Usage(format!(
                "diffusion step {k} outside 1..={}",
                self.num_steps
            )));
        }
        let mut table = Vec::with_capacity(steps.len() * STEP_EMBED_DIM);
        for &k in steps {
            table.extend_from_slice(&step_embedding(k));
        }
        let sin = tape.constant(vec![steps.len(), STEP_EMBED_DIM], table)?;
        let hidden = tape.matmul(sin, bound.get(self.emb_w))?;
        let hidden = tape.broadcast_add(hidden, bound.get(self.emb_b))?;
        let hidden = tape.silu(hidden)?;
        self.blocks
            .iter()
            .map(|b| {
                let p = tape.matmul(hidden, bound.get(b.step_w))?;
                tape.broadcast_add(p, bound.get(b.step_b))
            })
            .collect()
    }

    /// One gated residual block. `cond` and `step` must broadcast onto the
    /// `rows × 2·D_r` pre-activation. Returns `(residual, skip)`.
    pub fn block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        index: usize,
        res: Var,
        cond: Var,
        step: Var,
    ) -> Result<(Var, Var)> {
        let b = &self.blocks[index];
        let c = self.channels;
        let y = tape.matmul(res, bound.get(b.dil_w))?;
        let y = tape.broadcast_add(y, bound.get(b.dil_b))?;
        let y = tape.broadcast_add(y, cond)?;
        let y = tape.broadcast_add(y, step)?;
        let filt = tape.slice(y, 1, 0, c)?;
        let gate = tape.slice(y, 1, c, 2 * c)?;
        let filt = tape.tanh(filt)?;
        let gate = tape.sigmoid(gate)?;
        let g = tape.mul(filt, gate)?;
        let o = tape.matmul(g, bound.get(b.out_w))?;
        let o = tape.broadcast_add(o, bound.get(b.out_b))?;
        let o_res = tape.slice(o, 1, 0, c)?;
        let skip = tape.slice(o, 1, c, 2 * c)?;
        let sum = tape.add(res, o_res)?;
        let res = tape.scale(sum, FRAC_1_SQRT_2)?;
        Ok((res, skip))
    }

    /// Predicted noise for `x` (`rows × 1`), given per-block condition and
    /// step terms from [`condition`](Self::condition) and
    /// [`step_terms`](Self::step_terms) (already aligned or broadcastable).
    pub fn denoise(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        cond: &[Var],
        steps: &[Var],
    ) -> Result<Var> {
        if cond.len() != self.blocks.len() || steps.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "expected {} condition/step terms, got {}/{}",
                self.blocks.len(),
                cond.len(),
                steps.len()
            )));
        }
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != 1 {
            return Err(Error::Shape(format!(
                "denoiser input must be rows x 1, got {:?}",
                tape.shape(x)
            )));
        }
        let res = tape.matmul(x, bound.get(self.in_w))?;
        let res = tape.broadcast_add(res, bound.get(self.in_b))?;
        let mut res = tape.relu(res)?;
        let mut skip_sum: Option<Var> = None;
        for m in 0..self.blocks.len() {
            let (r, s) = self.block(tape, bound, m, res, cond[m], steps[m])?;
            res = r;
            skip_sum = Some(match skip_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let skip = tape.scale(
            skip_sum.expect("at least one block"),
            1.0 / (self.blocks.len() as f64).sqrt(),
        )?;
        let hdn = tape.relu(skip)?;
        let hdn = tape.matmul(hdn, bound.get(self.skip_w))?;
        let hdn = tape.broadcast_add(hdn, bound.get(self.skip_b))?;
        let hdn = tape.relu(hdn)?;
        let out = tape.matmul(hdn, bound.get(self.final_w))?;
        tape.broadcast_add(out, bound.get(self.final_b))
    }
}

/// Tape-free forward pass of [`SgWave`] for the sampler's inner loop.
///
/// Rows are processed in cache-sized chunks; the result matches
/// [`SgWave::denoise`] up to floating-point reassociation.
#[derive(Debug, Clone)]
pub struct WaveKernel {
    channels: usize,
    in_w: Vec<f64>,
    in_b: Vec<f64>,
    blocks: Vec<KernelBlock>,
    skip_w: Vec<f64>,
    skip_b: Vec<f64>,
    final_w: Vec<f64>,
    final_b: f64,
}

#[derive(Debug, Clone)]
struct KernelBlock {
    dil_w: Vec<f64>,
    dil_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

const KERNEL_CHUNK: usize = 256;

/// `exp` over a slice, branch-free so the loop vectorizes. Arguments are
/// clamped to ±708; relative error is within a few ulps.
#[inline(always)]
fn exp_slice(v: &mut [f64]) {
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5·2^52, rounds to integer
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    for x in v.iter_mut() {
        let mut a = *x;
        a = if a > 708.0 { 708.0 } else { a };
        a = if a < -708.0 { -708.0 } else { a };
        let t = a * std::f64::consts::LOG2_E + MAGIC;
        let k = t - MAGIC;
        let r = (a - k * LN2_HI) - k * LN2_LO;
        // Taylor polynomial to r^13 on |r| <= ln2/2
        let mut p = 1.0 / 6227020800.0;
        p = p * r + 1.0 / 479001600.0;
        p = p * r + 1.0 / 39916800.0;
        p = p * r + 1.0 / 3628800.0;
        p = p * r + 1.0 / 362880.0;
        p = p * r + 1.0 / 40320.0;
        p = p * r + 1.0 / 5040.0;
        p = p * r + 1.0 / 720.0;
        p = p * r + 1.0 / 120.0;
        p = p * r + 1.0 / 24.0;
        p = p * r + 1.0 / 6.0;
        p = p * r + 0.5;
        p = p * r + 1.0;
        p = p * r + 1.0;
        let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
        *x = p * scale;
    }
}

/// Gated activation `tanh(a)·σ(b)` for paired slices, written into `a`.
/// `b` is used as scratch. AVX2 only widens the vectors; without FMA the
/// results are bitwise identical to the baseline build.
fn gate_slice(a: &mut [f64], b: &mut [f64], ea: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { gate_slice_avx2(a, b, ea) };
    }
    gate_slice_generic(a, b, ea)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gate_slice_avx2(a: &mut [f64], b: &mut [f64], ea: &mut [f64]) {
    gate_slice_generic(a, b, ea)
}

#[inline(always)]
fn gate_slice_generic(a: &mut [f64], b: &mut [f64], ea: &mut [f64]) {
    for (e, &x) in ea.iter_mut().zip(a.iter()) {
        *e = -2.0 * x.abs();
    }
    for x in b.iter_mut() {
        *x = -*x;
    }
    exp_slice(ea);
    exp_slice(b);
    for ((x, &e1), &e2) in a.iter_mut().zip(ea.iter()).zip(b.iter()) {
        *x = (1.0 - e1).copysign(*x) / ((1.0 + e1) * (1.0 + e2));
    }
}

impl WaveKernel {
    pub fn new(wave: &SgWave, store: &ParamStore) -> Self {
        let get = |id: ParamId| store.get(id).data().to_vec();
        WaveKernel {
            channels: wave.channels,
            in_w: get(wave.in_w),
            in_b: get(wave.in_b),
            blocks: wave
                .blocks
                .iter()
                .map(|b| KernelBlock {
                    dil_w: get(b.dil_w),
                    dil_b: get(b.dil_b),
                    out_w: get(b.out_w),
                    out_b: get(b.out_b),
                })
                .collect(),
            skip_w: get(wave.skip_w),
            skip_b: get(wave.skip_b),
            final_w: get(wave.final_w),
            final_b: store.get(wave.final_b).data()[0],
        }
    }

    /// Predicted noise for `x`. `cond[m]` holds `n × 2·D_r` values repeated
    /// over blocks of `n` rows; `step[m]` is one `2·D_r` row for all rows.
    pub fn denoise(
        &self,
        x: &[f64],
        n: usize,
        cond: &[Vec<f64>],
        step: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let c = self.channels;
        let w = 2 * c;
        if cond.len() != self.blocks.len() || step.len() != self.blocks.len() {
            return Err(Error::Shape(
                "condition/step terms do not match the block count".into(),
            ));
        }
        if n == 0
            || !x.len().is_multiple_of(n)
            || cond.iter().any(|v| v.len() != n * w)
            || step.iter().any(|v| v.len() != w)
        {
            return Err(Error::Shape(
                "denoiser kernel inputs have inconsistent sizes".into(),
            ));
        }
        let bias: Vec<Vec<f64>> = self
            .blocks
            .iter()
            .zip(step)
            .map(|(b, s)| b.dil_b.iter().zip(s).map(|(p, q)| p + q).collect())
            .collect();
        let skip_scale = 1.0 / (self.blocks.len() as f64).sqrt();
        let mut out = vec![0.0; x.len()];
        let mut res = vec![0.0; KERNEL_CHUNK * c];
        let mut y = vec![0.0; KERNEL_CHUNK * w];
        let mut g = vec![0.0; KERNEL_CHUNK * c];
        let mut gb = vec![0.0; KERNEL_CHUNK * c];
        let mut ge = vec![0.0; KERNEL_CHUNK * c];
        let mut o = vec![0.0; KERNEL_CHUNK * w];
        let mut skip = vec![0.0; KERNEL_CHUNK * c];
        let mut hid = vec![0.0; KERNEL_CHUNK * c];
        for start in (0..x.len()).step_by(KERNEL_CHUNK) {
            let rows = KERNEL_CHUNK.min(x.len() - start);
            let (res, y, g, gb, ge, o, skip, hid) = (
                &mut res[..rows * c],
                &mut y[..rows * w],
                &mut g[..rows * c],
                &mut gb[..rows * c],
                &mut ge[..rows * c],
                &mut o[..rows * w],
                &mut skip[..rows * c],
                &mut hid[..rows * c],
            );
            for r in 0..rows {
                let xv = x[start + r];
                for j in 0..c {
                    res[r * c + j] = (xv * self.in_w[j] + self.in_b[j]).max(0.0);
                }
            }
            skip.fill(0.0);
            for (m, blk) in self.blocks.iter().enumerate() {
                crate::tensor::gemm(rows, c, w, res, false, &blk.dil_w, false, y, false);
                for r in 0..rows {
                    let node = (start + r) % n;
                    let cr = &cond[m][node * w..(node + 1) * w];
                    let yr = &mut y[r * w..(r + 1) * w];
                    for j in 0..w {
                        yr[j] += bias[m][j] + cr[j];
                    }
                    g[r * c..(r + 1) * c].copy_from_slice(&yr[..c]);
                    gb[r * c..(r + 1) * c].copy_from_slice(&yr[c..]);
                }
                gate_slice(g, gb, ge);
                crate::tensor::gemm(rows, c, w, g, false, &blk.out_w, false, o, false);
                for r in 0..rows {
                    for j in 0..c {
                        let idx = r * c + j;
                        res[idx] = (res[idx] + o[r * w + j] + blk.out_b[j]) * FRAC_1_SQRT_2;
                        skip[idx] += o[r * w + c + j] + blk.out_b[c + j];
                    }
                }
            }
            for v in skip.iter_mut() {
                *v = (*v * skip_scale).max(0.0);
            }
            crate::tensor::gemm(rows, c, c, skip, false, &self.skip_w, false, hid, false);
            for r in 0..rows {
                let mut acc = self.final_b;
                for j in 0..c {
                    acc += (hid[r * c + j] + self.skip_b[j]).max(0.0) * self.final_w[j];
                }
                out[start + r] = acc;
            }
        }
        if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "denoiser produced {} at row {pos}",
                out[pos]
            )));
        }
        Ok(out)
    }
}

/// Encoder plus denoiser, bound to one graph basis.
#[derive(Debug, Clone)]
pub struct SpecStgNet {
    pub cfg: ModelConfig,
    pub gru: SgGru,
    pub wave: SgWave,
    pub cheb: ChebTable,
    pub cheb_cond: ChebTable,
}

impl SpecStgNet {
    /// Builds the network and a freshly initialized parameter store.
    pub fn new<R: Rng>(
        cfg: ModelConfig,
        basis: &FourierBasis,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if basis.num_nodes() != cfg.num_nodes {
            return Err(Error::NodeMismatch {
                checkpoint: cfg.num_nodes,
                graph: basis.num_nodes(),
            });
        }
        let mut store = ParamStore::new();
        let gru = SgGru::init(&mut store, &cfg, rng)?;
        let wave = SgWave::init(&mut store, &cfg, rng)?;
        let net = SpecStgNet {
            cheb: ChebTable::new(basis, cfg.cheb_order)?,
            cheb_cond: ChebTable::new(basis, COND_CHEB_ORDER)?,
            cfg,
            gru,
            wave,
        };
        Ok((net, store))
    }

    /// `ε_θ(x̃ᵏ, k, h̃)` for a single graph signal, on plain arrays.
    pub fn denoise_array(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        k: usize,
        h: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let n = self.cfg.num_nodes;
        if x.dim() != (n, 1) || h.dim() != (n, self.cfg.hidden_size) {
            return Err(Error::Shape(format!(
                "denoiser expects x [{n}, 1] and h [{n}, {}], got {:?} and {:?}",
                self.cfg.hidden_size,
                x.dim(),
                h.dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape)?;
        let xv = tape.constant_array(x)?;
        let hv = tape.constant_array(h)?;
        let cond = self
            .wave
            .condition(&mut tape, &bound, &self.cheb_cond, hv)?;
        let steps = self.wave.step_terms(&mut tape, &bound, &[k])?;
        let out = self.wave.denoise(&mut tape, &bound, xv, &cond, &steps)?;
        tape.to_array2(out)
    }

    /// One encoder step on plain arrays (`input`: `N × F`, `h`: `N × D_h`).
    pub fn gru_step_array(
        &self,
        store: &ParamStore,
        input: &Array2<f64>,
        h: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape)?;
        let xv = tape.constant_array(input)?;
        let hv = tape.constant_array(h)?;
        let step = self.gru.step(&mut tape, &bound, &self.cheb, xv, hv)?;
        tape.to_array2(step.h)
    }
}

/// Appends time-feature columns to a spectral signal column.
///
/// `features` are one row of scaled codes for the time point; in spectral
/// mode they are projected with `Uᵀ` (a node-constant column becomes
/// `Uᵀ1 · γ`), otherwise they are repeated raw on every node.
pub fn encoder_input(
    signal: &[f64],
    features: &[f64],
    transformed_ones: Option<&[f64]>,
) -> Vec<f64> {
    let f = features.len();
    let mut out = Vec::with_capacity(signal.len() * (1 + f));
    for (n, &x) in signal.iter().enumerate() {
        out.push(x);
        let scale = transformed_ones.map_or(1.0, |u| u[n]);
        out.extend(features.iter().map(|g| scale * g));
    }
    out
}

/// Spectral-domain helper for tests and diagnostics: applies `ChebConv` to a
/// spectral input by reconstructing, filtering densely and transforming back.
pub fn dense_reference_in_spectral(
    filter: &SpecConvFilter,
    basis: &FourierBasis,
    xt: &Array2<f64>,
) -> Result<Array2<f64>> {
    let x = fourier_reconstruct(basis, xt)?;
    fourier_transform(basis, &cheb_conv_dense(filter, basis, &x)?)
}

/// Extracts the `N × C` block of rows `[b·N, (b+1)·N)` from a stacked batch.
pub fn batch_slice(a: &Array2<f64>, b: usize, n: usize) -> Array2<f64> {
    a.slice(s![b * n..(b + 1) * n, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, fourier_basis, fourier_transform};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_basis(n: usize, rng: &mut ChaCha8Rng) -> FourierBasis {
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((i, (i + 1) % n, rng.gen_range(0.5..1.5)));
            for j in (i + 2)..n {
                if rng.gen_bool(0.2) {
                    edges.push((i, j, rng.gen_range(0.1..1.0)));
                }
            }
        }
        fourier_basis(&build_graph(&edges, n, true, None).unwrap()).unwrap()
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn small_cfg(n: usize) -> ModelConfig {
        ModelConfig {
            num_nodes: n,
            input_features: 2,
            hidden_size: 3,
            cheb_order: 3,
            residual_blocks: 2,
            residual_channels: 4,
            num_steps: 10,
        }
    }

    #[test]
    fn chebyshev_values() {
        assert_eq!(
            chebyshev_diag(&[0.0], 3).column(0).to_vec(),
            vec![1.0, 0.0, -1.0]
        );
        assert_eq!(chebyshev_diag(&[1.0], 6).column(0).to_vec(), vec![1.0; 6]);
        assert_eq!(
            chebyshev_diag(&[0.5], 4).column(0).to_vec(),
            vec![1.0, 0.5, -0.5, -1.0]
        );
    }

    #[test]
    fn zeroth_order_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = random_basis(5, &mut rng);
        let filter = SpecConvFilter::new(vec![array![[1.0]]]).unwrap();
        let xt = random_matrix(5, 1, &mut rng);
        assert_eq!(spec_conv(&filter, &basis, &xt).unwrap(), xt);
    }

    #[test]
    fn first_order_on_two_nodes() {
        let g = build_graph(&[(0, 1, 1.0)], 2, true, None).unwrap();
        let basis = fourier_basis(&g).unwrap();
        let filter = SpecConvFilter::new(vec![array![[0.0]], array![[1.0]]]).unwrap();
        let out = spec_conv(&filter, &basis, &array![[2.5], [-4.0]]).unwrap();
        assert_eq!(out, array![[-2.5], [-4.0]]);
    }

    #[test]
    fn spec_conv_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = random_basis(10, &mut rng);
        let coeffs = (0..3).map(|_| random_matrix(2, 3, &mut rng)).collect();
        let filter = SpecConvFilter::new(coeffs).unwrap();
        let x = random_matrix(10, 2, &mut rng);
        let fast = spec_conv(&filter, &basis, &fourier_transform(&basis, &x).unwrap()).unwrap();
        let dense =
            fourier_transform(&basis, &cheb_conv_dense(&filter, &basis, &x).unwrap()).unwrap();
        assert!((&fast - &dense).iter().all(|d| d.abs() <= 1e-9));
        let via =
            dense_reference_in_spectral(&filter, &basis, &fourier_transform(&basis, &x).unwrap())
                .unwrap();
        assert!((&fast - &via).iter().all(|d| d.abs() <= 1e-9));
    }

    #[test]
    fn tape_spec_conv_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = random_basis(6, &mut rng);
        let coeffs: Vec<_> = (0..3).map(|_| random_matrix(2, 4, &mut rng)).collect();
        let filter = SpecConvFilter::new(coeffs).unwrap();
        let xt = random_matrix(6, 2, &mut rng);
        let plain = spec_conv(&filter, &basis, &xt).unwrap();
        let cheb = ChebTable::new(&basis, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_array(&xt).unwrap();
        let w = tape.constant_array(&filter.stacked()).unwrap();
        let out = spec_conv_var(&mut tape, &cheb, x, w).unwrap();
        let diff = &tape.to_array2(out).unwrap() - &plain;
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn spec_conv_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let basis = random_basis(4, &mut rng);
        let filter = SpecConvFilter::new(vec![array![[1.0, 0.0]]]).unwrap();
        assert!(matches!(
            spec_conv(&filter, &basis, &Array2::zeros((3, 1))),
            Err(Error::Shape(_))
        ));
        assert!(SpecConvFilter::new(vec![]).is_err());
    }

    fn zero_store(store: &ParamStore) -> ParamStore {
        let mut z = store.clone();
        for id in z.ids().collect::<Vec<_>>() {
            z.get_mut(id).data_mut().fill(0.0);
        }
        z
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = random_basis(4, &mut rng);
        let (net, store) = SpecStgNet::new(small_cfg(4), &basis, &mut rng).unwrap();
        let zeros = zero_store(&store);
        let x = random_matrix(4, 2, &mut rng);
        let h = random_matrix(4, 3, &mut rng);
        let next = net.gru_step_array(&zeros, &x, &h).unwrap();
        assert!((&next - &(&h * 0.5)).iter().all(|d| d.abs() < 1e-15));
        // zero input and zero state is a fixed point for any weights
        let fixed = net
            .gru_step_array(&store, &Array2::zeros((4, 2)), &Array2::zeros((4, 3)))
            .unwrap();
        assert!(fixed.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_gates_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let basis = random_basis(5, &mut rng);
        let (net, store) = SpecStgNet::new(small_cfg(5), &basis, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape).unwrap();
        let x = tape
            .constant_array(&(random_matrix(5, 2, &mut rng) * 5.0))
            .unwrap();
        let h = tape.constant_array(&random_matrix(5, 3, &mut rng)).unwrap();
        let st = net.gru.step(&mut tape, &bound, &net.cheb, x, h).unwrap();
        assert!(tape.value(st.z).iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(tape.value(st.r).iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(tape.value(st.zeta).iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn encoder_requires_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = random_basis(3, &mut rng);
        let (net, store) = SpecStgNet::new(small_cfg(3), &basis, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape).unwrap();
        let h0 = tape.constant_array(&Array2::zeros((3, 3))).unwrap();
        assert!(matches!(
            net.gru.encode(&mut tape, &bound, &net.cheb, &[], h0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_denoiser_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let basis = random_basis(4, &mut rng);
        let (net, store) = SpecStgNet::new(small_cfg(4), &basis, &mut rng).unwrap();
        let out = net
            .denoise_array(
                &zero_store(&store),
                &random_matrix(4, 1, &mut rng),
                3,
                &random_matrix(4, 3, &mut rng),
            )
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denoiser_depends_on_step_and_rejects_bad_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = random_basis(4, &mut rng);
        let (net, mut store) = SpecStgNet::new(small_cfg(4), &basis, &mut rng).unwrap();
        // the output layer starts at zero; give it weights so k can show through
        let fw = net.wave.final_w;
        store.get_mut(fw).data_mut().fill(0.7);
        let x = random_matrix(4, 1, &mut rng);
        let h = random_matrix(4, 3, &mut rng);
        let a = net.denoise_array(&store, &x, 1, &h).unwrap();
        let b = net.denoise_array(&store, &x, 10, &h).unwrap();
        assert_ne!(a, b);
        assert!(matches!(
            net.denoise_array(&store, &x, 0, &h),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            net.denoise_array(&store, &x, 11, &h),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn encoder_input_layout() {
        let v = encoder_input(&[1.0, 2.0], &[0.5], Some(&[2.0, -1.0]));
        assert_eq!(v, vec![1.0, 1.0, 2.0, -0.5]);
        let raw = encoder_input(&[1.0, 2.0], &[0.5], None);
        assert_eq!(raw, vec![1.0, 0.5, 2.0, 0.5]);
    }

    #[test]
    fn vector_exp_and_gate_are_accurate() {
        let xs: Vec<f64> = (-8000..=8000).map(|i| i as f64 * 0.09).collect();
        let mut e = xs.clone();
        exp_slice(&mut e);
        for (&x, &v) in xs.iter().zip(&e) {
            if x.abs() <= 700.0 {
                assert!((v - x.exp()).abs() <= 4.0 * f64::EPSILON * x.exp(), "{x}");
            }
        }
        let a: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = a.iter().rev().map(|v| 0.7 * v).collect();
        let (mut ga, mut gb, mut ge) = (a.clone(), b.clone(), vec![0.0; a.len()]);
        gate_slice(&mut ga, &mut gb, &mut ge);
        for i in 0..a.len() {
            let want = a[i].tanh() * crate::tensor::sigmoid(b[i]);
            assert!(
                (ga[i] - want).abs() <= 4.0 * f64::EPSILON,
                "{} {}",
                a[i],
                b[i]
            );
        }
    }

    #[test]
    fn kernel_matches_tape_denoiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let basis = random_basis(5, &mut rng);
        let (net, mut store) = SpecStgNet::new(small_cfg(5), &basis, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        // 3 stacked chains of 5 nodes, more rows than one kernel chunk
        let rows = 5 * 60;
        let x = random_matrix(rows, 1, &mut rng);
        let h = random_matrix(5, 3, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape).unwrap();
        let hv = tape.constant_array(&h).unwrap();
        let cond = net
            .wave
            .condition(&mut tape, &bound, &net.cheb_cond, hv)
            .unwrap();
        let steps = net.wave.step_terms(&mut tape, &bound, &[4]).unwrap();
        let xv = tape.constant_array(&x).unwrap();
        let want = net
            .wave
            .denoise(&mut tape, &bound, xv, &cond, &steps)
            .unwrap();
        let want = tape.value(want).to_vec();

        let cond_v: Vec<Vec<f64>> = cond.iter().map(|&c| tape.value(c).to_vec()).collect();
        let step_v: Vec<Vec<f64>> = steps.iter().map(|&s| tape.value(s).to_vec()).collect();
        let kernel = WaveKernel::new(&net.wave, &store);
        let got = kernel
            .denoise(x.as_slice().unwrap(), 5, &cond_v, &step_v)
            .unwrap();
        let err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "kernel deviates by {err}");
        assert!(kernel.denoise(&[0.0; 7], 5, &cond_v, &step_v).is_err());
    }
}
