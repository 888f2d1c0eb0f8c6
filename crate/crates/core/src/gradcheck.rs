//! Central finite-difference checks of the tape gradients for every layer
//! type of the model, at small sizes.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{split_and_normalize, synth_dataset, SpectralSeries, TimeFeatureConfig};
use crate::diffusion::{init_model, training_loss, TrainerConfig};
use crate::error::Result;
use crate::graph::{build_graph, fourier_basis, FourierBasis};
use crate::nn::{spec_conv_var, ChebTable, ModelConfig, SpecStgNet};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{OpKind, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Below it the comparison is
/// effectively absolute at `REL_TOL * GRAD_FLOOR`, which sits above the
/// rounding noise of a central difference on an O(10) loss at `FD_STEP`.
pub const GRAD_FLOOR: f64 = 1e-5;
/// Fraction of parameters checked per layer.
pub const SAMPLE_FRACTION: f64 = 0.01;
/// Lower bound on the number of checked parameters per layer.
pub const MIN_SAMPLES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub parameters: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16}{:>10}{:>10}{:>16}  result\n",
            "layer", "params", "checked", "max rel error"
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{:<16}{:>10}{:>10}{:>16.3e}  {}\n",
                l.layer,
                l.parameters,
                l.checked,
                l.max_rel_error,
                if l.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Relative error with a floored denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic and central-difference gradients of `loss` for a
/// random subset of the scalars in the parameters `ids`.
pub fn check_layer<F>(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    loss: F,
    rng: &mut ChaCha8Rng,
    fault: Option<(OpKind, f64)>,
) -> Result<LayerCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_backward_fault(kind, factor);
    }
    let bound = store.bind(&mut tape)?;
    let l = loss(&mut tape, &bound)?;
    let grads = tape.backward(l)?;

    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let count = ((total as f64 * SAMPLE_FRACTION).ceil() as usize)
        .max(MIN_SAMPLES)
        .min(total);
    let mut picks: Vec<usize> = sample(rng, total, count).into_vec();
    picks.sort_unstable();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = s.bind_frozen(&mut t)?;
        let v = loss(&mut t, &b)?;
        Ok(t.item(v))
    };
    let mut worst = 0.0f64;
    let mut live = false;
    let mut probe = store.clone();
    for flat in picks {
        let (mut which, mut offset) = (0, flat);
        while offset >= sizes[which] {
            offset -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let analytic = grads.get(bound.get(id)).map_or(0.0, |g| g[offset]);
        let orig = probe.get(id).data()[offset];
        probe.get_mut(id).data_mut()[offset] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[offset] = orig - FD_STEP;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[offset] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
        live |= analytic.abs() > GRAD_FLOOR;
    }
    Ok(LayerCheck {
        layer: name.to_string(),
        parameters: total,
        checked: count,
        max_rel_error: worst,
        // a layer whose sampled gradients are all zero proves nothing
        passed: live && worst <= REL_TOL,
    })
}

fn small_basis(rng: &mut ChaCha8Rng, n: usize) -> Result<FourierBasis> {
    let mut edges: Vec<_> = (0..n)
        .map(|i| (i, (i + 1) % n, rng.gen_range(0.5..1.5)))
        .collect();
    edges.push((0, n / 2, 0.7));
    fourier_basis(&build_graph(&edges, n, true, None)?)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Replaces every parameter by a random value so no gradient path is
/// trivially zero (the output layer starts at zero otherwise).
/// Biases feeding a ReLU are drawn positive so the tiny test inputs do not
/// land entirely in the flat region.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let positive = matches!(store.name(id), "wave.in_b" | "wave.skip_b");
        for v in store.get_mut(id).data_mut() {
            *v = if positive {
                rng.gen_range(0.1..scale)
            } else {
                rng.gen_range(-scale..scale)
            };
        }
    }
}

fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .collect()
}

/// Runs the checks for SpecConv, an SG-GRU step, an SG-Wave block, the full
/// denoiser at `N = 4`, and the complete training objective.
pub fn run_gradcheck(seed: u64, fault: Option<(OpKind, f64)>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let basis = small_basis(&mut rng, n)?;
    let mut layers = Vec::new();

    // SpecConv with J = 3, 3 -> 2 channels
    {
        let cheb = ChebTable::new(&basis, 3)?;
        let mut store = ParamStore::new();
        let w = store.insert(
            "spec_conv.w",
            Tensor::from_array2(&random_matrix(&mut rng, 9, 2)),
        )?;
        let x = random_matrix(&mut rng, n, 3);
        let target = random_matrix(&mut rng, n, 2);
        let check = check_layer(
            "spec_conv",
            &store,
            &[w],
            |tape, b| {
                let xv = tape.constant_array(&x)?;
                let tv = tape.constant_array(&target)?;
                let y = spec_conv_var(tape, &cheb, xv, b.get(w))?;
                tape.mse_loss(y, tv)
            },
            &mut rng,
            fault,
        )?;
        layers.push(check);
    }

    let cfg = ModelConfig {
        num_nodes: n,
        input_features: 2,
        hidden_size: 3,
        cheb_order: 3,
        residual_blocks: 2,
        residual_channels: 4,
        num_steps: 10,
    };
    let (net, mut store) = SpecStgNet::new(cfg, &basis, &mut rng)?;
    randomize(&mut store, &mut rng, 0.8);
    let net: &SpecStgNet = &net;

    // SG-GRU step, loss ‖h'‖²
    {
        let x = random_matrix(&mut rng, n, 2);
        let h = random_matrix(&mut rng, n, 3);
        let ids = ids_with_prefix(&store, "gru.");
        let check = check_layer(
            "sg_gru_step",
            &store,
            &ids,
            |tape, b| {
                let xv = tape.constant_array(&x)?;
                let hv = tape.constant_array(&h)?;
                let step = net.gru.step(tape, b, &net.cheb, xv, hv)?;
                let sq = tape.mul(step.h, step.h)?;
                tape.sum(sq)
            },
            &mut rng,
            fault,
        )?;
        layers.push(check);
    }

    // one SG-Wave block, including its condition and step projections
    {
        let res = random_matrix(&mut rng, n, 4);
        let h = random_matrix(&mut rng, n, 3);
        let target_res = random_matrix(&mut rng, n, 4);
        let target_skip = random_matrix(&mut rng, n, 4);
        let ids = ids_with_prefix(&store, "wave.block0");
        let check = check_layer(
            "sg_wave_block",
            &store,
            &ids,
            |tape, b| {
                let rv = tape.constant_array(&res)?;
                let hv = tape.constant_array(&h)?;
                let cond = net.wave.condition(tape, b, &net.cheb_cond, hv)?;
                let steps = net.wave.step_terms(tape, b, &[7])?;
                let (r, s) = net.wave.block(tape, b, 0, rv, cond[0], steps[0])?;
                let tr = tape.constant_array(&target_res)?;
                let ts = tape.constant_array(&target_skip)?;
                let l1 = tape.mse_loss(r, tr)?;
                let l2 = tape.mse_loss(s, ts)?;
                tape.add(l1, l2)
            },
            &mut rng,
            fault,
        )?;
        layers.push(check);
    }

    // full denoiser, mse(ε̂, ε)
    {
        let x = random_matrix(&mut rng, n, 1);
        let h = random_matrix(&mut rng, n, 3);
        let eps = random_matrix(&mut rng, n, 1);
        let ids = ids_with_prefix(&store, "wave.");
        let check = check_layer(
            "sg_wave_denoise",
            &store,
            &ids,
            |tape, b| {
                let xv = tape.constant_array(&x)?;
                let hv = tape.constant_array(&h)?;
                let cond = net.wave.condition(tape, b, &net.cheb_cond, hv)?;
                let steps = net.wave.step_terms(tape, b, &[3])?;
                let pred = net.wave.denoise(tape, b, xv, &cond, &steps)?;
                let ev = tape.constant_array(&eps)?;
                tape.mse_loss(pred, ev)
            },
            &mut rng,
            fault,
        )?;
        layers.push(check);
    }

    // training objective: teacher-forced encoder plus batched denoiser
    {
        let tcfg = TrainerConfig {
            num_steps: 10,
            beta_end: 0.2,
            batch_size: 3,
            hidden_size: 3,
            residual_blocks: 2,
            residual_channels: 4,
            context: 3,
            horizon: 2,
            loss_from_context: true,
            time_features: TimeFeatureConfig {
                week_of_month: false,
                ..TimeFeatureConfig::default()
            },
            seed,
            ..TrainerConfig::default()
        };
        let ds = synth_dataset(n, 200, seed)?;
        let basis = fourier_basis(&ds.graph)?;
        let split = split_and_normalize(&ds, [0.6, 0.2, 0.2], 3, 2)?;
        let series = SpectralSeries::new(&ds, &basis, split.stats, &tcfg.time_features)?;
        let (tnet, mut tstore) = init_model(&tcfg, &basis)?;
        randomize(&mut tstore, &mut rng, 0.5);
        let sched = tcfg.schedule()?;
        let starts = [0usize, 7, 30];
        let ids: Vec<ParamId> = tstore.ids().collect();
        let check = check_layer(
            "training_loss",
            &tstore,
            &ids,
            |tape, b| {
                let mut draw_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDD);
                training_loss(
                    &tnet,
                    tape,
                    b,
                    &sched,
                    &series,
                    &tcfg,
                    &starts,
                    &mut draw_rng,
                )
            },
            &mut rng,
            fault,
        )?;
        layers.push(check);
    }

    Ok(GradcheckReport {
        tolerance: REL_TOL,
        layers,
    })
}
