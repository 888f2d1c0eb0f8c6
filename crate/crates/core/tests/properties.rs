//! Statistical and behavioural properties checked against independent
//! recomputations.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use specstg::data::{
    synth_dataset, synth_start, Normalization, SpectralSeries, StgDataset, TimeFeatureConfig,
    SYNTH_DAY,
};
use specstg::diffusion::{forward_corrupt, training_loss, NoiseSchedule, TrainerConfig};
use specstg::graph::{build_graph, fourier_basis};
use specstg::nn::{ModelConfig, SpecStgNet};
use specstg::params::{Adam, ParamStore};
use specstg::tensor::Tape;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Residual after a least-squares fit of a level and a daily sinusoid, which
/// would otherwise correlate every pair of nodes.
fn deseasonalized(ds: &StgDataset, node: usize) -> Vec<f64> {
    let row = ds.values.row(node);
    let w = 2.0 * std::f64::consts::PI / SYNTH_DAY as f64;
    let design: Vec<[f64; 3]> = (0..row.len())
        .map(|t| [1.0, (w * t as f64).sin(), (w * t as f64).cos()])
        .collect();
    let mut xtx = Array2::<f64>::zeros((3, 3));
    let mut xty = Array1::<f64>::zeros(3);
    for (d, y) in design.iter().zip(row.iter()) {
        for a in 0..3 {
            xty[a] += d[a] * y;
            for b in 0..3 {
                xtx[[a, b]] += d[a] * d[b];
            }
        }
    }
    let beta = solve3(&xtx, &xty);
    design
        .iter()
        .zip(row.iter())
        .map(|(d, y)| y - (0..3).map(|a| d[a] * beta[a]).sum::<f64>())
        .collect()
}

/// Cramer's rule on a 3×3 system.
fn solve3(a: &Array2<f64>, b: &Array1<f64>) -> [f64; 3] {
    let det = |m: &Array2<f64>| {
        m[[0, 0]] * (m[[1, 1]] * m[[2, 2]] - m[[1, 2]] * m[[2, 1]])
            - m[[0, 1]] * (m[[1, 0]] * m[[2, 2]] - m[[1, 2]] * m[[2, 0]])
            + m[[0, 2]] * (m[[1, 0]] * m[[2, 1]] - m[[1, 1]] * m[[2, 0]])
    };
    let d = det(a);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut m = a.clone();
        m.column_mut(c).assign(b);
        *o = det(&m) / d;
    }
    out
}

#[test]
fn synthetic_neighbours_correlate_more_than_strangers() {
    let mut gaps = Vec::new();
    for seed in 0..20 {
        let ds = synth_dataset(20, 2000, seed).unwrap();
        let diffs: Vec<Vec<f64>> = (0..20).map(|i| deseasonalized(&ds, i)).collect();
        let (mut adj, mut far) = (Vec::new(), Vec::new());
        for i in 0..20 {
            for j in (i + 1)..20 {
                let c = pearson(&diffs[i], &diffs[j]);
                if ds.graph.adjacency[[i, j]] > 0.0 {
                    adj.push(c);
                } else {
                    far.push(c);
                }
            }
        }
        // random non-adjacent pairs, as many as there are edges
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let picked: Vec<f64> = (0..adj.len())
            .map(|_| far[rng.gen_range(0..far.len())])
            .collect();
        gaps.push(median(adj) - median(picked));
    }
    let m = median(gaps.clone());
    assert!(m > 0.0, "median correlation gap {m}, per seed {gaps:?}");
}

/// `ᾱ_k` computed from the schedule formula, independent of the library.
fn alpha_bar(k_total: usize, beta_1: f64, beta_k: f64, k: usize) -> f64 {
    (1..=k)
        .map(|j| {
            let w = (j - 1) as f64 / (k_total - 1) as f64;
            1.0 - ((1.0 - w) * beta_1.sqrt() + w * beta_k.sqrt()).powi(2)
        })
        .product()
}

#[test]
fn forward_corruption_matches_closed_form_marginals() {
    let (k_total, draws) = (50, 10_000);
    let sched = NoiseSchedule::quadratic(k_total, 1e-4, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in [1, k_total / 2, k_total] {
        let eps: Vec<f64> = (0..draws).map(|_| rng.sample(StandardNormal)).collect();
        let x0 = vec![1.0; draws];
        let xs = forward_corrupt(&sched, &x0, k, &eps).unwrap();
        let ab = alpha_bar(k_total, 1e-4, 0.3, k);
        let (mean, std) = (ab.sqrt(), (1.0 - ab).sqrt());
        let m = xs.iter().sum::<f64>() / draws as f64;
        let sd = (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let se_mean = std / (draws as f64).sqrt();
        let se_std = std / (2.0 * draws as f64).sqrt();
        assert!(
            (m - mean).abs() <= 3.0 * se_mean,
            "k={k}: mean {m} vs {mean}"
        );
        assert!((sd - std).abs() <= 3.0 * se_std, "k={k}: std {sd} vs {std}");
        if k == k_total {
            assert!((m - mean).abs() <= 0.05 && (sd - std).abs() <= 0.05);
        }
    }
}

#[test]
fn terminal_state_is_nearly_white() {
    let (k_total, n) = (50, 20_000);
    let sched = NoiseSchedule::quadratic(k_total, 1e-4, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // a strongly structured signal: a ramp far from zero mean
    let x0: Vec<f64> = (0..n).map(|i| 3.0 + (i % 7) as f64).collect();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let xs = forward_corrupt(&sched, &x0, k_total, &eps).unwrap();
    let m = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let lag1 = pearson(&xs[..n - 1], &xs[1..]);
    let lag7 = pearson(&xs[..n - 7], &xs[7..]);
    assert!(m.abs() < 0.45, "mean {m}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
    assert!(
        lag1.abs() < 0.05 && lag7.abs() < 0.05,
        "autocorrelation {lag1} {lag7}"
    );
    assert!(sched.alpha_bar[k_total - 1] < 0.01);
}

#[test]
fn terminal_signal_fraction_depends_on_beta_end() {
    // at β_K = 0.1 a visible share of the signal survives fifty steps
    let low = NoiseSchedule::quadratic(50, 1e-4, 0.1).unwrap();
    let high = NoiseSchedule::quadratic(50, 1e-4, 0.3).unwrap();
    assert!((low.alpha_bar[49] - alpha_bar(50, 1e-4, 0.1, 50)).abs() < 1e-12);
    assert!(low.alpha_bar[49] > 0.01);
    assert!(high.alpha_bar[49] < 0.01);
}

fn no_features() -> TimeFeatureConfig {
    TimeFeatureConfig {
        day_of_week: false,
        week_of_month: false,
        time_of_day: false,
        spectral: false,
    }
}

#[test]
fn one_node_trainer_loss_decreases() {
    let len = 400;
    let values = Array2::from_elem((1, len), 2.0);
    let graph = build_graph(&[], 1, true, None).unwrap();
    let ds = StgDataset {
        values,
        interval_minutes: 5,
        start: synth_start(),
        graph,
        distances: vec![],
    };
    let basis = fourier_basis(&ds.graph).unwrap();
    let series = SpectralSeries::new(
        &ds,
        &basis,
        Normalization {
            mean: 0.0,
            std: 1.0,
        },
        &no_features(),
    )
    .unwrap();
    let cfg = TrainerConfig {
        context: 2,
        horizon: 2,
        hidden_size: 4,
        residual_blocks: 2,
        residual_channels: 8,
        time_features: no_features(),
        lr_min: 1e-3,
        lr_max: 1e-3,
        ..Default::default()
    };
    let sched = cfg.schedule().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (net, mut store) = SpecStgNet::new(cfg.model_config(1), &basis, &mut rng).unwrap();
    let mut adam = Adam::default();
    let starts: Vec<usize> = (0..len - 4).collect();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let batch: Vec<usize> = (0..32)
            .map(|_| starts[rng.gen_range(0..starts.len())])
            .collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let loss = training_loss(
            &net, &mut tape, &bound, &sched, &series, &cfg, &batch, &mut rng,
        )
        .unwrap();
        losses.push(tape.item(loss));
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&bound, &grads);
        adam.step(&mut store, cfg.lr_max).unwrap();
    }
    let blocks: Vec<f64> = losses
        .chunks(20)
        .map(|c| c.iter().sum::<f64>() / 20.0)
        .collect();
    assert!(blocks.last() < blocks.first(), "{blocks:?}");
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "20-step averages rose: {blocks:?}");
    }
}

fn small_net(features: usize, seed: u64) -> (SpecStgNet, ParamStore, specstg::graph::FourierBasis) {
    let edges = [
        (0, 1, 1.0),
        (1, 2, 0.5),
        (2, 3, 1.5),
        (3, 0, 1.0),
        (0, 2, 0.3),
    ];
    let basis = fourier_basis(&build_graph(&edges, 4, true, None).unwrap()).unwrap();
    let cfg = ModelConfig {
        num_nodes: 4,
        input_features: features,
        hidden_size: 3,
        cheb_order: 3,
        residual_blocks: 2,
        residual_channels: 4,
        num_steps: 10,
    };
    let (net, store) = SpecStgNet::new(cfg, &basis, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, store, basis)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn encoder_is_sensitive_to_input_order() {
    let (net, store, _) = small_net(1, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs: Vec<Array2<f64>> = (0..5)
        .map(|_| Array2::from_shape_fn((4, 1), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let run = |order: &[usize]| {
        let mut h = Array2::zeros((4, 3));
        for &i in order {
            h = net.gru_step_array(&store, &inputs[i], &h).unwrap();
        }
        h
    };
    let forward = run(&[0, 1, 2, 3, 4]);
    let permuted = run(&[4, 2, 0, 3, 1]);
    assert!(max_abs_diff(&forward, &permuted) > 1e-6);
}

/// Copies the signal rows (first of every `1 + F` block) of the input
/// weights of `src` into the one-feature model `dst`.
fn copy_signal_rows(src: &ParamStore, dst: &mut ParamStore, features: usize) {
    for id in src.ids() {
        let name = src.name(id).to_string();
        let target = dst.id(&name).unwrap();
        let t = src.get(id);
        if name.ends_with('1') && name.starts_with("gru.") {
            let cols = t.shape()[1];
            let rows = t.shape()[0] / features;
            let data: Vec<f64> = (0..rows)
                .flat_map(|j| t.data()[j * features * cols..j * features * cols + cols].to_vec())
                .collect();
            dst.get_mut(target).data_mut().copy_from_slice(&data);
        } else {
            dst.get_mut(target).data_mut().copy_from_slice(t.data());
        }
    }
}

#[test]
fn time_feature_ablation() {
    let (net4, mut store4, _) = small_net(4, 14);
    let (net1, mut store1, _) = small_net(1, 15);
    copy_signal_rows(&store4, &mut store1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let signal = Array2::from_shape_fn((4, 1), |_| rng.gen_range(-1.0..1.0));
    let h = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let reference = net1.gru_step_array(&store1, &signal, &h).unwrap();

    let mut zero_feats = Array2::zeros((4, 4));
    zero_feats.slice_mut(s![.., 0..1]).assign(&signal);
    let with_zeros = net4.gru_step_array(&store4, &zero_feats, &h).unwrap();
    assert!(max_abs_diff(&reference, &with_zeros) < 1e-12);

    let mut feats = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.1..1.0));
    feats.slice_mut(s![.., 0..1]).assign(&signal);
    let with_feats = net4.gru_step_array(&store4, &feats, &h).unwrap();
    assert!(max_abs_diff(&reference, &with_feats) > 1e-6);

    // zero the feature rows: the features no longer matter
    for name in ["gru.w_z1", "gru.w_r1", "gru.w_zeta1"] {
        let id = store4.id(name).unwrap();
        let cols = store4.get(id).shape()[1];
        let data = store4.get_mut(id).data_mut();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            if r % 4 != 0 {
                row.fill(0.0);
            }
        }
    }
    let zeroed = net4.gru_step_array(&store4, &feats, &h).unwrap();
    assert!(max_abs_diff(&reference, &zeroed) < 1e-12);
}
