//! Wall-clock comparison of the spectral convolution against the dense
//! Chebyshev oracle as the node count grows.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::FourierBasis;
use crate::nn::{cheb_conv_dense, spec_conv, SpecConvFilter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    pub cheb_order: usize,
    pub channels: usize,
    /// Calls averaged into one timing.
    pub calls: usize,
    /// Independent timings; the median is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            cheb_order: 3,
            channels: 8,
            calls: 100,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    /// Seconds per call.
    pub spec_conv: f64,
    pub dense: f64,
    /// Median ratio to the previous row, absent on the first.
    pub spec_ratio: Option<f64>,
    pub dense_ratio: Option<f64>,
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

fn time_per_call<F: FnMut() -> Result<Array2<f64>>>(calls: usize, mut f: F) -> Result<f64> {
    let t = Instant::now();
    for _ in 0..calls {
        std::hint::black_box(f()?);
    }
    Ok(t.elapsed().as_secs_f64() / calls as f64)
}

/// Times both convolutions on cycle graphs of the given sizes. Sizes must be
/// strictly ascending.
///
/// Every repeat times all sizes back to back, so slow drift of the machine
/// hits neighbouring sizes alike; ratios are medians of per-repeat ratios.
pub fn bench_specconv(sizes: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bench sizes must be non-empty and strictly ascending, got {sizes:?}"
        )));
    }
    if cfg.calls == 0 || cfg.repeats == 0 {
        return Err(Error::Config(
            "bench calls and repeats must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let coeffs = (0..cfg.cheb_order)
        .map(|_| Array2::from_shape_fn((c, c), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let filter = SpecConvFilter::new(coeffs)?;
    let mut cases = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let basis = FourierBasis::cycle(n)?;
        let x = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
        let xt = basis.eigvecs.t().dot(&x);
        // warm caches and the allocator once
        std::hint::black_box(spec_conv(&filter, &basis, &xt)?);
        std::hint::black_box(cheb_conv_dense(&filter, &basis, &x)?);
        cases.push((basis, x, xt));
    }
    let mut spec = vec![Vec::with_capacity(cfg.repeats); sizes.len()];
    let mut dense = vec![Vec::with_capacity(cfg.repeats); sizes.len()];
    for _ in 0..cfg.repeats {
        for (i, (basis, x, xt)) in cases.iter().enumerate() {
            spec[i].push(time_per_call(cfg.calls, || spec_conv(&filter, basis, xt))?);
            dense[i].push(time_per_call(cfg.calls, || {
                cheb_conv_dense(&filter, basis, x)
            })?);
        }
    }
    let ratio = |t: &[Vec<f64>], i: usize| {
        (i > 0).then(|| median(t[i].iter().zip(&t[i - 1]).map(|(a, b)| a / b).collect()))
    };
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| BenchRow {
            n,
            spec_conv: median(spec[i].clone()),
            dense: median(dense[i].clone()),
            spec_ratio: ratio(&spec, i),
            dense_ratio: ratio(&dense, i),
        })
        .collect())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |r| format!("{r:.4}"));
    let mut out =
        String::from("n,spec_conv_seconds,dense_seconds,dense_over_spec,spec_ratio,dense_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.3},{},{}\n",
            r.n,
            r.spec_conv,
            r.dense,
            r.dense / r.spec_conv,
            opt(r.spec_ratio),
            opt(r.dense_ratio)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_size() {
        let cfg = BenchConfig {
            calls: 2,
            repeats: 1,
            ..Default::default()
        };
        let rows = bench_specconv(&[8, 16, 32], &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].spec_ratio.is_none() && rows[2].dense_ratio.is_some());
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn rejects_unsorted_sizes() {
        let cfg = BenchConfig::default();
        assert!(matches!(
            bench_specconv(&[16, 8], &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(bench_specconv(&[], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
