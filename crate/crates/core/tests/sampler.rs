use std::time::Instant;

use statrs::distribution::{ContinuousCDF, Normal};
use wavegp::diagnostics::rhat;
use wavegp::sampler::{nuts_run, ChainConfig, LogDensity};

struct StdNormal(usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = -xi;
            lp -= 0.5 * xi * xi;
        }
        lp
    }
}

/// Bivariate normal with unit variances and correlation `rho`.
struct Correlated(f64);

impl LogDensity for Correlated {
    fn dim(&self) -> usize {
        2
    }
    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let r = self.0;
        let d = 1.0 - r * r;
        g[0] = -(x[0] - r * x[1]) / d;
        g[1] = -(x[1] - r * x[0]) / d;
        -0.5 * (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1]) / d
    }
}

fn coordinate(chains: &[wavegp::sampler::Chain], k: usize) -> Vec<Vec<f64>> {
    chains
        .iter()
        .map(|c| c.draws.iter().map(|d| d[k]).collect())
        .collect()
}

#[test]
fn standard_normal_10d() {
    let start = Instant::now();
    let cfg = ChainConfig {
        seed: 2024,
        ..Default::default()
    };
    let chains = nuts_run(&StdNormal(10), &cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(chains.iter().map(|c| c.divergences()).sum::<usize>(), 0);
    for k in 0..10 {
        let ch = coordinate(&chains, k);
        let all: Vec<f64> = ch.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() as f64 - 1.0);
        assert!(mean.abs() < 0.1, "coordinate {k}: mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "coordinate {k}: variance {var}");
        let r = rhat(&ch);
        assert!(r < 1.01, "coordinate {k}: rhat {r}");
    }
}

#[test]
fn one_dimensional_normal_passes_ks() {
    let cfg = ChainConfig {
        chains: 1,
        warmup: 500,
        draws: 2000,
        adapt_delta: 0.8,
        seed: 7,
        ..Default::default()
    };
    let chains = nuts_run(&StdNormal(1), &cfg).unwrap();
    let mut x: Vec<f64> = chains[0].draws.iter().map(|d| d[0]).collect();
    x.sort_by(f64::total_cmp);
    let n = Normal::standard();
    let len = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = n.cdf(v);
            (f - i as f64 / len)
                .abs()
                .max(((i + 1) as f64 / len - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 0.05, "KS distance {d}");
}

#[test]
fn correlated_normal_recovers_correlation() {
    let cfg = ChainConfig {
        warmup: 500,
        draws: 1000,
        seed: 11,
        ..Default::default()
    };
    let chains = nuts_run(&Correlated(0.9), &cfg).unwrap();
    let draws: Vec<&Vec<f64>> = chains.iter().flat_map(|c| &c.draws).collect();
    let n = draws.len() as f64;
    let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n;
    let m1 = draws.iter().map(|d| d[1]).sum::<f64>() / n;
    let (mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0);
    for d in &draws {
        s00 += (d[0] - m0).powi(2);
        s11 += (d[1] - m1).powi(2);
        s01 += (d[0] - m0) * (d[1] - m1);
    }
    let corr = s01 / (s00 * s11).sqrt();
    assert!((corr - 0.9).abs() < 0.05, "correlation {corr}");
}
