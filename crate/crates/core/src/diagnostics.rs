//! Convergence diagnostics across chains.

use num_complex::Complex64;
use rustfft::FftPlanner;
use statrs::distribution::{ContinuousCDF, Normal};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Splits every chain into two halves, dropping the middle draw of odd-length chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    if w <= 0.0 || !w.is_finite() {
        return f64::NAN;
    }
    let b_over_n = var(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Classic split potential scale reduction factor; NaN for constant chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    rhat_basic(&split_chains(chains))
}

/// Replaces every draw by the normal score of its pooled rank (ties averaged).
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(f64, usize, usize)> = Vec::new();
    for (c, ch) in chains.iter().enumerate() {
        for (i, &v) in ch.iter().enumerate() {
            idx.push((v, c, i));
        }
    }
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = idx.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for k in &idx[i..=j] {
            out[k.1][k.2] = z;
        }
        i = j + 1;
    }
    out
}

fn median(x: &mut [f64]) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// Largest of the classic split, rank-normalized bulk and folded tail
/// split R-hat. NaN when any of them is undefined.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let classic = split_rhat(chains);
    let split = split_chains(chains);
    let bulk = rhat_basic(&rank_normalize(&split));
    let mut all: Vec<f64> = split.iter().flatten().copied().collect();
    let med = median(&mut all);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    if classic.is_nan() || bulk.is_nan() || tail.is_nan() {
        return f64::NAN;
    }
    classic.max(bulk).max(tail)
}

fn autocovariance(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = (0..len)
        .map(|i| Complex64::new(if i < n { x[i] - m } else { 0.0 }, 0.0))
        .collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for v in &mut buf {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    (0..n)
        .map(|t| buf[t].re / (len as f64 * n as f64))
        .collect()
}

fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let mut planner = FftPlanner::new();
    let acov: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| autocovariance(c, &mut planner))
        .collect();
    let nf = n as f64;
    let mean_var = acov.iter().map(|a| a[0]).sum::<f64>() / m as f64 * nf / (nf - 1.0);
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += var(&means);
    }
    if var_plus <= 0.0 {
        return f64::NAN;
    }
    let rho_at =
        |t: usize| 1.0 - (mean_var - acov.iter().map(|a| a[t]).sum::<f64>() / m as f64) / var_plus;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 1;
    while t < n - 3 && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t.saturating_sub(2);
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let ntot = (m * n) as f64;
    let tau = -1.0
        + 2.0 * rho[..=max_t].iter().sum::<f64>()
        + rho.get(max_t + 1).copied().unwrap_or(0.0).max(0.0);
    (ntot / tau).min(ntot * ntot.log10())
}

/// Bulk effective sample size on rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    ess_raw(&rank_normalize(&split_chains(chains)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(seed: u64, chains: usize, n: usize, shift: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|c| {
                (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e + shift(c)
                    })
                    .collect::<Vec<f64>>()
            })
            .collect()
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let ch = iid(1, 2, 500, |c| if c == 0 { 0.0 } else { 10.0 });
        assert!(split_rhat(&ch) > 3.0);
        assert!(rhat(&ch) > 3.0);
    }

    #[test]
    fn mixed_chains_have_rhat_near_one() {
        let ch = iid(2, 4, 1000, |_| 0.0);
        let r = rhat(&ch);
        assert!(r < 1.01 && r > 0.99, "{r}");
        let ess = ess_bulk(&ch);
        assert!(ess > 3000.0 && ess < 5000.0, "{ess}");
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let ch = vec![vec![1.0; 100], vec![1.0; 100]];
        assert!(split_rhat(&ch).is_nan());
        assert!(rhat(&ch).is_nan());
    }

    #[test]
    fn rank_normalization_is_symmetric() {
        let z = rank_normalize(&[vec![3.0, 1.0], vec![2.0, 2.0]]);
        assert!((z[0][0] + z[0][1]).abs() < 1e-12);
        assert_eq!(z[1][0], z[1][1]);
        assert!(z[1][0].abs() < 1e-12);
    }

    #[test]
    fn autocorrelated_chain_has_lower_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = ess_bulk(&ch);
        // AR(1) with phi = 0.9 gives N (1 - phi) / (1 + phi)
        assert!(ess > 120.0 && ess < 320.0, "{ess}");
    }
}
