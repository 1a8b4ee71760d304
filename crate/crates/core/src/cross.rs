//! Cross-wavelet spectra, phase-difference histograms and wavelet coherence.
//!
//! Pairs are ordered `(a, b)` with `a` the more oral channel, so a positive
//! phase difference means `a` leads `b` (antegrade) and a negative one means
//! retrograde propagation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::wavelet::{SyncSpectrum, WaveletError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrossError {
    #[error(transparent)]
    Grid(#[from] WaveletError),
    #[error("need at least {0} phase bins")]
    TooFewPhaseBins(usize),
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
    #[error("all weights are zero: the effective sample is empty")]
    EmptySample,
    #[error("value {0} lies outside the domain of the {1:?} transform")]
    Domain(f64, Transform),
    #[error("values and weights differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid clip range [{0}, {1}]")]
    InvalidClip(f64, f64),
    #[error("no frequency row {k} has any weight")]
    EmptyRow { k: usize },
    #[error("need at least two channels to form a pair")]
    TooFewChannels,
}

/// `M` uniform half-open phase bins covering `[-pi, pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBins {
    edges: Vec<f64>,
    centers: Vec<f64>,
}

impl PhaseBins {
    pub fn new(m: usize) -> Result<Self, CrossError> {
        if m < 1 {
            return Err(CrossError::TooFewPhaseBins(1));
        }
        let width = 2.0 * PI / m as f64;
        let mut edges: Vec<f64> = (0..=m).map(|i| -PI + width * i as f64).collect();
        edges[m] = PI;
        let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self { edges, centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Bin holding the angle `phi` after wrapping into `[-pi, pi)`.
    pub fn bin_of(&self, phi: f64) -> usize {
        let m = self.len();
        let mut p = (phi + PI).rem_euclid(2.0 * PI) - PI;
        if p >= PI {
            p -= 2.0 * PI;
        }
        let i = ((p + PI) / (2.0 * PI / m as f64)).floor() as usize;
        let mut i = i.min(m - 1);
        while i > 0 && p < self.edges[i] {
            i -= 1;
        }
        while i + 1 < m && p >= self.edges[i + 1] {
            i += 1;
        }
        i
    }

    /// Index of the bin centred on `-centre(m)`.
    pub fn mirror(&self, m: usize) -> usize {
        self.len() - 1 - m
    }
}

/// `v_a * conj(v_b)` for one ordered channel pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSpectrum {
    centers: Vec<f64>,
    rows: Vec<Vec<Complex64>>,
    fs: f64,
}

impl CrossSpectrum {
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bins(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.rows[k][t]
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.rows[k]
    }

    pub fn conj(&self) -> Self {
        Self {
            centers: self.centers.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|c| c.conj()).collect())
                .collect(),
            fs: self.fs,
        }
    }

    /// Amplitude-weighted circular mean of the phase in row `k`.
    pub fn mean_phase(&self, k: usize) -> f64 {
        self.rows[k].iter().sum::<Complex64>().arg()
    }
}

pub fn cross_wavelet(a: &SyncSpectrum, b: &SyncSpectrum) -> Result<CrossSpectrum, CrossError> {
    a.check_same_grid(b)?;
    let rows = a
        .rows()
        .iter()
        .zip(b.rows())
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y.conj()).collect())
        .collect();
    Ok(CrossSpectrum {
        centers: a.centers().to_vec(),
        rows,
        fs: a.fs(),
    })
}

/// Cross spectra of every adjacent pair `(c, c + 1)`.
pub fn adjacent_cross_spectra(spectra: &[SyncSpectrum]) -> Result<Vec<CrossSpectrum>, CrossError> {
    if spectra.len() < 2 {
        return Err(CrossError::TooFewChannels);
    }
    spectra
        .par_windows(2)
        .map(|w| cross_wavelet(&w[0], &w[1]))
        .collect()
}

/// Frequency by phase table. `values[k * M + m]` is NaN when the cell is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseHistogram {
    pub freq_centers: Vec<f64>,
    pub phase_centers: Vec<f64>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl PhaseHistogram {
    pub fn value(&self, k: usize, m: usize) -> f64 {
        self.values[k * self.phase_centers.len() + m]
    }

    pub fn count(&self, k: usize, m: usize) -> usize {
        self.counts[k * self.phase_centers.len() + m]
    }

    /// `(k, m)` of every empty cell.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let m = self.phase_centers.len();
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| (i / m, i % m))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }

    /// Phase centre with the largest value in row `k`.
    pub fn dominant_phase(&self, k: usize) -> Option<f64> {
        let m = self.phase_centers.len();
        (0..m)
            .filter(|&j| self.count(k, j) > 0)
            .max_by(|&i, &j| self.value(k, i).total_cmp(&self.value(k, j)))
            .map(|j| self.phase_centers[j])
    }
}

fn check_pairs(pairs: &[CrossSpectrum]) -> Result<&CrossSpectrum, CrossError> {
    let first = pairs.first().ok_or(CrossError::TooFewChannels)?;
    for p in &pairs[1..] {
        if p.centers != first.centers || p.fs != first.fs {
            return Err(
                WaveletError::GridMismatch("cross spectra use different grids".into()).into(),
            );
        }
    }
    Ok(first)
}

/// Mean `|v_ab|` per (frequency, phase) cell, pooling time samples of every
/// pair. Samples where `v_ab` is exactly zero have no phase and are skipped.
pub fn phase_histogram(
    pairs: &[CrossSpectrum],
    bins: &PhaseBins,
) -> Result<PhaseHistogram, CrossError> {
    let first = check_pairs(pairs)?;
    let (k_n, m_n) = (first.bins(), bins.len());
    let mut sums = vec![0.0; k_n * m_n];
    let mut counts = vec![0usize; k_n * m_n];
    for p in pairs {
        for k in 0..k_n {
            for z in p.row(k) {
                if *z == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let i = k * m_n + bins.bin_of(z.arg());
                sums[i] += z.norm();
                counts[i] += 1;
            }
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    Ok(PhaseHistogram {
        freq_centers: first.centers.clone(),
        phase_centers: bins.centers().to_vec(),
        values,
        counts,
    })
}

/// Apparent propagation velocity `d 2 pi f / phi` in cm/s; infinite at zero phase.
pub fn velocity(phase: f64, f: f64, d: f64) -> f64 {
    if phase == 0.0 {
        return f64::INFINITY;
    }
    d * 2.0 * PI * f / phase
}

/// Inverse velocity `phi / (d 2 pi f)` in s/cm.
pub fn pace(phase: f64, f: f64, d: f64) -> f64 {
    phase / (d * 2.0 * PI * f)
}

/// Phase difference implied by a pace.
pub fn phase_from_pace(pace: f64, f: f64, d: f64) -> f64 {
    pace * d * 2.0 * PI * f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    /// Gaussian in time with sigma = `cycles / f` seconds.
    Gaussian { cycles: f64 },
    /// Average over the whole record.
    FullRecord,
    /// No smoothing; coherence is identically one wherever defined.
    None,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Gaussian { cycles: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self, CrossError> {
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return Err(CrossError::InvalidClip(lo, hi));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, r2: f64) -> f64 {
        r2.clamp(self.lo, self.hi)
    }
}

impl Default for ClipRange {
    fn default() -> Self {
        Self { lo: 0.01, hi: 0.99 }
    }
}

/// Time-resolved coherence. The unclipped values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceField {
    centers: Vec<f64>,
    rows: Vec<Vec<f64>>,
    clip: ClipRange,
}

impl CoherenceField {
    /// Wraps precomputed values; each is clamped into `[0, 1]`.
    pub fn from_unclipped(centers: Vec<f64>, rows: Vec<Vec<f64>>, clip: ClipRange) -> Self {
        let rows = rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|v| {
                        if v.is_finite() {
                            v.clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            centers,
            rows,
            clip,
        }
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bins(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clip(&self) -> ClipRange {
        self.clip
    }

    pub fn unclipped(&self, t: usize, k: usize) -> f64 {
        self.rows[k][t]
    }

    pub fn unclipped_row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn clipped(&self, t: usize, k: usize) -> f64 {
        self.clip.apply(self.rows[k][t])
    }
}

/// Gaussian smoother over the time axis with truncation at four sigma and
/// renormalization where the kernel runs off the record.
struct GaussianRow {
    kernel: Vec<f64>,
    half: usize,
}

impl GaussianRow {
    fn new(sigma_samples: f64, n: usize) -> Self {
        let half = ((4.0 * sigma_samples).ceil() as usize).min(n - 1);
        let kernel = (0..=2 * half)
            .map(|j| {
                let d = j as f64 - half as f64;
                if sigma_samples > 0.0 {
                    (-0.5 * d * d / (sigma_samples * sigma_samples)).exp()
                } else if d == 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self { kernel, half }
    }

    /// Smooths the real and imaginary parts of `x` independently.
    fn apply(&self, x: &[Complex64], planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
        let n = x.len();
        let h = self.half;
        let norm = self.edge_weights(n);
        if h == 0 {
            return x.to_vec();
        }
        let len = (n + 2 * h).next_power_of_two();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let zero = Complex64::new(0.0, 0.0);
        let mut a: Vec<Complex64> = x
            .iter()
            .copied()
            .chain(std::iter::repeat(zero).take(len - n))
            .collect();
        let mut g: Vec<Complex64> = self
            .kernel
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .chain(std::iter::repeat(zero).take(len - self.kernel.len()))
            .collect();
        fwd.process(&mut a);
        fwd.process(&mut g);
        for (u, v) in a.iter_mut().zip(&g) {
            *u *= v;
        }
        inv.process(&mut a);
        let scale = 1.0 / len as f64;
        (0..n).map(|t| a[t + h] * (scale / norm[t])).collect()
    }

    /// Sum of kernel weights that fall inside the record at each time.
    fn edge_weights(&self, n: usize) -> Vec<f64> {
        let h = self.half as isize;
        let mut prefix = vec![0.0; self.kernel.len() + 1];
        for (i, v) in self.kernel.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v;
        }
        (0..n as isize)
            .map(|t| {
                // offsets j in [-h, h] with 0 <= t - j < n
                let lo = (-h).max(t - (n as isize - 1));
                let hi = h.min(t);
                prefix[(hi + h + 1) as usize] - prefix[(lo + h) as usize]
            })
            .collect()
    }
}

/// Time-smoothed coherence `|<v_ab>|^2 / (<|v_a|^2> <|v_b|^2>)` per frequency row.
pub fn coherence_field(
    a: &SyncSpectrum,
    b: &SyncSpectrum,
    smoothing: Smoothing,
    clip: ClipRange,
) -> Result<CoherenceField, CrossError> {
    a.check_same_grid(b)?;
    let n = a.len();
    let fs = a.fs();
    let rows: Vec<Vec<f64>> = (0..a.bins())
        .into_par_iter()
        .map(|k| {
            let (ra, rb) = (a.row(k), b.row(k));
            let cross: Vec<Complex64> = ra.iter().zip(rb).map(|(x, y)| x * y.conj()).collect();
            let power: Vec<Complex64> = ra
                .iter()
                .zip(rb)
                .map(|(x, y)| Complex64::new(x.norm_sqr(), y.norm_sqr()))
                .collect();
            let (sc, sp) = match smoothing {
                Smoothing::None => (cross, power),
                Smoothing::FullRecord => {
                    let mc = cross.iter().sum::<Complex64>() / n as f64;
                    let mp = power.iter().sum::<Complex64>() / n as f64;
                    (vec![mc; n], vec![mp; n])
                }
                Smoothing::Gaussian { cycles } => {
                    let sigma = cycles / a.centers()[k] * fs;
                    let g = GaussianRow::new(sigma, n);
                    let mut planner = FftPlanner::new();
                    (g.apply(&cross, &mut planner), g.apply(&power, &mut planner))
                }
            };
            sc.iter()
                .zip(&sp)
                .map(|(c, p)| {
                    let den = p.re * p.im;
                    if den > 0.0 {
                        (c.norm_sqr() / den).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(CoherenceField {
        centers: a.centers().to_vec(),
        rows,
        clip,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
    Logit,
}

impl Transform {
    pub fn forward(self, x: f64) -> Result<f64, CrossError> {
        match self {
            Transform::Identity if x.is_finite() => Ok(x),
            Transform::Log if x > 0.0 && x.is_finite() => Ok(x.ln()),
            Transform::Logit if x > 0.0 && x < 1.0 => Ok((x / (1.0 - x)).ln()),
            _ => Err(CrossError::Domain(x, self)),
        }
    }

    pub fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::Identity => y,
            Transform::Log => y.exp(),
            Transform::Logit => 1.0 / (1.0 + (-y).exp()),
        }
    }
}

/// `g^-1(sum p g(alpha) / sum p)`.
pub fn weighted_transformed_mean(
    alpha: &[f64],
    p: &[f64],
    g: Transform,
) -> Result<f64, CrossError> {
    if alpha.len() != p.len() {
        return Err(CrossError::LengthMismatch(alpha.len(), p.len()));
    }
    if p.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(CrossError::InvalidWeights);
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(CrossError::EmptySample);
    }
    let mut acc = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&a, &w) in alpha.iter().zip(p) {
        if w > 0.0 {
            acc += w * g.forward(a)?;
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    Ok(g.inverse(acc / total).clamp(lo, hi))
}

fn check_fields(fields: &[(CoherenceField, CrossSpectrum)]) -> Result<(usize, &[f64]), CrossError> {
    let (r0, c0) = fields.first().ok_or(CrossError::TooFewChannels)?;
    for (r, c) in fields {
        if r.centers != c0.centers || c.centers != c0.centers || r.len() != c.len() {
            return Err(WaveletError::GridMismatch(
                "coherence and cross spectrum grids differ".into(),
            )
            .into());
        }
    }
    Ok((r0.bins(), &c0.centers))
}

/// Logit-averaged clipped coherence per frequency, weighted by `|v_ab|^2`
/// and pooled over every (pair, time) sample.
pub fn global_coherence(
    fields: &[(CoherenceField, CrossSpectrum)],
) -> Result<Vec<f64>, CrossError> {
    let (k_n, _) = check_fields(fields)?;
    (0..k_n)
        .map(|k| {
            let mut alpha = Vec::new();
            let mut p = Vec::new();
            for (r, c) in fields {
                for (t, z) in c.row(k).iter().enumerate() {
                    alpha.push(r.clipped(t, k));
                    p.push(z.norm_sqr());
                }
            }
            weighted_transformed_mean(&alpha, &p, Transform::Logit).map_err(|e| match e {
                CrossError::EmptySample => CrossError::EmptyRow { k },
                e => e,
            })
        })
        .collect()
}

/// Logit-averaged clipped coherence per (frequency, phase) cell, with cells
/// assigned by the phase of `v_ab`. Empty cells hold NaN.
pub fn coherence_phase_histogram(
    fields: &[(CoherenceField, CrossSpectrum)],
    bins: &PhaseBins,
) -> Result<PhaseHistogram, CrossError> {
    let (k_n, centers) = check_fields(fields)?;
    let m_n = bins.len();
    let mut num = vec![0.0; k_n * m_n];
    let mut den = vec![0.0; k_n * m_n];
    let mut counts = vec![0usize; k_n * m_n];
    let mut lo = vec![f64::INFINITY; k_n * m_n];
    let mut hi = vec![f64::NEG_INFINITY; k_n * m_n];
    for (r, c) in fields {
        for k in 0..k_n {
            for (t, z) in c.row(k).iter().enumerate() {
                let w = z.norm_sqr();
                if w == 0.0 {
                    continue;
                }
                let i = k * m_n + bins.bin_of(z.arg());
                let a = r.clipped(t, k);
                num[i] += w * Transform::Logit.forward(a)?;
                den[i] += w;
                lo[i] = lo[i].min(a);
                hi[i] = hi[i].max(a);
                counts[i] += 1;
            }
        }
    }
    let values = (0..num.len())
        .map(|i| {
            if den[i] > 0.0 {
                Transform::Logit
                    .inverse(num[i] / den[i])
                    .clamp(lo[i], hi[i])
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(PhaseHistogram {
        freq_centers: centers.to_vec(),
        phase_centers: bins.centers().to_vec(),
        values,
        counts,
    })
}
