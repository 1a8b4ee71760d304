//! Morlet continuous wavelet transform, synchrosqueezing onto log-spaced
//! frequency bins, and the global wavelet power spectrum.
//!
//! The transform is evaluated in the frequency domain: the mean-removed
//! signal is zero padded to the next power of two, multiplied by the scaled
//! analytic Morlet `sqrt(s) * Psi(s * omega)` and inverted. Synchrosqueezing
//! then moves each coefficient `w(t, s) / sqrt(s)` into the frequency bin that
//! contains its instantaneous frequency, the time derivative of the unwrapped
//! phase divided by `2 * pi`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Intrinsic Morlet frequency in radians.
pub const DEFAULT_OMEGA0: f64 = 6.0;

/// Scale density used by [`ScaleSet::covering`].
pub const SCALES_PER_OCTAVE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveletError {
    #[error("sampling rate must be positive and finite, got {0}")]
    InvalidSamplingRate(f64),
    #[error("sensor spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("a recording needs at least one channel")]
    NoChannels,
    #[error(
        "channel {channel} has {len} samples; every channel needs the same length of at least 2"
    )]
    BadLength { channel: usize, len: usize },
    #[error("non-finite sample in channel {channel} at index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("invalid scales: {0}")]
    InvalidScales(String),
    #[error("invalid frequency bins: {0}")]
    InvalidBins(String),
    #[error("omega0 must be positive, got {0}")]
    InvalidOmega0(f64),
    #[error("spectra do not share a grid: {0}")]
    GridMismatch(String),
}

/// Multichannel pressure recording, channels ordered oral to aboral.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    samples: Vec<Vec<f64>>,
    fs: f64,
    spacing: f64,
}

impl Recording {
    /// `samples[c][t]` is channel `c` at time index `t`.
    pub fn new(samples: Vec<Vec<f64>>, fs: f64, spacing: f64) -> Result<Self, WaveletError> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(WaveletError::InvalidSamplingRate(fs));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(WaveletError::InvalidSpacing(spacing));
        }
        if samples.is_empty() {
            return Err(WaveletError::NoChannels);
        }
        let n = samples[0].len();
        for (channel, row) in samples.iter().enumerate() {
            if row.len() < 2 || row.len() != n {
                return Err(WaveletError::BadLength {
                    channel,
                    len: row.len(),
                });
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(WaveletError::NonFinite { channel, index });
            }
        }
        Ok(Self {
            samples,
            fs,
            spacing,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Inter-sensor distance in cm.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c]
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }
}

/// Ascending, logarithmically spaced wavelet scales in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    scales: Vec<f64>,
}

impl ScaleSet {
    pub fn new(scales: Vec<f64>) -> Result<Self, WaveletError> {
        if scales.is_empty() {
            return Err(WaveletError::InvalidScales("empty".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(WaveletError::InvalidScales(
                "scales must be positive and finite".into(),
            ));
        }
        if scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(WaveletError::InvalidScales(
                "scales must be strictly increasing".into(),
            ));
        }
        if scales.len() > 2 {
            let r0 = (scales[1] / scales[0]).ln();
            let bad = scales
                .windows(2)
                .any(|w| ((w[1] / w[0]).ln() - r0).abs() > 1e-9 * r0.abs().max(1.0));
            if bad {
                return Err(WaveletError::InvalidScales(
                    "ratio between scales is not constant".into(),
                ));
            }
        }
        Ok(Self { scales })
    }

    /// `per_octave` scales per doubling from `s_min` up to at least `s_max`.
    pub fn log_spaced(s_min: f64, s_max: f64, per_octave: usize) -> Result<Self, WaveletError> {
        if !(s_min > 0.0 && s_max > s_min && per_octave > 0) {
            return Err(WaveletError::InvalidScales(format!(
                "need 0 < s_min < s_max, got {s_min}, {s_max}"
            )));
        }
        let octaves = (s_max / s_min).log2();
        let count = (octaves * per_octave as f64 - 1e-9).ceil() as usize + 1;
        let step = 1.0 / per_octave as f64;
        let scales = (0..count)
            .map(|j| s_min * (j as f64 * step).exp2())
            .collect();
        Self::new(scales)
    }

    /// Scales whose centre frequencies `omega0 / (2 pi s)` reach one octave
    /// beyond both ends of `bins`.
    pub fn covering(bins: &FrequencyBins, omega0: f64) -> Result<Self, WaveletError> {
        let f_hi = 2.0 * bins.edges()[bins.len()];
        let f_lo = 0.5 * bins.edges()[0];
        Self::log_spaced(
            omega0 / (2.0 * PI * f_hi),
            omega0 / (2.0 * PI * f_lo),
            SCALES_PER_OCTAVE,
        )
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// `K` equally-and-logarithmically spaced half-open frequency bins (Hz).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBins {
    edges: Vec<f64>,
    centers: Vec<f64>,
    log_step: f64,
}

impl FrequencyBins {
    pub fn log_spaced(f_lo: f64, f_hi: f64, k: usize) -> Result<Self, WaveletError> {
        if !(f_lo > 0.0 && f_hi > f_lo && f_hi.is_finite()) || k == 0 {
            return Err(WaveletError::InvalidBins(format!(
                "need 0 < f_lo < f_hi and k >= 1, got {f_lo}, {f_hi}, {k}"
            )));
        }
        let (a, b) = (f_lo.ln(), f_hi.ln());
        let step = (b - a) / k as f64;
        let mut edges: Vec<f64> = (0..=k).map(|i| (a + step * i as f64).exp()).collect();
        edges[0] = f_lo;
        edges[k] = f_hi;
        Self::from_edges(edges)
    }

    /// Construct from cycles-per-minute limits.
    pub fn log_spaced_cpm(lo_cpm: f64, hi_cpm: f64, k: usize) -> Result<Self, WaveletError> {
        Self::log_spaced(lo_cpm / 60.0, hi_cpm / 60.0, k)
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self, WaveletError> {
        if edges.len() < 2 {
            return Err(WaveletError::InvalidBins("need at least two edges".into()));
        }
        if edges.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(WaveletError::InvalidBins(
                "edges must be positive and finite".into(),
            ));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(WaveletError::InvalidBins(
                "edges must be strictly increasing".into(),
            ));
        }
        let log_step = (edges[1] / edges[0]).ln();
        if edges
            .windows(2)
            .any(|w| ((w[1].ln() - w[0].ln()) - log_step).abs() > 1e-9 * log_step)
        {
            return Err(WaveletError::InvalidBins(
                "edges are not log-equally spaced".into(),
            ));
        }
        let centers = edges
            .windows(2)
            .map(|w| (0.5 * (w[0].ln() + w[1].ln())).exp())
            .collect();
        Ok(Self {
            edges,
            centers,
            log_step,
        })
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

    /// Index of the bin `[edge_k, edge_k+1)` holding `f`.
    pub fn bin_of(&self, f: f64) -> Option<usize> {
        let k = self.len();
        if !(f >= self.edges[0] && f < self.edges[k]) {
            return None;
        }
        let guess = ((f.ln() - self.edges[0].ln()) / self.log_step).floor();
        let mut i = (guess.max(0.0) as usize).min(k - 1);
        // the log estimate can be off by one at an edge
        while i > 0 && f < self.edges[i] {
            i -= 1;
        }
        while i + 1 < k && f >= self.edges[i + 1] {
            i += 1;
        }
        Some(i)
    }
}

/// Complex CWT coefficients and time-unwrapped phase, stored per scale.
#[derive(Debug, Clone)]
pub struct WaveletCoefficients {
    scales: ScaleSet,
    /// `w[j][t]` for scale index `j`.
    w: Vec<Vec<Complex64>>,
    phase: Vec<Vec<f64>>,
    fs: f64,
}

impl WaveletCoefficients {
    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Coefficient at time index `t` and scale index `j`.
    pub fn w(&self, t: usize, j: usize) -> Complex64 {
        self.w[j][t]
    }

    pub fn scale_row(&self, j: usize) -> &[Complex64] {
        &self.w[j]
    }

    pub fn phase_row(&self, j: usize) -> &[f64] {
        &self.phase[j]
    }

    /// Instantaneous frequency in Hz at every time for scale index `j`:
    /// central differences of the unwrapped phase, one-sided at both ends.
    pub fn instantaneous_frequency(&self, j: usize) -> Vec<f64> {
        let phi = &self.phase[j];
        let n = phi.len();
        let scale = self.fs / (2.0 * PI);
        (0..n)
            .map(|t| {
                let d = if t == 0 {
                    phi[1] - phi[0]
                } else if t == n - 1 {
                    phi[n - 1] - phi[n - 2]
                } else {
                    0.5 * (phi[t + 1] - phi[t - 1])
                };
                d * scale
            })
            .collect()
    }
}

/// Synchrosqueezed coefficients `v(t, f_k)`, stored per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncSpectrum {
    centers: Vec<f64>,
    rows: Vec<Vec<Complex64>>,
    fs: f64,
}

impl SyncSpectrum {
    pub fn from_rows(centers: Vec<f64>, rows: Vec<Vec<Complex64>>, fs: f64) -> Self {
        assert_eq!(centers.len(), rows.len(), "one row per bin centre");
        Self { centers, rows, fs }
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

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.rows[k][t]
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.rows[k]
    }

    pub fn rows(&self) -> &[Vec<Complex64>] {
        &self.rows
    }

    /// Fails unless `other` has the same bins, length and sampling rate.
    pub fn check_same_grid(&self, other: &SyncSpectrum) -> Result<(), WaveletError> {
        if self.centers != other.centers {
            return Err(WaveletError::GridMismatch("frequency bins differ".into()));
        }
        if self.len() != other.len() {
            return Err(WaveletError::GridMismatch(format!(
                "lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        if self.fs != other.fs {
            return Err(WaveletError::GridMismatch("sampling rates differ".into()));
        }
        Ok(())
    }
}

/// Time-averaged squared amplitude per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPowerSpectrum {
    pub centers: Vec<f64>,
    pub power: Vec<f64>,
    pub amplitude: Vec<f64>,
}

/// Frequency-domain analytic Morlet, `pi^(-1/4) exp(-(s_omega - omega0)^2 / 2)`
/// for positive `s_omega` and zero otherwise.
pub fn morlet_fourier(s_omega: f64, omega0: f64) -> f64 {
    if s_omega > 0.0 {
        PI.powf(-0.25) * (-0.5 * (s_omega - omega0).powi(2)).exp()
    } else {
        0.0
    }
}

/// Angular frequency of each FFT bin for length `n` at rate `fs`.
fn angular_frequencies(n: usize, fs: f64) -> Vec<f64> {
    let df = 2.0 * PI * fs / n as f64;
    (0..n)
        .map(|k| {
            if k <= n / 2 {
                k as f64 * df
            } else {
                (k as f64 - n as f64) * df
            }
        })
        .collect()
}

/// Unwraps a sequence of angles so consecutive values differ by at most pi.
pub fn unwrap_phase(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut acc = match angles.first() {
        Some(&a) => a,
        None => return out,
    };
    out.push(acc);
    for w in angles.windows(2) {
        let mut d = w[1] - w[0];
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        acc += d;
        out.push(acc);
    }
    out
}

/// Continuous wavelet transform of one channel.
pub fn cwt(x: &[f64], scales: &ScaleSet, fs: f64) -> Result<WaveletCoefficients, WaveletError> {
    cwt_with_omega0(x, scales, fs, DEFAULT_OMEGA0)
}

pub fn cwt_with_omega0(
    x: &[f64],
    scales: &ScaleSet,
    fs: f64,
    omega0: f64,
) -> Result<WaveletCoefficients, WaveletError> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(WaveletError::InvalidSamplingRate(fs));
    }
    if !(omega0.is_finite() && omega0 > 0.0) {
        return Err(WaveletError::InvalidOmega0(omega0));
    }
    if x.len() < 2 {
        return Err(WaveletError::BadLength {
            channel: 0,
            len: x.len(),
        });
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(WaveletError::NonFinite { channel: 0, index });
    }
    let n = x.len();
    let npad = n.next_power_of_two();
    let mean = x.iter().sum::<f64>() / n as f64;

    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(npad);
    let inverse: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(npad);

    let mut spectrum: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)).take(npad - n))
        .collect();
    forward.process(&mut spectrum);
    let omega = angular_frequencies(npad, fs);
    let norm = 1.0 / npad as f64;

    let w: Vec<Vec<Complex64>> = scales
        .scales()
        .par_iter()
        .map(|&s| {
            let root = s.sqrt();
            let mut buf: Vec<Complex64> = spectrum
                .iter()
                .zip(&omega)
                .map(|(&xk, &om)| xk * (root * morlet_fourier(s * om, omega0)))
                .collect();
            inverse.process(&mut buf);
            buf.truncate(n);
            for c in &mut buf {
                *c *= norm;
            }
            buf
        })
        .collect();

    let phase = w
        .iter()
        .map(|row| unwrap_phase(&row.iter().map(|c| c.arg()).collect::<Vec<_>>()))
        .collect();

    Ok(WaveletCoefficients {
        scales: scales.clone(),
        w,
        phase,
        fs,
    })
}

/// Reassigns `w(t, s) / sqrt(s)` to the bin containing its instantaneous
/// frequency. Coefficients whose frequency lies outside every bin are dropped.
pub fn synchrosqueeze(w: &WaveletCoefficients, bins: &FrequencyBins) -> SyncSpectrum {
    let n = w.len();
    let mut rows = vec![vec![Complex64::new(0.0, 0.0); n]; bins.len()];
    for (j, &s) in w.scales().scales().iter().enumerate() {
        let inv_root = 1.0 / s.sqrt();
        let row = w.scale_row(j);
        for (t, f) in w.instantaneous_frequency(j).into_iter().enumerate() {
            if let Some(k) = bins.bin_of(f) {
                rows[k][t] += row[t] * inv_root;
            }
        }
    }
    SyncSpectrum {
        centers: bins.centers().to_vec(),
        rows,
        fs: w.fs(),
    }
}

/// CWT followed by synchrosqueezing for every channel of a recording.
pub fn sync_spectra(
    rec: &Recording,
    bins: &FrequencyBins,
    omega0: f64,
) -> Result<Vec<SyncSpectrum>, WaveletError> {
    let scales = ScaleSet::covering(bins, omega0)?;
    rec.samples()
        .par_iter()
        .map(|x| cwt_with_omega0(x, &scales, rec.fs(), omega0).map(|w| synchrosqueeze(&w, bins)))
        .collect()
}

/// Mean of `|v(t, f_k)|^2` over every (channel, time) pair.
pub fn global_power(spectra: &[SyncSpectrum]) -> Result<GlobalPowerSpectrum, WaveletError> {
    let first = spectra
        .first()
        .ok_or_else(|| WaveletError::GridMismatch("no spectra given".into()))?;
    for other in &spectra[1..] {
        first.check_same_grid(other)?;
    }
    let total = (spectra.len() * first.len()) as f64;
    let power: Vec<f64> = (0..first.bins())
        .map(|k| {
            let per_channel: Vec<f64> = spectra
                .iter()
                .map(|v| v.row(k).iter().map(|c| c.norm_sqr()).sum())
                .collect();
            per_channel.iter().sum::<f64>() / total
        })
        .collect();
    let amplitude = power.iter().map(|p| p.sqrt()).collect();
    Ok(GlobalPowerSpectrum {
        centers: first.centers().to_vec(),
        power,
        amplitude,
    })
}
