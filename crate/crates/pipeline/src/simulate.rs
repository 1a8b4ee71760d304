//! Synthetic multichannel recordings with propagating bursts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wavegp::wavelet::{Recording, WaveletError};

use crate::ingest::ObservationMeta;

/// Amplitude multiplier applied to bursts of one (region, meal) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multiplier {
    pub region: String,
    pub meal: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub subjects: usize,
    pub regions: Vec<String>,
    pub meals: Vec<String>,
    pub burst_cpm: f64,
    /// Peak burst amplitude (mmHg).
    pub amplitude: f64,
    /// Fraction of each recurrence period occupied by a burst; 1 is continuous.
    pub duty: f64,
    /// Seconds between burst onsets.
    pub recurrence_s: f64,
    /// Inverse velocity (s/cm); positive travels from channel 0 aborally.
    pub pace: f64,
    pub multipliers: Vec<Multiplier>,
    /// Standard deviation of the per-subject log gain.
    pub subject_sd: f64,
    /// Standard deviation of the per-observation log gain.
    pub obs_sd: f64,
    /// White-noise standard deviation (mmHg).
    pub noise: f64,
    pub duration_s: f64,
    pub fs: f64,
    /// Sensor spacing (cm).
    pub spacing: f64,
    /// Channel counts are drawn per (subject, region) from this inclusive range.
    pub channels: [usize; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 12,
            regions: vec!["descending".into(), "sigmoid".into()],
            meals: vec!["0".into(), "1".into()],
            burst_cpm: 3.5,
            amplitude: 10.0,
            duty: 0.5,
            recurrence_s: 270.0,
            pace: -1.0,
            multipliers: vec![Multiplier {
                region: "sigmoid".into(),
                meal: "1".into(),
                factor: 1.5,
            }],
            subject_sd: 0.1,
            obs_sd: 0.2,
            noise: 2.0,
            duration_s: 1200.0,
            fs: 2.0,
            spacing: 1.0,
            channels: [4, 6],
            seed: 7,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimulateError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Recording(#[from] WaveletError),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::Invalid(m));
        if self.subjects == 0 || self.regions.is_empty() || self.meals.is_empty() {
            return bad("need at least one subject, region and meal state".into());
        }
        if !(self.fs > 0.0 && self.duration_s > 0.0 && self.spacing > 0.0) {
            return bad("fs, duration and spacing must be positive".into());
        }
        if (self.duration_s * self.fs) < 2.0 {
            return bad("recording shorter than two samples".into());
        }
        if !(self.burst_cpm > 0.0 && self.burst_cpm / 60.0 < self.fs / 2.0) {
            return bad(format!(
                "burst frequency {} cpm must lie below the Nyquist frequency",
                self.burst_cpm
            ));
        }
        if !(self.duty > 0.0 && self.duty <= 1.0 && self.recurrence_s > 0.0) {
            return bad("duty must lie in (0, 1] and recurrence must be positive".into());
        }
        if self.channels[0] == 0 || self.channels[0] > self.channels[1] {
            return bad(format!(
                "channel range {:?} must be positive and ordered",
                self.channels
            ));
        }
        let lag = self.pace.abs() * self.spacing * (self.channels[1] - 1) as f64;
        if lag >= self.duration_s {
            return bad(format!(
                "propagation lag {lag} s across the catheter exceeds the recording"
            ));
        }
        if self.noise < 0.0 || self.subject_sd < 0.0 || self.obs_sd < 0.0 || self.amplitude < 0.0 {
            return bad("amplitude, noise, subject_sd and obs_sd must be non-negative".into());
        }
        if self.multipliers.iter().any(|m| !(m.factor > 0.0)) {
            return bad("multipliers must be positive".into());
        }
        Ok(())
    }

    fn multiplier(&self, region: &str, meal: &str) -> f64 {
        self.multipliers
            .iter()
            .filter(|m| m.region == region && m.meal == meal)
            .map(|m| m.factor)
            .product()
    }

    /// Burst envelope at time `t` for bursts starting at `offset`.
    fn envelope(&self, t: f64, offset: f64) -> f64 {
        if self.duty >= 1.0 {
            return 1.0;
        }
        let d = self.duty * self.recurrence_s;
        let u = (t - offset).rem_euclid(self.recurrence_s);
        if u < d {
            (PI * u / d).sin().powi(2)
        } else {
            0.0
        }
    }
}

/// One synthetic observation.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub recording: Recording,
    pub meta: ObservationMeta,
}

/// Generates one recording per (subject, region, meal), ordered in that
/// nesting. Channel `c` sees the burst signal shifted by `c * spacing * pace`;
/// bursts and noise share a per-subject and a per-observation gain.
pub fn simulate(spec: &SynthSpec) -> Result<Vec<Simulated>, SimulateError> {
    spec.validate()?;
    let n = (spec.duration_s * spec.fs).floor() as usize;
    let f0 = spec.burst_cpm / 60.0;
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let mut subj_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for s in 0..spec.subjects {
        let subj = format!("S{:02}", s + 1);
        let subject_gain = (spec.subject_sd * white.sample(&mut subj_rng)).exp();
        for region in &spec.regions {
            let nchan = subj_rng.random_range(spec.channels[0]..=spec.channels[1]);
            for meal in &spec.meals {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(1 + out.len() as u64);
                let phase0 = rng.random_range(-PI..PI);
                let offset = rng.random_range(0.0..spec.recurrence_s);
                let level = subject_gain * (spec.obs_sd * white.sample(&mut rng)).exp();
                let gain = spec.amplitude * spec.multiplier(region, meal);
                let samples: Vec<Vec<f64>> = (0..nchan)
                    .map(|c| {
                        let shift = c as f64 * spec.spacing * spec.pace;
                        (0..n)
                            .map(|i| {
                                let t = i as f64 / spec.fs - shift;
                                let burst = gain
                                    * spec.envelope(t, offset)
                                    * (2.0 * PI * f0 * t + phase0).sin();
                                let noise = if spec.noise > 0.0 {
                                    spec.noise * white.sample(&mut rng)
                                } else {
                                    0.0
                                };
                                level * (burst + noise)
                            })
                            .collect()
                    })
                    .collect();
                let recording = Recording::new(samples, spec.fs, spec.spacing)?;
                let meta = ObservationMeta {
                    id: format!("{subj}-{region}-{meal}"),
                    fields: vec![
                        ("subj".into(), subj.clone()),
                        ("reg".into(), region.clone()),
                        ("meal".into(), meal.clone()),
                    ],
                    fs: spec.fs,
                    spacing: spec.spacing,
                    nchan,
                };
                out.push(Simulated { recording, meta });
            }
        }
    }
    Ok(out)
}
