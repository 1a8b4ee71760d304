//! Run configuration, read from TOML.
//!
//! Relative paths are resolved against the directory of the config file.
//! Every table and field is optional except `recordings` and `metadata`.
//!
//! ```toml
//! recordings = "data/recordings"
//! metadata = "data/metadata.csv"
//! output = "out"
//! seed = 1
//! response = "amplitude"   # or "coherence"
//! dims = 1                 # 1 = frequency, 2 = frequency x phase
//!
//! [spectra]
//! f_lo_cpm = 0.0625
//! f_hi_cpm = 16.0
//! bins_1d = 29
//! bins_2d = 15
//! phase_bins = 16
//! omega0 = 6.0
//! clip = [0.01, 0.99]
//! smoothing = "full-record"  # or a number of cycles for Gaussian smoothing
//!
//! [model]
//! mean = "reg * meal + (reg + meal | subj)"
//! scale = "reg * meal + nchan"
//! numeric = ["nchan"]
//! levels = { reg = ["descending", "sigmoid"], meal = ["0", "1"] }
//!
//! [sampler]
//! warmup = 200
//! draws = 500
//! chains = 4
//! adapt_delta = 0.95
//! max_treedepth = 10
//! init_radius = 2.0
//!
//! [refine]
//! freq_bins = 200
//! phase_bins = 201
//! level = 0.95
//! overlay = 200
//! rows_per_chunk = 8
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wavegp::cross::Smoothing;
use wavegp::model::ResponseKind;
use wavegp::sampler::ChainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Amplitude,
    Coherence,
}

impl From<Response> for ResponseKind {
    fn from(r: Response) -> Self {
        match r {
            Response::Amplitude => ResponseKind::Amplitude,
            Response::Coherence => ResponseKind::Coherence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SmoothingSpec {
    Named(String),
    Cycles(f64),
}

impl SmoothingSpec {
    pub fn resolve(&self) -> Result<Smoothing, ConfigError> {
        match self {
            SmoothingSpec::Cycles(c) if *c > 0.0 => Ok(Smoothing::Gaussian { cycles: *c }),
            SmoothingSpec::Named(n) if n == "full-record" => Ok(Smoothing::FullRecord),
            SmoothingSpec::Named(n) if n == "none" => Ok(Smoothing::None),
            other => Err(ConfigError::Invalid(format!("unknown smoothing {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraConfig {
    pub f_lo_cpm: f64,
    pub f_hi_cpm: f64,
    pub bins_1d: usize,
    pub bins_2d: usize,
    pub phase_bins: usize,
    pub omega0: f64,
    pub clip: [f64; 2],
    pub smoothing: SmoothingSpec,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        Self {
            f_lo_cpm: 1.0 / 16.0,
            f_hi_cpm: 16.0,
            bins_1d: 29,
            bins_2d: 15,
            phase_bins: 16,
            omega0: wavegp::wavelet::DEFAULT_OMEGA0,
            clip: [0.01, 0.99],
            smoothing: SmoothingSpec::Cycles(4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mean: String,
    pub scale: String,
    /// Metadata columns treated as standardized numeric predictors.
    pub numeric: Vec<String>,
    /// Declared level order of categorical columns; the first is the baseline.
    pub levels: BTreeMap<String, Vec<String>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mean: "reg * meal + (reg + meal | subj)".into(),
            scale: "reg * meal + nchan".into(),
            numeric: vec!["nchan".into()],
            levels: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub warmup: usize,
    pub draws: usize,
    pub chains: usize,
    pub adapt_delta: f64,
    pub max_treedepth: usize,
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            warmup: c.warmup,
            draws: c.draws,
            chains: c.chains,
            adapt_delta: c.adapt_delta,
            max_treedepth: c.max_treedepth,
            init_radius: c.init_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub freq_bins: usize,
    pub phase_bins: usize,
    pub level: f64,
    pub overlay: usize,
    pub rows_per_chunk: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            freq_bins: 200,
            phase_bins: 201,
            level: 0.95,
            overlay: 200,
            rows_per_chunk: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub recordings: PathBuf,
    pub metadata: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_response")]
    pub response: Response,
    #[serde(default = "default_dims")]
    pub dims: u8,
    #[serde(default)]
    pub spectra: SpectraConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub refine: RefineConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    1
}

fn default_response() -> Response {
    Response::Amplitude
}

fn default_dims() -> u8 {
    1
}

impl RunConfig {
    /// Config with defaults for everything but the input paths.
    pub fn new(
        recordings: impl Into<PathBuf>,
        metadata: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            recordings: recordings.into(),
            metadata: metadata.into(),
            output: output.into(),
            seed: default_seed(),
            response: default_response(),
            dims: default_dims(),
            spectra: SpectraConfig::default(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            refine: RefineConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.into(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.recordings, &mut cfg.metadata, &mut cfg.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.spectra;
        if !(s.f_lo_cpm > 0.0 && s.f_hi_cpm > s.f_lo_cpm) {
            return bad(format!(
                "frequency range {}..{} cpm must be positive and ordered",
                s.f_lo_cpm, s.f_hi_cpm
            ));
        }
        for (name, v) in [
            ("spectra.bins_1d", s.bins_1d),
            ("spectra.bins_2d", s.bins_2d),
            ("spectra.phase_bins", s.phase_bins),
            ("refine.freq_bins", self.refine.freq_bins),
            ("refine.phase_bins", self.refine.phase_bins),
        ] {
            if v < 4 {
                return bad(format!("{name} = {v}; bin counts must be at least 4"));
            }
        }
        if !(s.clip[0] > 0.0 && s.clip[1] < 1.0 && s.clip[0] < s.clip[1]) {
            return bad(format!(
                "clip range {:?} must satisfy 0 < lo < hi < 1",
                s.clip
            ));
        }
        if s.omega0 <= 0.0 {
            return bad(format!("omega0 = {} must be positive", s.omega0));
        }
        s.smoothing.resolve()?;
        if self.dims != 1 && self.dims != 2 {
            return bad(format!("dims = {}; expected 1 or 2", self.dims));
        }
        if !(self.refine.level > 0.0 && self.refine.level < 1.0) {
            return bad(format!(
                "refine.level = {} must lie in (0, 1)",
                self.refine.level
            ));
        }
        self.chain_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn chain_config(&self) -> ChainConfig {
        let s = &self.sampler;
        ChainConfig {
            warmup: s.warmup,
            draws: s.draws,
            chains: s.chains,
            adapt_delta: s.adapt_delta,
            max_treedepth: s.max_treedepth,
            seed: self.seed,
            init_radius: s.init_radius,
        }
    }

    pub fn two_d(&self) -> bool {
        self.dims == 2
    }

    /// Frequency bins of the coarse response grid.
    pub fn freq_bins(&self) -> usize {
        if self.two_d() {
            self.spectra.bins_2d
        } else {
            self.spectra.bins_1d
        }
    }
}
