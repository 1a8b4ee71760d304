//! Wavelet spectra of multichannel quasiperiodic recordings and Bayesian
//! heteroscedastic Gaussian-process mixed-effects models over them.

pub mod cross;
pub mod design;
pub mod diagnostics;
pub mod kernels;
pub mod model;
pub mod report;
pub mod sampler;
pub mod wavelet;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/spectra.md")]
mod spectra_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/models.md")]
mod models_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sampling.md")]
mod sampling_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reports.md")]
mod reports_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod pipeline_guide {}
