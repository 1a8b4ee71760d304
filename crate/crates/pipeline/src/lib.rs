//! From multichannel recordings to posterior effect plots: ingestion,
//! synthetic data, configuration and staged orchestration.

pub mod config;
pub mod ingest;
pub mod simulate;
pub mod stages;

pub use config::RunConfig;
pub use simulate::{simulate, SynthSpec};
pub use stages::{run_pipeline, run_stage, PipelineError, Stage};

use std::path::Path;

use ingest::IngestError;

/// Simulates a data set and writes it as `<dir>/recordings/*.csv` plus
/// `<dir>/metadata.csv`.
pub fn write_synthetic(spec: &SynthSpec, dir: &Path) -> Result<usize, String> {
    let data = simulate(spec).map_err(|e| e.to_string())?;
    let pairs: Vec<_> = data.into_iter().map(|s| (s.recording, s.meta)).collect();
    ingest::write_dataset(&dir.join("recordings"), &dir.join("metadata.csv"), &pairs)
        .map_err(|e: IngestError| e.to_string())?;
    Ok(pairs.len())
}
