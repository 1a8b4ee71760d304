//! Pipeline stages and their persisted outputs.
//!
//! Layout of the output directory:
//!
//! | stage     | files |
//! |-----------|-------|
//! | `spectra` | `grid.csv`, `observations.csv`, `responses.csv` |
//! | `fit`     | `grid.csv`, `responses.csv`, `design_x.csv`, `design_z.csv`, `design_w.csv`, `draws.csv`, `sampler.csv`, `diagnostics.csv` |
//! | `refine`  | `summary.csv`, `overlay.csv`, `notes.txt` |
//! | `report`  | `cell_*.svg`, `index.html` |
//!
//! Each stage directory also holds a `stamp` with a hash of everything the
//! stage depends on; [`run_pipeline`] skips stages whose stamp still matches.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use wavegp::cross::{
    adjacent_cross_spectra, coherence_field, coherence_phase_histogram, global_coherence,
    phase_histogram, ClipRange, PhaseBins,
};
use wavegp::design::{build_design, parse_formula, DesignSet, MetaTable};
use wavegp::kernels::GridDomain;
use wavegp::model::{transform_responses, Model, OffsetPolicy};
use wavegp::report::{emit_plots, summarize_cells, write_summary, CellSummary, CredibleRegion};
use wavegp::sampler::{nuts_run, Diagnostics, PosteriorSamples};
use wavegp::wavelet::{global_power, sync_spectra, FrequencyBins, Recording};

use crate::config::{Response, RunConfig};
use crate::ingest::{ingest, read_metadata, recording_files, write_metadata, ObservationMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Spectra,
    Fit,
    Refine,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Spectra, Stage::Fit, Stage::Refine, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Spectra => "spectra",
            Stage::Fit => "fit",
            Stage::Refine => "refine",
            Stage::Report => "report",
        }
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Spectra => &["grid.csv", "observations.csv", "responses.csv"],
            Stage::Fit => &[
                "grid.csv",
                "responses.csv",
                "design_x.csv",
                "draws.csv",
                "sampler.csv",
                "diagnostics.csv",
            ],
            Stage::Refine => &["summary.csv", "overlay.csv", "notes.txt"],
            Stage::Report => &["index.html"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failure tagged with the stage it happened in.
#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

type Result<T> = std::result::Result<T, PipelineError>;

trait Tag<T> {
    fn tag(self, stage: Stage) -> Result<T>;
}

impl<T, E: fmt::Display> Tag<T> for std::result::Result<T, E> {
    fn tag(self, stage: Stage) -> Result<T> {
        self.map_err(|e| PipelineError {
            stage,
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: Stage, message: impl Into<String>) -> Result<T> {
    Err(PipelineError {
        stage,
        message: message.into(),
    })
}

pub fn stage_dir(cfg: &RunConfig, s: Stage) -> PathBuf {
    cfg.output.join(s.name())
}

fn csv_writer(path: &Path, stage: Stage) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).tag(stage)
}

fn csv_reader(path: &Path, stage: Stage) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| PipelineError {
        stage,
        message: format!("{}: {e}", path.display()),
    })
}

fn parse_f64(s: &str, stage: Stage, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| PipelineError {
        stage,
        message: format!("{}: non-numeric value {s:?}", path.display()),
    })
}

// ---------------------------------------------------------------- grids

pub fn write_grid(path: &Path, grid: &GridDomain, stage: Stage) -> Result<()> {
    let mut w = csv_writer(path, stage)?;
    w.write_record(["axis", "index", "value"]).tag(stage)?;
    for (i, f) in grid.freqs().iter().enumerate() {
        w.write_record(["freq_hz", &i.to_string(), &f.to_string()])
            .tag(stage)?;
    }
    for (i, p) in grid.phases().unwrap_or(&[]).iter().enumerate() {
        w.write_record(["phase", &i.to_string(), &p.to_string()])
            .tag(stage)?;
    }
    w.flush().tag(stage)
}

pub fn read_grid(path: &Path, stage: Stage) -> Result<GridDomain> {
    let mut freqs = Vec::new();
    let mut phases = Vec::new();
    for rec in csv_reader(path, stage)?.records() {
        let rec = rec.tag(stage)?;
        let v = parse_f64(&rec[2], stage, path)?;
        match &rec[0] {
            "freq_hz" => freqs.push(v),
            "phase" => phases.push(v),
            other => return fail(stage, format!("{}: unknown axis {other}", path.display())),
        }
    }
    if phases.is_empty() {
        GridDomain::one_d(freqs)
    } else {
        GridDomain::two_d(freqs, phases)
    }
    .tag(stage)
}

/// Writes one row per (observation, grid point) with embedded coordinates.
pub fn write_responses(
    path: &Path,
    grid: &GridDomain,
    ids: &[String],
    rows: &[Vec<f64>],
    stage: Stage,
) -> Result<()> {
    let mut w = csv_writer(path, stage)?;
    w.write_record(["obs_id", "freq_hz", "phase", "value"])
        .tag(stage)?;
    let m = grid.n_phase();
    for (id, row) in ids.iter().zip(rows) {
        for (i, v) in row.iter().enumerate() {
            let f = grid.freqs()[i / m].to_string();
            let p = grid
                .phases()
                .map_or(String::new(), |h| h[i % m].to_string());
            w.write_record([id.as_str(), &f, &p, &v.to_string()])
                .tag(stage)?;
        }
    }
    w.flush().tag(stage)
}

pub fn read_responses(
    path: &Path,
    grid: &GridDomain,
    stage: Stage,
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in csv_reader(path, stage)?.records() {
        let rec = rec.tag(stage)?;
        if ids.last().map(String::as_str) != Some(&rec[0]) {
            ids.push(rec[0].to_string());
            rows.push(Vec::with_capacity(grid.size()));
        }
        rows.last_mut()
            .expect("pushed")
            .push(parse_f64(&rec[3], stage, path)?);
    }
    if let Some((id, r)) = ids.iter().zip(&rows).find(|(_, r)| r.len() != grid.size()) {
        return fail(
            stage,
            format!(
                "{}: observation {id} has {} values, grid has {}",
                path.display(),
                r.len(),
                grid.size()
            ),
        );
    }
    Ok((ids, rows))
}

// ---------------------------------------------------------------- stamps

fn hash_hex(h: Sha256) -> String {
    format!("{:x}", h.finalize())
}

fn toml_of<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serializes")
}

/// Hash of the input files and spectral settings.
pub fn input_hash(cfg: &RunConfig) -> Result<String> {
    let s = Stage::Spectra;
    let mut h = Sha256::new();
    h.update(toml_of(&cfg.spectra));
    h.update(format!("{:?} {}", cfg.response, cfg.dims));
    h.update(fs::read(&cfg.metadata).map_err(|e| PipelineError {
        stage: s,
        message: format!("{}: {e}", cfg.metadata.display()),
    })?);
    for f in recording_files(&cfg.recordings).tag(s)? {
        h.update(
            f.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        h.update(fs::read(&f).tag(s)?);
    }
    Ok(hash_hex(h))
}

/// Chained stamps of every stage.
pub fn stamps(cfg: &RunConfig) -> Result<Vec<(Stage, String)>> {
    let spectra = input_hash(cfg)?;
    let chain = |prev: &str, extra: String| {
        let mut h = Sha256::new();
        h.update(prev);
        h.update(extra);
        hash_hex(h)
    };
    let fit = chain(
        &spectra,
        format!(
            "{}{}seed={}",
            toml_of(&cfg.model),
            toml_of(&cfg.sampler),
            cfg.seed
        ),
    );
    let refine = chain(&fit, toml_of(&cfg.refine));
    let report = chain(&refine, String::new());
    Ok(vec![
        (Stage::Spectra, spectra),
        (Stage::Fit, fit),
        (Stage::Refine, refine),
        (Stage::Report, report),
    ])
}

fn is_current(cfg: &RunConfig, s: Stage, stamp: &str) -> bool {
    let dir = stage_dir(cfg, s);
    fs::read_to_string(dir.join("stamp")).is_ok_and(|t| t.trim() == stamp)
        && s.outputs().iter().all(|f| dir.join(f).is_file())
}

fn write_stamp(cfg: &RunConfig, s: Stage, stamp: &str) -> Result<()> {
    fs::write(stage_dir(cfg, s).join("stamp"), format!("{stamp}\n")).tag(s)
}

// ---------------------------------------------------------------- spectra

/// Coarse response grid of the configured dimensionality.
pub fn coarse_grid(
    cfg: &RunConfig,
) -> std::result::Result<(FrequencyBins, Option<PhaseBins>, GridDomain), String> {
    let s = &cfg.spectra;
    let bins = FrequencyBins::log_spaced_cpm(s.f_lo_cpm, s.f_hi_cpm, cfg.freq_bins())
        .map_err(|e| e.to_string())?;
    let freqs = bins.centers().to_vec();
    if cfg.two_d() {
        let ph = PhaseBins::new(s.phase_bins).map_err(|e| e.to_string())?;
        let grid = GridDomain::two_d(freqs, ph.centers().to_vec()).map_err(|e| e.to_string())?;
        Ok((bins, Some(ph), grid))
    } else {
        Ok((
            bins,
            None,
            GridDomain::one_d(freqs).map_err(|e| e.to_string())?,
        ))
    }
}

/// Untransformed response of one recording on the coarse grid.
pub fn observation_response(
    cfg: &RunConfig,
    rec: &Recording,
) -> std::result::Result<Vec<f64>, String> {
    let (bins, phase_bins, _) = coarse_grid(cfg)?;
    let s = &cfg.spectra;
    let spectra = sync_spectra(rec, &bins, s.omega0).map_err(|e| e.to_string())?;
    let pairs = || adjacent_cross_spectra(&spectra).map_err(|e| e.to_string());
    let fields = || -> std::result::Result<_, String> {
        let clip = ClipRange::new(s.clip[0], s.clip[1]).map_err(|e| e.to_string())?;
        let smoothing = s.smoothing.resolve().map_err(|e| e.to_string())?;
        let cross = pairs()?;
        spectra
            .windows(2)
            .zip(cross)
            .map(|(w, c)| {
                coherence_field(&w[0], &w[1], smoothing, clip)
                    .map(|f| (f, c))
                    .map_err(|e| e.to_string())
            })
            .collect::<std::result::Result<Vec<_>, _>>()
    };
    match (cfg.response, phase_bins) {
        (Response::Amplitude, None) => {
            Ok(global_power(&spectra).map_err(|e| e.to_string())?.amplitude)
        }
        (Response::Amplitude, Some(pb)) => Ok(phase_histogram(&pairs()?, &pb)
            .map_err(|e| e.to_string())?
            .values),
        (Response::Coherence, None) => global_coherence(&fields()?).map_err(|e| e.to_string()),
        (Response::Coherence, Some(pb)) => Ok(coherence_phase_histogram(&fields()?, &pb)
            .map_err(|e| e.to_string())?
            .values),
    }
}

pub fn run_spectra(cfg: &RunConfig) -> Result<()> {
    let s = Stage::Spectra;
    let data = ingest(&cfg.recordings, &cfg.metadata).tag(s)?;
    if data.is_empty() {
        return fail(s, "no recordings found");
    }
    let (_, _, grid) = coarse_grid(cfg).tag(s)?;
    let rows: Vec<Vec<f64>> = data
        .par_iter()
        .map(|(rec, m)| observation_response(cfg, rec).map_err(|e| format!("{}: {e}", m.id)))
        .collect::<std::result::Result<_, _>>()
        .tag(s)?;
    let dir = stage_dir(cfg, s);
    fs::create_dir_all(&dir).tag(s)?;
    let ids: Vec<String> = data.iter().map(|(_, m)| m.id.clone()).collect();
    let meta: Vec<ObservationMeta> = data.into_iter().map(|(_, m)| m).collect();
    write_grid(&dir.join("grid.csv"), &grid, s)?;
    write_metadata(&dir.join("observations.csv"), &meta).tag(s)?;
    write_responses(&dir.join("responses.csv"), &grid, &ids, &rows, s)
}

// ---------------------------------------------------------------- fit

/// Predictor table for the observations, in order.
pub fn meta_table(
    cfg: &RunConfig,
    obs: &[ObservationMeta],
) -> std::result::Result<MetaTable, String> {
    let mut t = MetaTable::new(obs.len());
    let mut names: Vec<String> = obs
        .first()
        .map(|m| m.fields.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    names.push("nchan".into());
    for name in names {
        let values: Vec<String> = obs
            .iter()
            .map(|m| {
                if name == "nchan" {
                    Some(m.nchan.to_string())
                } else {
                    m.field(&name).map(str::to_string)
                }
            })
            .collect::<Option<_>>()
            .ok_or_else(|| format!("column {name} missing for some observations"))?;
        if cfg.model.numeric.contains(&name) {
            let nums: Vec<f64> = values
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| format!("column {name}: non-numeric value {v:?}"))
                })
                .collect::<std::result::Result<_, _>>()?;
            t.add_numeric(&name, &nums, true)
                .map_err(|e| e.to_string())?;
        } else {
            t.add_categorical(&name, &values, cfg.model.levels.get(&name).cloned())
                .map_err(|e| e.to_string())?;
        }
    }
    Ok(t)
}

fn write_matrix(
    path: &Path,
    ids: &[String],
    names: &[String],
    m: &DMatrix<f64>,
    stage: Stage,
) -> Result<()> {
    let mut w = csv_writer(path, stage)?;
    let mut header = vec!["obs_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).tag(stage)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
        w.write_record(&row).tag(stage)?;
    }
    w.flush().tag(stage)
}

pub fn run_fit(cfg: &RunConfig) -> Result<()> {
    let s = Stage::Fit;
    let src = stage_dir(cfg, Stage::Spectra);
    let grid = read_grid(&src.join("grid.csv"), s)?;
    let (ids, raw) = read_responses(&src.join("responses.csv"), &grid, s)?;
    let obs = read_metadata(&src.join("observations.csv")).tag(s)?;
    let obs: Vec<ObservationMeta> = ids
        .iter()
        .map(|id| {
            obs.iter()
                .find(|m| &m.id == id)
                .cloned()
                .ok_or_else(|| format!("no metadata for {id}"))
        })
        .collect::<std::result::Result<_, _>>()
        .tag(s)?;
    let responses =
        transform_responses(&raw, &ids, cfg.response.into(), OffsetPolicy::GrandMean).tag(s)?;
    let table = meta_table(cfg, &obs).tag(s)?;
    let mean = parse_formula(&cfg.model.mean).tag(s)?;
    let scale = parse_formula(&cfg.model.scale).tag(s)?;
    let design: DesignSet = build_design(&table, &mean, &scale).tag(s)?;
    let model = Model::new(grid.clone(), &responses, &design).tag(s)?;
    let chain_cfg = cfg.chain_config();
    let chains = nuts_run(&model, &chain_cfg).tag(s)?;
    let names = model.constrained_names(&design);
    let samples = PosteriorSamples::new(names, chains, |th| {
        model
            .constrained_values(th)
            .unwrap_or_else(|_| vec![f64::NAN; model.constrained_names(&design).len()])
    });
    let diag = Diagnostics::compute(&samples, chain_cfg.max_treedepth);

    let dir = stage_dir(cfg, s);
    fs::create_dir_all(&dir).tag(s)?;
    write_grid(&dir.join("grid.csv"), &grid, s)?;
    let y: Vec<Vec<f64>> = (0..responses.y.nrows())
        .map(|i| responses.y.row(i).iter().copied().collect())
        .collect();
    write_responses(&dir.join("responses.csv"), &grid, &ids, &y, s)?;
    fs::write(dir.join("offset.txt"), format!("{}\n", responses.offset)).tag(s)?;
    write_matrix(
        &dir.join("design_x.csv"),
        &ids,
        &design.x_names,
        &design.x,
        s,
    )?;
    write_matrix(
        &dir.join("design_z.csv"),
        &ids,
        &design.z_names,
        &design.z,
        s,
    )?;
    write_matrix(
        &dir.join("design_w.csv"),
        &ids,
        &design.w_names,
        &design.w,
        s,
    )?;
    write_draws(&dir.join("draws.csv"), &samples, s)?;

    let mut w = csv_writer(&dir.join("sampler.csv"), s)?;
    w.write_record([
        "chain",
        "draw",
        "accept_stat",
        "depth",
        "n_leapfrog",
        "divergent",
        "energy",
        "step_size",
    ])
    .tag(s)?;
    for (c, ch) in samples.chains.iter().enumerate() {
        for (d, st) in ch.stats.iter().enumerate() {
            w.write_record([
                c.to_string(),
                d.to_string(),
                st.accept_stat.to_string(),
                st.depth.to_string(),
                st.n_leapfrog.to_string(),
                u8::from(st.divergent).to_string(),
                st.energy.to_string(),
                ch.step_size.to_string(),
            ])
            .tag(s)?;
        }
    }
    w.flush().tag(s)?;
    let mut w = csv_writer(&dir.join("diagnostics.csv"), s)?;
    w.write_record(["name", "rhat", "ess_bulk"]).tag(s)?;
    for (k, n) in samples.names.iter().enumerate() {
        w.write_record([
            n.clone(),
            diag.rhat[k].to_string(),
            diag.ess_bulk[k].to_string(),
        ])
        .tag(s)?;
    }
    w.flush().tag(s)?;
    eprintln!(
        "fit: max R-hat {:.4}, {} divergences, {} draws at max tree depth",
        diag.max_rhat(),
        diag.divergences,
        diag.max_treedepth_hits
    );
    Ok(())
}

/// Constrained draws with a chain column.
pub fn write_draws(path: &Path, samples: &PosteriorSamples, stage: Stage) -> Result<()> {
    let mut w = csv_writer(path, stage)?;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(samples.names.iter().cloned());
    w.write_record(&header).tag(stage)?;
    for (c, chain) in samples.values.iter().enumerate() {
        for (d, v) in chain.iter().enumerate() {
            let mut row = vec![c.to_string(), d.to_string()];
            row.extend(v.iter().map(f64::to_string));
            w.write_record(&row).tag(stage)?;
        }
    }
    w.flush().tag(stage)
}

pub fn read_draws(path: &Path, stage: Stage) -> Result<PosteriorSamples> {
    let mut r = csv_reader(path, stage)?;
    let names: Vec<String> = r
        .headers()
        .tag(stage)?
        .iter()
        .skip(2)
        .map(str::to_string)
        .collect();
    let mut values: Vec<Vec<Vec<f64>>> = Vec::new();
    for rec in r.records() {
        let rec = rec.tag(stage)?;
        let c: usize = rec[0].parse().tag(stage)?;
        if c >= values.len() {
            values.resize(c + 1, Vec::new());
        }
        let v = rec
            .iter()
            .skip(2)
            .map(|x| parse_f64(x, stage, path))
            .collect::<Result<Vec<_>>>()?;
        values[c].push(v);
    }
    Ok(PosteriorSamples {
        names,
        values,
        chains: Vec::new(),
    })
}

fn header_names(path: &Path, stage: Stage) -> Result<Vec<String>> {
    let mut r = csv_reader(path, stage)?;
    Ok(r.headers()
        .tag(stage)?
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect())
}

// ---------------------------------------------------------------- refine

pub fn fine_grid(cfg: &RunConfig) -> std::result::Result<GridDomain, String> {
    let s = &cfg.spectra;
    let m = cfg.two_d().then_some(cfg.refine.phase_bins);
    GridDomain::log_uniform(
        s.f_lo_cpm / 60.0,
        s.f_hi_cpm / 60.0,
        cfg.refine.freq_bins,
        m,
    )
    .map_err(|e| e.to_string())
}

pub fn run_refine(cfg: &RunConfig) -> Result<()> {
    let s = Stage::Refine;
    let src = stage_dir(cfg, Stage::Fit);
    let coarse = read_grid(&src.join("grid.csv"), s)?;
    let samples = read_draws(&src.join("draws.csv"), s)?;
    let x_names = header_names(&src.join("design_x.csv"), s)?;
    let fine = fine_grid(cfg).tag(s)?;
    let r = &cfg.refine;
    let rep = summarize_cells(
        &samples,
        &x_names,
        &coarse,
        &fine,
        r.level,
        r.overlay,
        r.rows_per_chunk,
    )
    .tag(s)?;
    let dir = stage_dir(cfg, s);
    fs::create_dir_all(&dir).tag(s)?;
    let f = fs::File::create(dir.join("summary.csv")).tag(s)?;
    let mut bw = std::io::BufWriter::new(f);
    write_summary(&rep.cells, &mut bw).tag(s)?;
    bw.flush().tag(s)?;
    let mut w = csv_writer(&dir.join("overlay.csv"), s)?;
    w.write_record(["cell", "draw", "freq_hz", "value"])
        .tag(s)?;
    for c in &rep.cells {
        for (d, vals) in c.overlay.iter().enumerate() {
            for (f, v) in c.grid.freqs().iter().zip(vals) {
                w.write_record([
                    c.id.to_string(),
                    d.to_string(),
                    f.to_string(),
                    v.to_string(),
                ])
                .tag(s)?;
            }
        }
    }
    w.flush().tag(s)?;
    let mut notes = format!(
        "skipped_draws = {}\nlevel = {}\n",
        rep.skipped_draws, r.level
    );
    if let Some(n) = &rep.note {
        notes.push_str(&format!("note = {n}\n"));
    }
    fs::write(dir.join("notes.txt"), notes).tag(s)
}

/// Reads the summary table and overlay draws back into panels.
pub fn read_cells(dir: &Path, stage: Stage) -> Result<Vec<CellSummary>> {
    struct Acc {
        id: char,
        label: String,
        freqs: Vec<f64>,
        phases: Vec<f64>,
        region: CredibleRegion,
        prop: Vec<bool>,
    }
    let path = dir.join("summary.csv");
    let mut cells: Vec<Acc> = Vec::new();
    for rec in csv_reader(&path, stage)?.records() {
        let rec = rec.tag(stage)?;
        let id = rec[0].chars().next().unwrap_or('?');
        if cells.last().map(|c| c.id) != Some(id) {
            cells.push(Acc {
                id,
                label: rec[1].to_string(),
                freqs: Vec::new(),
                phases: Vec::new(),
                region: CredibleRegion {
                    lower: vec![],
                    median: vec![],
                    upper: vec![],
                    above: vec![],
                    below: vec![],
                    propagation: None,
                },
                prop: Vec::new(),
            });
        }
        let c = cells.last_mut().expect("pushed");
        let f = parse_f64(&rec[2], stage, &path)?;
        if c.freqs.last() != Some(&f) {
            c.freqs.push(f);
        }
        if !rec[3].is_empty() && c.freqs.len() == 1 {
            c.phases.push(parse_f64(&rec[3], stage, &path)?);
        }
        c.region.median.push(parse_f64(&rec[4], stage, &path)?);
        c.region.lower.push(parse_f64(&rec[5], stage, &path)?);
        c.region.upper.push(parse_f64(&rec[6], stage, &path)?);
        c.region.above.push(&rec[7] == "1");
        c.region.below.push(&rec[8] == "1");
        if !rec[9].is_empty() {
            c.prop.push(&rec[9] == "1");
        }
    }
    let mut overlay: Vec<(char, usize, f64)> = Vec::new();
    let opath = dir.join("overlay.csv");
    for rec in csv_reader(&opath, stage)?.records() {
        let rec = rec.tag(stage)?;
        overlay.push((
            rec[0].chars().next().unwrap_or('?'),
            rec[1].parse().tag(stage)?,
            parse_f64(&rec[3], stage, &opath)?,
        ));
    }
    cells
        .into_iter()
        .map(|mut c| {
            let grid = if c.phases.is_empty() {
                GridDomain::one_d(c.freqs)
            } else {
                GridDomain::two_d(c.freqs, c.phases)
            }
            .tag(stage)?;
            if grid.is_2d() {
                c.region.propagation = Some(c.prop);
            }
            let mut lines: Vec<Vec<f64>> = Vec::new();
            for &(_, d, v) in overlay.iter().filter(|o| o.0 == c.id) {
                if d >= lines.len() {
                    lines.resize(d + 1, Vec::new());
                }
                lines[d].push(v);
            }
            Ok(CellSummary {
                id: c.id,
                label: c.label,
                grid,
                region: c.region,
                overlay: lines,
            })
        })
        .collect()
}

pub fn run_report(cfg: &RunConfig) -> Result<()> {
    let s = Stage::Report;
    let cells = read_cells(&stage_dir(cfg, Stage::Refine), s)?;
    let dir = stage_dir(cfg, s);
    emit_plots(&cells, &dir).tag(s)?;
    Ok(())
}

// ---------------------------------------------------------------- orchestration

pub fn run_stage(cfg: &RunConfig, s: Stage) -> Result<()> {
    let t = Instant::now();
    match s {
        Stage::Spectra => run_spectra(cfg)?,
        Stage::Fit => run_fit(cfg)?,
        Stage::Refine => run_refine(cfg)?,
        Stage::Report => run_report(cfg)?,
    }
    let all = stamps(cfg)?;
    let stamp = &all
        .iter()
        .find(|(x, _)| *x == s)
        .expect("every stage stamped")
        .1;
    write_stamp(cfg, s, stamp)?;
    eprintln!("{s}: done in {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}

/// Which stages ran and which were reused.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Runs every stage in order, reusing persisted stages whose stamp still
/// matches unless `force` is set. Once a stage reruns, every later stage
/// reruns too.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<RunOutcome> {
    cfg.validate().tag(Stage::Spectra)?;
    let stamps = stamps(cfg)?;
    let mut out = RunOutcome::default();
    let mut dirty = force;
    for (s, stamp) in &stamps {
        if !dirty && is_current(cfg, *s, stamp) {
            out.skipped.push(*s);
            continue;
        }
        dirty = true;
        run_stage(cfg, *s)?;
        out.ran.push(*s);
    }
    Ok(out)
}

/// Applies `WAVEGP_THREADS` to the global thread pool.
pub fn configure_threads() -> std::result::Result<Option<usize>, String> {
    let Ok(v) = std::env::var("WAVEGP_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("WAVEGP_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("WAVEGP_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    Ok(Some(n))
}
