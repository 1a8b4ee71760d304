//! Recording files and the metadata table.
//!
//! A recording is a CSV file `<obs_id>.csv` with header `time,ch0,ch1,...`
//! and one row per sample. The metadata table has one row per observation
//! with required columns `obs_id`, `fs` (Hz) and `spacing` (cm), an optional
//! `nchan` that must match the file, and any number of predictor columns.

use std::fmt;
use std::path::{Path, PathBuf};

use wavegp::wavelet::Recording;

const RESERVED: [&str; 4] = ["obs_id", "fs", "spacing", "nchan"];

/// Metadata of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMeta {
    pub id: String,
    /// Predictor columns in table order.
    pub fields: Vec<(String, String)>,
    pub fs: f64,
    pub spacing: f64,
    pub nchan: usize,
}

impl ObservationMeta {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }
}

/// Problem with one file or observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FileError {
    pub file: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{}", render(.0))]
    Files(Vec<FileError>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn render(errs: &[FileError]) -> String {
    errs.iter()
        .map(|e| format!("{}: {}", e.file, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.file, self.message)
    }
}

fn file_error(file: &Path, message: impl Into<String>) -> FileError {
    FileError {
        file: file.display().to_string(),
        message: message.into(),
    }
}

/// Writes samples with full round-trip precision.
pub fn write_recording(path: &Path, rec: &Recording) -> Result<(), IngestError> {
    let io = |source| IngestError::Io {
        path: path.into(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    let mut header = vec!["time".to_string()];
    header.extend((0..rec.channels()).map(|c| format!("ch{c}")));
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for t in 0..rec.len() {
        let mut row = vec![(t as f64 / rec.fs()).to_string()];
        row.extend(rec.samples().iter().map(|ch| ch[t].to_string()));
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Reads one recording, checking its time column against `fs`.
pub fn read_recording(path: &Path, fs: f64, spacing: f64) -> Result<Recording, FileError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| file_error(path, e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| file_error(path, e.to_string()))?
        .clone();
    if header.get(0) != Some("time") || header.len() < 2 {
        return Err(file_error(
            path,
            "header must be time followed by at least one channel",
        ));
    }
    let nchan = header.len() - 1;
    let mut times = Vec::new();
    let mut samples = vec![Vec::new(); nchan];
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| file_error(path, e.to_string()))?;
        for (j, cell) in row.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                file_error(
                    path,
                    format!("row {}, column {}: non-numeric cell {cell:?}", i + 2, j + 1),
                )
            })?;
            if j == 0 {
                times.push(v)
            } else {
                samples[j - 1].push(v)
            }
        }
    }
    if times.len() >= 2 {
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if ((1.0 / dt) - fs).abs() > 1e-6 * fs {
            return Err(file_error(
                path,
                format!(
                    "sampling-rate mismatch: time column implies {} Hz, metadata says {fs} Hz",
                    1.0 / dt
                ),
            ));
        }
    }
    Recording::new(samples, fs, spacing).map_err(|e| file_error(path, e.to_string()))
}

/// Parses the metadata table; `nchan` is zero when the column is absent.
pub fn read_metadata(path: &Path) -> Result<Vec<ObservationMeta>, IngestError> {
    let fail = |m: String| IngestError::Files(vec![file_error(path, m)]);
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| fail(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |n: &str| header.iter().position(|h| h == n);
    let (id_c, fs_c, sp_c) = match (col("obs_id"), col("fs"), col("spacing")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(fail("metadata needs obs_id, fs and spacing columns".into())),
    };
    let nchan_c = col("nchan");
    let mut errors = Vec::new();
    let mut rows: Vec<ObservationMeta> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let line = i + 2;
        let id = rec.get(id_c).unwrap_or("").to_string();
        let num = |c: usize, what: &str| -> Result<f64, FileError> {
            rec.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| file_error(path, format!("row {line}: non-numeric {what} for {id}")))
        };
        let parsed = (|| {
            let fs = num(fs_c, "fs")?;
            let spacing = num(sp_c, "spacing")?;
            let nchan = match nchan_c {
                Some(c) => {
                    let v = num(c, "nchan")?;
                    if v.fract() != 0.0 || v < 1.0 {
                        return Err(file_error(
                            path,
                            format!("row {line}: nchan must be a positive integer for {id}"),
                        ));
                    }
                    v as usize
                }
                None => 0,
            };
            Ok((fs, spacing, nchan))
        })();
        match parsed {
            Ok((fs, spacing, nchan)) if !id.is_empty() => {
                if rows.iter().any(|m| m.id == id) {
                    errors.push(file_error(
                        path,
                        format!("row {line}: duplicate obs_id {id}"),
                    ));
                    continue;
                }
                let fields = header
                    .iter()
                    .zip(rec.iter())
                    .filter(|(h, _)| !RESERVED.contains(&h.as_str()))
                    .map(|(h, v)| (h.clone(), v.to_string()))
                    .collect();
                rows.push(ObservationMeta {
                    id,
                    fields,
                    fs,
                    spacing,
                    nchan,
                });
            }
            Ok(_) => errors.push(file_error(path, format!("row {line}: empty obs_id"))),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(IngestError::Files(errors))
    }
}

pub fn write_metadata(path: &Path, rows: &[ObservationMeta]) -> Result<(), IngestError> {
    let io = |source| IngestError::Io {
        path: path.into(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    let mut header = vec!["obs_id".to_string()];
    if let Some(first) = rows.first() {
        header.extend(first.fields.iter().map(|(n, _)| n.clone()));
    }
    header.extend(["fs", "spacing", "nchan"].map(String::from));
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for m in rows {
        let mut row = vec![m.id.clone()];
        row.extend(m.fields.iter().map(|(_, v)| v.clone()));
        row.extend([m.fs.to_string(), m.spacing.to_string(), m.nchan.to_string()]);
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Paths of every `*.csv` recording in `dir`, sorted.
pub fn recording_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |source| IngestError::Io {
        path: dir.into(),
        source,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every recording of `dir` with its metadata row, in metadata order.
/// All problems are collected into one report.
pub fn ingest(
    dir: &Path,
    metadata: &Path,
) -> Result<Vec<(Recording, ObservationMeta)>, IngestError> {
    let meta = read_metadata(metadata)?;
    let files = recording_files(dir)?;
    let stem = |p: &PathBuf| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let mut errors: Vec<FileError> = files
        .iter()
        .filter(|f| !meta.iter().any(|m| m.id == stem(f)))
        .map(|f| file_error(f, format!("no metadata row for observation {}", stem(f))))
        .collect();
    let mut out = Vec::new();
    for m in &meta {
        let Some(path) = files.iter().find(|f| stem(f) == m.id) else {
            errors.push(file_error(
                &dir.join(format!("{}.csv", m.id)),
                format!("recording for observation {} not found", m.id),
            ));
            continue;
        };
        match read_recording(path, m.fs, m.spacing) {
            Ok(rec) if m.nchan != 0 && rec.channels() != m.nchan => errors.push(file_error(
                path,
                format!(
                    "file has {} channels, metadata nchan is {}",
                    rec.channels(),
                    m.nchan
                ),
            )),
            Ok(rec) => {
                let mut m = m.clone();
                m.nchan = rec.channels();
                out.push((rec, m));
            }
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(IngestError::Files(errors))
    }
}

/// Writes recordings into `dir` and the table to `metadata`.
pub fn write_dataset(
    dir: &Path,
    metadata: &Path,
    data: &[(Recording, ObservationMeta)],
) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir).map_err(|source| IngestError::Io {
        path: dir.into(),
        source,
    })?;
    for (rec, m) in data {
        write_recording(&dir.join(format!("{}.csv", m.id)), rec)?;
    }
    let rows: Vec<ObservationMeta> = data.iter().map(|(_, m)| m.clone()).collect();
    write_metadata(metadata, &rows)
}
