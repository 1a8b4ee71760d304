//! Posterior summaries of the population-level functions: refinement onto
//! fine grids, effect cells, credible regions, plots and tables.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::{
    cholesky_with_jitter, corr_logfreq, corr_phase, Conditioner, GridDomain, KernelError,
    KernelParams,
};
use crate::sampler::PosteriorSamples;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("posterior has no parameter named {0}")]
    MissingParameter(String),
    #[error("credible regions need at least 100 draws, got {0}")]
    TooFewDraws(usize),
    #[error("every draw of {0} failed to condition")]
    AllDrawsFailed(String),
    #[error("credible level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One panel: a linear combination of population-level functions.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub id: char,
    pub label: String,
    /// One coefficient per fixed-effect column.
    pub coefs: Vec<f64>,
}

/// Coefficients on (intercept, second factor, first factor, interaction).
const LAYOUT: [(char, [f64; 4]); 12] = [
    ('a', [1.0, 0.0, 0.0, 0.0]),
    ('b', [1.0, 1.0, 0.0, 0.0]),
    ('c', [0.0, 1.0, 0.0, 0.0]),
    ('d', [1.0, 0.0, 1.0, 0.0]),
    ('e', [1.0, 1.0, 1.0, 1.0]),
    ('f', [0.0, 1.0, 0.0, 1.0]),
    ('g', [0.0, 0.0, 1.0, 0.0]),
    ('h', [0.0, 0.0, 1.0, 1.0]),
    ('i', [0.0, 0.0, 1.0, 0.5]),
    ('j', [0.0, 0.0, 0.0, 1.0]),
    ('k', [0.0, 1.0, 0.0, 0.5]),
    ('l', [1.0, 0.5, 0.5, 0.25]),
];

/// Panels for a fixed design. A treatment-coded 2x2 design
/// `[Intercept, A, B, A:B]` yields the 12-cell layout; anything else yields
/// one panel per column and a note.
pub fn cell_specs(x_names: &[String]) -> (Vec<CellSpec>, Option<String>) {
    let is_2x2 = x_names.len() == 4
        && x_names[0] == "Intercept"
        && x_names[3] == format!("{}:{}", x_names[1], x_names[2]);
    if !is_2x2 {
        let cells = x_names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut coefs = vec![0.0; x_names.len()];
                coefs[i] = 1.0;
                CellSpec {
                    id: (b'a' + (i % 26) as u8) as char,
                    label: n.clone(),
                    coefs,
                }
            })
            .collect();
        return (
            cells,
            Some(
                "fixed design is not a 2x2 treatment-coded layout; only pure effects are shown"
                    .into(),
            ),
        );
    }
    // column order is [Intercept, A, B, A:B]; the layout is written over (I, B, A, AB)
    let names = [&x_names[0], &x_names[2], &x_names[1], &x_names[3]];
    let cells = LAYOUT
        .iter()
        .map(|&(id, c)| {
            let label = c
                .iter()
                .zip(names)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, n)| {
                    if *w == 1.0 {
                        n.to_string()
                    } else {
                        format!("{w}*{n}")
                    }
                })
                .collect::<Vec<_>>()
                .join(" + ");
            CellSpec {
                id,
                label,
                coefs: vec![c[0], c[2], c[1], c[3]],
            }
        })
        .collect();
    (cells, None)
}

/// Per-draw coarse values and kernel of one population-level function.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectDraws {
    pub name: String,
    pub kernels: Vec<KernelParams>,
    pub values: Vec<Vec<f64>>,
}

fn column(samples: &PosteriorSamples, name: &str) -> Result<usize, ReportError> {
    samples
        .index_of(name)
        .ok_or_else(|| ReportError::MissingParameter(name.to_string()))
}

/// Collects the draws of `beta[name]` on a grid of `g` points.
pub fn effect_draws(
    samples: &PosteriorSamples,
    name: &str,
    g: usize,
    two_d: bool,
) -> Result<EffectDraws, ReportError> {
    let base = format!("beta[{name}]");
    let tau = column(samples, &format!("{base}.tau"))?;
    let lf = column(samples, &format!("{base}.lambda_f"))?;
    let lp = if two_d {
        Some(column(samples, &format!("{base}.lambda_phi"))?)
    } else {
        None
    };
    let first = column(samples, &format!("{base}[0]"))?;
    if g > 0 {
        column(samples, &format!("{base}[{}]", g - 1))?;
    }
    let (kernels, values) = samples
        .draws()
        .map(|d| {
            (
                KernelParams::new(d[tau], d[lf], lp.map(|i| d[i])),
                d[first..first + g].to_vec(),
            )
        })
        .unzip();
    Ok(EffectDraws {
        name: name.to_string(),
        kernels,
        values,
    })
}

/// A function on the refined grid as a set of draws, on the log scale.
/// Draws whose conditioning failed are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedEffect {
    pub name: String,
    pub grid: GridDomain,
    pub log_draws: Vec<Option<Vec<f64>>>,
}

impl RefinedEffect {
    pub fn skipped(&self) -> usize {
        self.log_draws.iter().filter(|d| d.is_none()).count()
    }
}

/// Conditions every draw onto `fine` with that draw's own kernel.
pub fn refine_effect(
    effect: &EffectDraws,
    coarse: &GridDomain,
    fine: &GridDomain,
) -> RefinedEffect {
    let log_draws = effect
        .values
        .par_iter()
        .zip(&effect.kernels)
        .map(|(y, k)| {
            Conditioner::new(fine, coarse, k)
                .and_then(|c| c.apply(y))
                .ok()
        })
        .collect();
    RefinedEffect {
        name: effect.name.clone(),
        grid: fine.clone(),
        log_draws,
    }
}

/// Draws of one panel on the ratio scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectSurface {
    pub id: char,
    pub label: String,
    pub grid: GridDomain,
    /// `draw x grid point`, every value positive.
    pub draws: Vec<Vec<f64>>,
}

/// Refines `beta[effect]` and exponentiates it.
pub fn refine_draws(
    samples: &PosteriorSamples,
    effect: &str,
    coarse: &GridDomain,
    fine: &GridDomain,
) -> Result<(EffectSurface, usize), ReportError> {
    let e = effect_draws(samples, effect, coarse.size(), coarse.is_2d())?;
    let r = refine_effect(&e, coarse, fine);
    let skipped = r.skipped();
    let draws: Vec<Vec<f64>> = r
        .log_draws
        .into_iter()
        .flatten()
        .map(|d| d.into_iter().map(f64::exp).collect())
        .collect();
    if draws.is_empty() {
        return Err(ReportError::AllDrawsFailed(effect.to_string()));
    }
    Ok((
        EffectSurface {
            id: 'a',
            label: effect.to_string(),
            grid: fine.clone(),
            draws,
        },
        skipped,
    ))
}

/// Combines refined functions into panels; a draw skipped in any function
/// is dropped from every panel.
pub fn effect_cells(effects: &[RefinedEffect], specs: &[CellSpec]) -> Vec<EffectSurface> {
    let n = effects.first().map_or(0, |e| e.log_draws.len());
    let keep: Vec<usize> = (0..n)
        .filter(|&d| effects.iter().all(|e| e.log_draws[d].is_some()))
        .collect();
    let grid = effects.first().map(|e| e.grid.clone());
    specs
        .iter()
        .map(|s| {
            let draws = keep
                .iter()
                .map(|&d| {
                    let g = effects[0].grid.size();
                    (0..g)
                        .map(|x| {
                            let lin: f64 = effects
                                .iter()
                                .zip(&s.coefs)
                                .filter(|(_, c)| **c != 0.0)
                                .map(|(e, c)| c * e.log_draws[d].as_ref().expect("kept")[x])
                                .sum();
                            lin.exp()
                        })
                        .collect()
                })
                .collect();
            EffectSurface {
                id: s.id,
                label: s.label.clone(),
                grid: grid.clone().expect("at least one effect"),
                draws,
            }
        })
        .collect()
}

/// Per-point summaries and flags of one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CredibleRegion {
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
    /// Interval lower bound above 1.
    pub above: Vec<bool>,
    /// Interval upper bound below 1.
    pub below: Vec<bool>,
    /// 2D only: the value exceeds the value at the opposite phase in at
    /// least `(1 + level) / 2` of the draws.
    pub propagation: Option<Vec<bool>>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

/// Index of the phase centre closest to `-phases[m]`.
pub fn opposite_phase(phases: &[f64], m: usize) -> usize {
    let target = -phases[m];
    let wrap = |d: f64| (d + PI).rem_euclid(2.0 * PI) - PI;
    (0..phases.len())
        .min_by(|&a, &b| {
            wrap(phases[a] - target)
                .abs()
                .total_cmp(&wrap(phases[b] - target).abs())
        })
        .expect("non-empty phases")
}

/// Summaries from value columns: `cols[point][draw]`.
fn region_from_columns(grid: &GridDomain, cols: &[Vec<f64>], level: f64) -> CredibleRegion {
    let tail = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(cols.len());
    let mut median = Vec::with_capacity(cols.len());
    let mut upper = Vec::with_capacity(cols.len());
    for c in cols {
        let mut s = c.clone();
        s.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&s, tail));
        median.push(quantile_sorted(&s, 0.5));
        upper.push(quantile_sorted(&s, 1.0 - tail));
    }
    let above = lower.iter().map(|&l| l > 1.0).collect();
    let below = upper.iter().map(|&u| u < 1.0).collect();
    let propagation = grid.phases().map(|ph| {
        let m_n = ph.len();
        let mirror: Vec<usize> = (0..m_n).map(|m| opposite_phase(ph, m)).collect();
        let need = 1.0 - tail;
        (0..cols.len())
            .map(|i| {
                let (k, m) = (i / m_n, i % m_n);
                let j = k * m_n + mirror[m];
                let n = cols[i].len();
                let wins = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .filter(|(a, b)| *a - *b > 0.0)
                    .count();
                wins as f64 >= need * n as f64 - 1e-9
            })
            .collect()
    });
    CredibleRegion {
        lower,
        median,
        upper,
        above,
        below,
        propagation,
    }
}

/// Central credible intervals and flags per grid point.
pub fn credible_regions(
    surface: &EffectSurface,
    level: f64,
) -> Result<CredibleRegion, ReportError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ReportError::Level(level));
    }
    if surface.draws.len() < 100 {
        return Err(ReportError::TooFewDraws(surface.draws.len()));
    }
    let g = surface.grid.size();
    let cols: Vec<Vec<f64>> = (0..g)
        .map(|x| surface.draws.iter().map(|d| d[x]).collect())
        .collect();
    Ok(region_from_columns(&surface.grid, &cols, level))
}

/// Everything needed to draw and tabulate one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub id: char,
    pub label: String,
    pub grid: GridDomain,
    pub region: CredibleRegion,
    /// A subset of draws for overlay lines (1D panels only).
    pub overlay: Vec<Vec<f64>>,
}

/// Evenly spaced subset of at most `max` draw indices out of `n`.
pub fn overlay_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub cells: Vec<CellSummary>,
    pub skipped_draws: usize,
    pub note: Option<String>,
}

fn sub_grid(fine: &GridDomain, rows: std::ops::Range<usize>) -> Result<GridDomain, KernelError> {
    let f = fine.freqs()[rows].to_vec();
    match fine.phases() {
        Some(h) => GridDomain::two_d(f, h.to_vec()),
        None => GridDomain::one_d(f),
    }
}

fn factorizable(k: &KernelParams, coarse: &GridDomain) -> bool {
    let f = coarse.freqs();
    cholesky_with_jitter(&corr_logfreq(f, f, k.lambda_f)).is_ok()
        && match (coarse.phases(), k.lambda_phi) {
            (Some(h), Some(lp)) => cholesky_with_jitter(&corr_phase(h, h, lp)).is_ok(),
            (None, _) => true,
            _ => false,
        }
}

/// Refines every population-level function and summarizes every panel,
/// processing `rows_per_chunk` fine frequencies at a time so memory stays
/// bounded on large 2D grids. Refinement happens before summarizing.
pub fn summarize_cells(
    samples: &PosteriorSamples,
    x_names: &[String],
    coarse: &GridDomain,
    fine: &GridDomain,
    level: f64,
    max_overlay: usize,
    rows_per_chunk: usize,
) -> Result<CellReport, ReportError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ReportError::Level(level));
    }
    let (specs, note) = cell_specs(x_names);
    let effects: Vec<EffectDraws> = x_names
        .iter()
        .map(|n| effect_draws(samples, n, coarse.size(), coarse.is_2d()))
        .collect::<Result<_, _>>()?;
    let n = effects.first().map_or(0, |e| e.values.len());
    let keep: Vec<usize> = (0..n)
        .filter(|&d| effects.iter().all(|e| factorizable(&e.kernels[d], coarse)))
        .collect();
    if keep.len() < 100 {
        return Err(ReportError::TooFewDraws(keep.len()));
    }
    let overlay_draws: Vec<usize> = if fine.is_2d() {
        Vec::new()
    } else {
        overlay_indices(keep.len(), max_overlay)
    };
    let m_n = fine.n_phase();
    let k_n = fine.freqs().len();
    let chunk = rows_per_chunk.max(1);
    let empty = CredibleRegion {
        lower: Vec::new(),
        median: Vec::new(),
        upper: Vec::new(),
        above: Vec::new(),
        below: Vec::new(),
        propagation: fine.is_2d().then(Vec::new),
    };
    let mut cells: Vec<CellSummary> = specs
        .iter()
        .map(|s| CellSummary {
            id: s.id,
            label: s.label.clone(),
            grid: fine.clone(),
            region: empty.clone(),
            overlay: vec![Vec::new(); overlay_draws.len()],
        })
        .collect();
    let mut r0 = 0;
    while r0 < k_n {
        let r1 = (r0 + chunk).min(k_n);
        let target = sub_grid(fine, r0..r1)?;
        let pts = (r1 - r0) * m_n;
        // refined[effect][kept draw][point], log scale
        let refined: Vec<Vec<Vec<f64>>> = effects
            .iter()
            .map(|e| {
                keep.par_iter()
                    .map(|&d| {
                        Conditioner::new(&target, coarse, &e.kernels[d])
                            .and_then(|c| c.apply(&e.values[d]))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        for (spec, cell) in specs.iter().zip(cells.iter_mut()) {
            let cols: Vec<Vec<f64>> = (0..pts)
                .into_par_iter()
                .map(|x| {
                    (0..keep.len())
                        .map(|d| {
                            let lin: f64 = refined
                                .iter()
                                .zip(&spec.coefs)
                                .filter(|(_, c)| **c != 0.0)
                                .map(|(r, c)| c * r[d][x])
                                .sum();
                            lin.exp()
                        })
                        .collect()
                })
                .collect();
            let part = region_from_columns(&target, &cols, level);
            let r = &mut cell.region;
            r.lower.extend(part.lower);
            r.median.extend(part.median);
            r.upper.extend(part.upper);
            r.above.extend(part.above);
            r.below.extend(part.below);
            if let (Some(all), Some(p)) = (r.propagation.as_mut(), part.propagation) {
                all.extend(p);
            }
            for (o, &d) in cell.overlay.iter_mut().zip(&overlay_draws) {
                o.extend((0..pts).map(|x| cols[x][d]));
            }
        }
        r0 = r1;
    }
    Ok(CellReport {
        cells,
        skipped_draws: n - keep.len(),
        note,
    })
}

/// Builds a panel summary from a materialized surface.
pub fn summarize_surface(
    surface: &EffectSurface,
    level: f64,
    max_overlay: usize,
) -> Result<CellSummary, ReportError> {
    let region = credible_regions(surface, level)?;
    let overlay = if surface.grid.is_2d() {
        Vec::new()
    } else {
        overlay_indices(surface.draws.len(), max_overlay)
            .into_iter()
            .map(|d| surface.draws[d].clone())
            .collect()
    };
    Ok(CellSummary {
        id: surface.id,
        label: surface.label.clone(),
        grid: surface.grid.clone(),
        region,
        overlay,
    })
}

/// Writes the summary table: one row per panel and grid point.
pub fn write_summary<W: io::Write>(cells: &[CellSummary], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "cell,label,freq_hz,phase,median,lower,upper,above,below,propagation"
    )?;
    for c in cells {
        let m_n = c.grid.n_phase();
        for i in 0..c.grid.size() {
            let f = c.grid.freqs()[i / m_n];
            let phase = c
                .grid
                .phases()
                .map_or(String::new(), |h| h[i % m_n].to_string());
            let prop = c
                .region
                .propagation
                .as_ref()
                .map_or(String::new(), |p| u8::from(p[i]).to_string());
            writeln!(
                w,
                "{},\"{}\",{},{},{},{},{},{},{},{}",
                c.id,
                c.label,
                f,
                phase,
                c.region.median[i],
                c.region.lower[i],
                c.region.upper[i],
                u8::from(c.region.above[i]),
                u8::from(c.region.below[i]),
                prop
            )?;
        }
    }
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const ML: f64 = 60.0;
const MR: f64 = 20.0;
const MT: f64 = 30.0;
const MB: f64 = 45.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ML + (W - ML - MR) / 2.0,
        H - 8.0,
        x_label
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
        y_label
    );
}

fn px(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn polyline(xs: &[f64], ys: &[f64], style: &str) -> String {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        r#"<polyline fill="none" points="{}" {style}/>"#,
        pts.join(" ")
    )
}

const CPM_TICKS: [f64; 9] = [1.0 / 16.0, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

fn cpm_label(c: f64) -> String {
    if c >= 1.0 {
        format!("{c}")
    } else {
        format!("1/{}", (1.0 / c).round())
    }
}

/// Curve plot of a 1D panel on log axes.
pub fn render_curve(cell: &CellSummary) -> String {
    let cpm: Vec<f64> = cell
        .grid
        .freqs()
        .iter()
        .map(|f| (f * 60.0).log10())
        .collect();
    let (x0, x1) = (cpm[0], cpm[cpm.len() - 1]);
    let mut ys: Vec<f64> = cell
        .region
        .lower
        .iter()
        .chain(&cell.region.upper)
        .copied()
        .collect();
    ys.extend(cell.overlay.iter().flatten());
    ys.push(1.0);
    let y0 = ys.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let y1 = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
    let pad = 0.05 * (y1 - y0).max(1e-3);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (l, r, t, b) = (ML, W - MR, MT, H - MB);
    let sx = |v: f64| px(v, x0, x1, l, r);
    let sy = |v: f64| px(v.log10(), y0, y1, b, t);
    let mut svg = String::new();
    frame(
        &mut svg,
        &format!("({}) {}", cell.id, cell.label),
        "frequency (cpm)",
        "ratio",
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="#1b1b2f"/>"##,
        r - l,
        b - t
    );
    for &c in &CPM_TICKS {
        let v = c.log10();
        if v >= x0 - 1e-9 && v <= x1 + 1e-9 {
            let x = sx(v);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{b:.1}" x2="{x:.2}" y2="{:.1}" stroke="black"/>"#,
                b + 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
                b + 16.0,
                cpm_label(c)
            );
        }
    }
    let step = nice_step(y1 - y0);
    let mut e = (y0 / step).ceil() * step;
    while e <= y1 {
        let y = px(e, y0, y1, b, t);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{y:.2}" x2="{l:.1}" y2="{y:.2}" stroke="black"/>"#,
            l - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            l - 6.0,
            y + 4.0,
            10f64.powf(e)
        );
        e += step;
    }
    let xs: Vec<f64> = cpm.iter().map(|&v| sx(v)).collect();
    for d in &cell.overlay {
        let y: Vec<f64> = d.iter().map(|&v| sy(v)).collect();
        svg.push_str(&polyline(
            &xs,
            &y,
            r#"stroke="white" stroke-width="0.4" stroke-opacity="0.25""#,
        ));
        svg.push('\n');
    }
    for (vals, style) in [
        (
            &cell.region.lower,
            r#"stroke="white" stroke-width="1.2" stroke-dasharray="2,3""#,
        ),
        (
            &cell.region.upper,
            r#"stroke="white" stroke-width="1.2" stroke-dasharray="2,3""#,
        ),
        (
            &cell.region.median,
            r##"stroke="#f4a259" stroke-width="1.5""##,
        ),
    ] {
        let y: Vec<f64> = vals.iter().map(|&v| sy(v)).collect();
        svg.push_str(&polyline(&xs, &y, style));
        svg.push('\n');
    }
    let one = sy(1.0);
    let _ = writeln!(
        svg,
        r#"<line x1="{l:.1}" y1="{one:.2}" x2="{r:.1}" y2="{one:.2}" stroke="grey" stroke-width="0.8"/>"#
    );
    svg.push_str("</svg>\n");
    svg
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    mag * if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    }
}

const VIRIDIS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let w = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    let mix = |x: f64, y: f64| (x + w * (y - x)).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(a.0, b.0),
        mix(a.1, b.1),
        mix(a.2, b.2)
    )
}

/// Boundary segments of a flagged region on a `k x m` cell grid.
fn outline(mask: &[bool], k: usize, m: usize) -> Vec<(usize, usize, usize, usize)> {
    let at = |i: isize, j: isize| {
        i >= 0
            && j >= 0
            && (i as usize) < k
            && (j as usize) < m
            && mask[i as usize * m + j as usize]
    };
    let mut seg = Vec::new();
    for i in 0..k as isize {
        for j in 0..m as isize {
            if !at(i, j) {
                continue;
            }
            let (iu, ju) = (i as usize, j as usize);
            if !at(i - 1, j) {
                seg.push((ju, iu, ju + 1, iu));
            }
            if !at(i + 1, j) {
                seg.push((ju, iu + 1, ju + 1, iu + 1));
            }
            if !at(i, j - 1) {
                seg.push((ju, iu, ju, iu + 1));
            }
            if !at(i, j + 1) {
                seg.push((ju + 1, iu, ju + 1, iu + 1));
            }
        }
    }
    seg
}

/// Heatmap of a 2D panel's median with flag outlines.
pub fn render_heatmap(cell: &CellSummary) -> String {
    let k = cell.grid.freqs().len();
    let m = cell.grid.n_phase();
    let (l, r, t, b) = (ML, W - MR - 40.0, MT, H - MB);
    let cw = (r - l) / m as f64;
    let ch = (b - t) / k as f64;
    let logs: Vec<f64> = cell.region.median.iter().map(|v| v.ln()).collect();
    let span = logs.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut svg = String::new();
    frame(
        &mut svg,
        &format!("({}) {}", cell.id, cell.label),
        "phase (rad)",
        "frequency (cpm)",
    );
    // rows from low frequency at the bottom; equal neighbouring colours merged
    for i in 0..k {
        let y = b - (i + 1) as f64 * ch;
        let mut j = 0;
        while j < m {
            let c = colour(0.5 + 0.5 * logs[i * m + j] / span);
            let mut e = j + 1;
            while e < m && colour(0.5 + 0.5 * logs[i * m + e] / span) == c {
                e += 1;
            }
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{c}"/>"#,
                l + j as f64 * cw,
                (e - j) as f64 * cw + 0.05,
                ch + 0.05
            );
            j = e;
        }
    }
    let path = |segs: &[(usize, usize, usize, usize)]| {
        segs.iter()
            .map(|&(x0, y0, x1, y1)| {
                format!(
                    "M{:.2} {:.2}L{:.2} {:.2}",
                    l + x0 as f64 * cw,
                    b - y0 as f64 * ch,
                    l + x1 as f64 * cw,
                    b - y1 as f64 * ch
                )
            })
            .collect::<String>()
    };
    let above = outline(&cell.region.above, k, m);
    if !above.is_empty() {
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="white" stroke-width="1.5"/>"#,
            path(&above)
        );
    }
    let below = outline(&cell.region.below, k, m);
    if !below.is_empty() {
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="white" stroke-width="1.5" stroke-dasharray="4,3"/>"#,
            path(&below)
        );
    }
    if let Some(p) = &cell.region.propagation {
        let prop = outline(p, k, m);
        if !prop.is_empty() {
            let d = path(&prop);
            let _ = writeln!(
                svg,
                r#"<path d="{d}" fill="none" stroke="black" stroke-width="1.5"/>"#
            );
            let _ = writeln!(
                svg,
                r#"<path d="{d}" fill="none" stroke="white" stroke-width="1.5" stroke-dasharray="3,3"/>"#
            );
        }
    }
    let fr = cell.grid.freqs();
    let (f0, f1) = ((fr[0] * 60.0).log10(), (fr[k - 1] * 60.0).log10());
    let half = 0.5 * (f1 - f0) / (k.max(2) - 1) as f64;
    for &c in &CPM_TICKS {
        let v = c.log10();
        if v >= f0 - half && v <= f1 + half {
            let y = px(v, f0 - half, f1 + half, b, t);
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{y:.2}" x2="{l:.1}" y2="{y:.2}" stroke="black"/>"#,
                l - 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#,
                l - 6.0,
                y + 4.0,
                cpm_label(c)
            );
        }
    }
    for (v, lab) in [(-PI, "-π"), (0.0, "0"), (PI, "π")] {
        let x = px(v, -PI, PI, l, r);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{lab}</text>"#,
            b + 16.0
        );
    }
    let cx = r + 12.0;
    for s in 0..20 {
        let y = b - (s + 1) as f64 * (b - t) / 20.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{cx:.1}" y="{y:.2}" width="10" height="{:.2}" fill="{}"/>"#,
            (b - t) / 20.0 + 0.05,
            colour((s as f64 + 0.5) / 20.0)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#,
        cx - 4.0,
        t - 4.0,
        span.exp()
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#,
        cx - 4.0,
        b + 12.0,
        (-span).exp()
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes one vector-graphics file per panel plus `index.html`.
pub fn emit_plots(cells: &[CellSummary], out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut index = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>effects</title></head><body>\n");
    for c in cells {
        let name = format!("cell_{}.svg", c.id);
        let svg = if c.grid.is_2d() {
            render_heatmap(c)
        } else {
            render_curve(c)
        };
        let path = out_dir.join(&name);
        std::fs::write(&path, svg)?;
        written.push(path);
        let _ = writeln!(
            index,
            "<figure><img src=\"{name}\"><figcaption>({}) {}</figcaption></figure>",
            c.id,
            escape(&c.label)
        );
    }
    index.push_str("</body></html>\n");
    let path = out_dir.join("index.html");
    std::fs::write(&path, index)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        [
            "Intercept",
            "reg[sigmoid]",
            "meal[1]",
            "reg[sigmoid]:meal[1]",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn twelve_cells_for_two_by_two() {
        let (cells, note) = cell_specs(&names());
        assert!(note.is_none());
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].label, "Intercept");
        assert_eq!(cells[2].label, "meal[1]");
        assert_eq!(cells[6].label, "reg[sigmoid]");
        assert_eq!(cells[9].label, "reg[sigmoid]:meal[1]");
        // (f): meal effect in the sigmoid region
        assert_eq!(cells[5].coefs, vec![0.0, 0.0, 1.0, 1.0]);
        let (pure, note) = cell_specs(&names()[..3]);
        assert_eq!(pure.len(), 3);
        assert!(note.is_some());
    }

    fn refined(name: &str, draws: Vec<Vec<f64>>) -> RefinedEffect {
        let grid = GridDomain::one_d(vec![0.01, 0.02]).unwrap();
        RefinedEffect {
            name: name.into(),
            grid,
            log_draws: draws.into_iter().map(Some).collect(),
        }
    }

    #[test]
    fn cell_arithmetic_matches_hand_sums() {
        let b: Vec<RefinedEffect> = (0..4)
            .map(|p| {
                refined(
                    &names()[p],
                    (0..3)
                        .map(|d| {
                            vec![
                                0.1 * (p + 1) as f64 + 0.01 * d as f64,
                                -0.2 * p as f64 + 0.03 * d as f64,
                            ]
                        })
                        .collect(),
                )
            })
            .collect();
        let (specs, _) = cell_specs(&names());
        let cells = effect_cells(&b, &specs);
        for d in 0..3 {
            for x in 0..2 {
                let v = |p: usize| b[p].log_draws[d].as_ref().unwrap()[x];
                // (b) = intercept + meal; (l) = intercept + half of each main effect + quarter interaction
                assert!((cells[1].draws[d][x] - (v(0) + v(2)).exp()).abs() < 1e-14);
                let l = v(0) + 0.5 * v(1) + 0.5 * v(2) + 0.25 * v(3);
                assert!((cells[11].draws[d][x] - l.exp()).abs() < 1e-14);
                // (e) = (b) * (g) * (j) exactly on the log scale
                let prod = cells[1].draws[d][x] * cells[6].draws[d][x] * cells[9].draws[d][x];
                assert!((cells[4].draws[d][x] - prod).abs() < 1e-12 * prod);
            }
        }
        let zero: Vec<RefinedEffect> = (0..4)
            .map(|p| refined(&names()[p], vec![vec![0.0; 2]; 3]))
            .collect();
        for c in effect_cells(&zero, &specs) {
            assert!(c.draws.iter().flatten().all(|&v| v == 1.0));
        }
    }

    fn surface(grid: GridDomain, draws: Vec<Vec<f64>>) -> EffectSurface {
        EffectSurface {
            id: 'a',
            label: "x".into(),
            grid,
            draws,
        }
    }

    #[test]
    fn constant_and_symmetric_draws() {
        let grid = GridDomain::one_d(vec![0.01, 0.02, 0.03]).unwrap();
        let r = credible_regions(&surface(grid.clone(), vec![vec![2.0; 3]; 100]), 0.95).unwrap();
        assert!(r.above.iter().all(|&a| a));
        assert!(r.below.iter().all(|&a| !a));
        let sym: Vec<Vec<f64>> = (0..200)
            .map(|d| vec![(0.01 * (d as f64 - 99.5)).exp(); 3])
            .collect();
        let r = credible_regions(&surface(grid.clone(), sym), 0.95).unwrap();
        assert!(r.above.iter().chain(&r.below).all(|&a| !a));
        assert!(matches!(
            credible_regions(&surface(grid, vec![vec![1.0; 3]; 99]), 0.95),
            Err(ReportError::TooFewDraws(99))
        ));
    }

    #[test]
    fn opposite_phase_pairs_mirror_centres() {
        for m in [4, 5, 16, 201] {
            let w = 2.0 * PI / m as f64;
            let ph: Vec<f64> = (0..m).map(|j| -PI + w * (j as f64 + 0.5)).collect();
            for j in 0..m {
                assert_eq!(opposite_phase(&ph, j), m - 1 - j);
            }
        }
    }

    #[test]
    fn overlay_subset_is_even() {
        assert_eq!(overlay_indices(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(overlay_indices(3, 4), vec![0, 1, 2]);
    }

    #[test]
    fn outline_of_single_cell_is_square() {
        let s = outline(&[false, true, false, false], 2, 2);
        assert_eq!(s.len(), 4);
        assert!(outline(&[false; 4], 2, 2).is_empty());
    }
}
