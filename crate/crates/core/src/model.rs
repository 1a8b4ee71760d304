//! Heteroscedastic latent-GP functional mixed-effects model.
//!
//! For observation `i` on a grid of `G` points
//!
//! ```text
//! eta_i       = X_i beta + Z_i b + o
//! log omega_i = W_i gamma + U_i u
//! r_i         = (y_i - eta_i) / omega_i  ~  N(0, tau_s^2 R_s + sigma_eps^2 I)
//! ```
//!
//! and every latent function has a GP prior. Sampling happens on an
//! unconstrained vector where every latent function is whitened,
//! `beta_p = tau_p L_p z_p`, and group effects for one level are
//! `B_g = diag(s) L_Omega Z_g L_R^T`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use thiserror::Error;

use crate::design::{DesignSet, RandomBlock};
use crate::kernels::{
    build_cov, chol_backward, cholesky_with_jitter, corr_logfreq, corr_phase, dcorr_logfreq,
    dcorr_phase, scale_by_logfreq_distance, CovarianceFactorization, GridDomain, Jittered,
    KernelError, KernelParams,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// LKJ shape for group-effect correlations.
pub const LKJ_ETA: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("observation {obs}: cell {cell} has value {value}, outside the domain of the {kind:?} transform")]
    Domain {
        obs: String,
        cell: usize,
        value: f64,
        kind: ResponseKind,
    },
    #[error("observation {obs} has {got} cells, expected {expected}")]
    Cells {
        obs: String,
        got: usize,
        expected: usize,
    },
    #[error("design has {design} rows but there are {responses} responses")]
    Rows { design: usize, responses: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    Dim { got: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("parameters are outside the support: {0}")]
    Support(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    /// Log of a positive amplitude.
    Amplitude,
    /// Logit of a coherence in (0, 1).
    Coherence,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OffsetPolicy {
    /// Offset equals the mean of every transformed value.
    #[default]
    GrandMean,
    Fixed(f64),
}

/// Transformed responses, `N x G`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub y: DMatrix<f64>,
    pub kind: ResponseKind,
    pub offset: f64,
    pub ids: Vec<String>,
}

/// Log- or logit-transforms raw spectra (one row per observation).
pub fn transform_responses(
    raw: &[Vec<f64>],
    ids: &[String],
    kind: ResponseKind,
    policy: OffsetPolicy,
) -> Result<ResponseSet, ModelError> {
    let g = raw.first().map_or(0, Vec::len);
    let mut y = DMatrix::zeros(raw.len(), g);
    for (i, row) in raw.iter().enumerate() {
        let obs = ids.get(i).cloned().unwrap_or_else(|| i.to_string());
        if row.len() != g {
            return Err(ModelError::Cells {
                obs,
                got: row.len(),
                expected: g,
            });
        }
        for (c, &v) in row.iter().enumerate() {
            let t = match kind {
                ResponseKind::Amplitude if v > 0.0 && v.is_finite() => v.ln(),
                ResponseKind::Coherence if v > 0.0 && v < 1.0 => (v / (1.0 - v)).ln(),
                _ => {
                    return Err(ModelError::Domain {
                        obs,
                        cell: c,
                        value: v,
                        kind,
                    })
                }
            };
            y[(i, c)] = t;
        }
    }
    let offset = match policy {
        OffsetPolicy::GrandMean if !raw.is_empty() && g > 0 => y.mean(),
        OffsetPolicy::GrandMean => 0.0,
        OffsetPolicy::Fixed(o) => o,
    };
    let ids = (0..raw.len())
        .map(|i| ids.get(i).cloned().unwrap_or_else(|| i.to_string()))
        .collect();
    Ok(ResponseSet {
        y,
        kind,
        offset,
        ids,
    })
}

/// A latent function with its own kernel (`beta_p` or `gamma_q`).
#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub name: String,
    pub kernel: KernelParams,
    pub values: Vec<f64>,
}

/// Group-level functions for one random term. Row `level * T + t` of
/// `values` belongs to column `offset + level * T + t` of the design.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEffect {
    pub group: String,
    /// Correlation kernel (`tau` is 1).
    pub kernel: KernelParams,
    pub scales: Vec<f64>,
    /// Lower Cholesky factor of the term correlation matrix.
    pub corr_chol: DMatrix<f64>,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub beta: Vec<Effect>,
    pub gamma: Vec<Effect>,
    pub b: Vec<GroupEffect>,
    pub u: Vec<GroupEffect>,
    pub sigma_kernel: KernelParams,
    pub sigma_eps: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub logp: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EffectSlots {
    name: String,
    log_tau: usize,
    log_lf: usize,
    log_lp: Option<usize>,
    z: usize,
}

#[derive(Debug, Clone)]
struct GroupSlots {
    block: RandomBlock,
    log_lf: usize,
    log_lp: Option<usize>,
    log_scale: usize,
    cpc: usize,
    z: usize,
}

#[derive(Debug, Clone)]
struct NoiseSlots {
    log_tau: usize,
    theta_f: usize,
    theta_p: Option<usize>,
    log_eps: usize,
}

/// Positions of every block in the unconstrained vector.
#[derive(Debug, Clone)]
pub struct Layout {
    beta: Vec<EffectSlots>,
    gamma: Vec<EffectSlots>,
    b: Vec<GroupSlots>,
    u: Vec<GroupSlots>,
    noise: NoiseSlots,
    rho: Option<usize>,
    dim: usize,
    names: Vec<String>,
}

impl Layout {
    fn new(design: &DesignSet, grid: &GridDomain) -> Self {
        let g = grid.size();
        let two_d = grid.is_2d();
        let mut names = Vec::new();
        let next = |names: &mut Vec<String>, label: String, n: usize| {
            let at = names.len();
            if n == 1 {
                names.push(label);
            } else {
                names.extend((0..n).map(|i| format!("{label}[{i}]")));
            }
            at
        };
        let effects =
            |prefix: &str, cols: &[String], names: &mut Vec<String>| -> Vec<EffectSlots> {
                cols.iter()
                    .map(|c| {
                        let base = format!("{prefix}[{c}]");
                        let log_tau = next(names, format!("{base}.log_tau"), 1);
                        let log_lf = next(names, format!("{base}.log_lambda_f"), 1);
                        let log_lp =
                            two_d.then(|| next(names, format!("{base}.log_lambda_phi"), 1));
                        let z = next(names, format!("{base}.z"), g);
                        EffectSlots {
                            name: c.clone(),
                            log_tau,
                            log_lf,
                            log_lp,
                            z,
                        }
                    })
                    .collect()
            };
        let beta = effects("beta", &design.x_names, &mut names);
        let gamma = effects("gamma", &design.w_names, &mut names);
        let groups =
            |prefix: &str, blocks: &[RandomBlock], all: &[String], names: &mut Vec<String>| {
                blocks
                    .iter()
                    .map(|blk| {
                        let base = format!("{prefix}[{}]", blk.group);
                        let t = blk.terms();
                        let log_lf = next(names, format!("{base}.log_lambda_f"), 1);
                        let log_lp =
                            two_d.then(|| next(names, format!("{base}.log_lambda_phi"), 1));
                        let log_scale = names.len();
                        for tn in &blk.term_names {
                            names.push(format!("{base}.log_scale[{tn}]"));
                        }
                        let cpc = names.len();
                        for k in 0..t * (t - 1) / 2 {
                            names.push(format!("{base}.cpc[{k}]"));
                        }
                        let z = names.len();
                        for col in &all[blk.offset..blk.offset + blk.width()] {
                            for x in 0..g {
                                names.push(format!("{base}.z[{col}][{x}]"));
                            }
                        }
                        GroupSlots {
                            block: blk.clone(),
                            log_lf,
                            log_lp,
                            log_scale,
                            cpc,
                            z,
                        }
                    })
                    .collect::<Vec<_>>()
            };
        let b = groups("b", &design.z_blocks, &design.z_names, &mut names);
        let u = groups("u", &design.u_blocks, &design.u_names, &mut names);
        let log_tau = next(&mut names, "sigma.log_tau".into(), 1);
        let theta_f = next(&mut names, "sigma.theta_f".into(), 1);
        let theta_p = two_d.then(|| next(&mut names, "sigma.theta_phi".into(), 1));
        let log_eps = next(&mut names, "sigma.log_eps".into(), 1);
        let rho = two_d.then(|| next(&mut names, "rho.logit".into(), 1));
        let dim = names.len();
        Layout {
            beta,
            gamma,
            b,
            u,
            noise: NoiseSlots {
                log_tau,
                theta_f,
                theta_p,
                log_eps,
            },
            rho,
            dim,
            names,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Per-kernel whitening factor with the pieces needed for gradients.
struct Factor {
    f: Jittered,
    h: Option<Jittered>,
    lf: f64,
    lp: Option<f64>,
}

fn rm(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

fn flat_rm(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Factor {
    fn new(grid: &GridDomain, lf: f64, lp: Option<f64>) -> Result<Self, KernelError> {
        let fr = grid.freqs();
        let f = cholesky_with_jitter(&corr_logfreq(fr, fr, lf))?;
        let h = match grid.phases() {
            Some(ph) => Some(cholesky_with_jitter(&corr_phase(
                ph,
                ph,
                lp.expect("2D lambda_phi"),
            ))?),
            None => None,
        };
        Ok(Self { f, h, lf, lp })
    }

    fn k(&self) -> usize {
        self.f.chol.nrows()
    }

    fn m(&self) -> usize {
        self.h.as_ref().map_or(1, |h| h.chol.nrows())
    }

    /// `L z` with `L = L_F kron L_H` in 2D.
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        match &self.h {
            None => (&self.f.chol * nalgebra::DVector::from_column_slice(z))
                .as_slice()
                .to_vec(),
            Some(h) => flat_rm(&(&self.f.chol * rm(self.k(), self.m(), z) * h.chol.transpose())),
        }
    }

    /// `L^T g`.
    fn apply_t(&self, g: &[f64]) -> Vec<f64> {
        match &self.h {
            None => (self.f.chol.transpose() * nalgebra::DVector::from_column_slice(g))
                .as_slice()
                .to_vec(),
            Some(h) => flat_rm(&(self.f.chol.transpose() * rm(self.k(), self.m(), g) * &h.chol)),
        }
    }

    /// Accumulates the adjoint of the factors for `out = L z` given `out_bar`.
    fn accumulate(&self, z: &[f64], out_bar: &[f64], acc: &mut FactorAdjoint) {
        match &self.h {
            None => {
                for i in 0..z.len() {
                    for j in 0..=i {
                        acc.f[(i, j)] += out_bar[i] * z[j];
                    }
                }
            }
            Some(h) => {
                let zm = rm(self.k(), self.m(), z);
                let gm = rm(self.k(), self.m(), out_bar);
                acc.f += &gm * &h.chol * zm.transpose();
                let ah = acc.h.as_mut().expect("2D adjoint");
                *ah += gm.transpose() * &self.f.chol * zm;
            }
        }
    }

    /// Gradients of the lengthscales from accumulated factor adjoints.
    fn lambda_grads(&self, grid: &GridDomain, acc: &FactorAdjoint) -> (f64, f64) {
        let fr = grid.freqs();
        let sf = chol_backward(&self.f.chol, &acc.f);
        let mut dk = self.f.matrix.clone();
        scale_by_logfreq_distance(&mut dk, fr, fr, self.lf);
        let gf = sf.component_mul(&dk).sum();
        let gp = match (&self.h, &acc.h, grid.phases()) {
            (Some(h), Some(ah), Some(ph)) => {
                let sh = chol_backward(&h.chol, ah);
                sh.component_mul(&dcorr_phase(ph, ph, self.lp.expect("2D")))
                    .sum()
            }
            _ => 0.0,
        };
        (gf, gp)
    }

    /// `log |det L|`.
    fn log_det(&self) -> f64 {
        let ld = |j: &Jittered| j.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        match &self.h {
            None => ld(&self.f),
            Some(h) => self.m() as f64 * ld(&self.f) + self.k() as f64 * ld(h),
        }
    }
}

struct FactorAdjoint {
    f: DMatrix<f64>,
    h: Option<DMatrix<f64>>,
}

impl FactorAdjoint {
    fn new(fac: &Factor) -> Self {
        Self {
            f: DMatrix::zeros(fac.k(), fac.k()),
            h: fac
                .h
                .as_ref()
                .map(|h| DMatrix::zeros(h.chol.nrows(), h.chol.nrows())),
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log` of the half-Student-t(3, 1) density and its derivative.
pub fn half_t3(x: f64) -> (f64, f64) {
    let c = std::f64::consts::LN_2 + ln_gamma(2.0) - ln_gamma(1.5) - 0.5 * (3.0 * PI).ln();
    (c - 2.0 * (1.0 + x * x / 3.0).ln(), -4.0 * x / (3.0 + x * x))
}

/// `log` of the Gamma(2, 1) density and its derivative.
pub fn gamma21(x: f64) -> (f64, f64) {
    (x.ln() - x, 1.0 / x - 1.0)
}

/// `log` of the Beta(2, 2) density and its derivative.
pub fn beta22(x: f64) -> (f64, f64) {
    (
        6f64.ln() + x.ln() + (1.0 - x).ln(),
        1.0 / x - 1.0 / (1.0 - x),
    )
}

/// Normal score `Phi^-1(F(l))` of a Gamma(2, 1) variate and its derivative.
fn gamma_normal_score(l: f64) -> Option<(f64, f64)> {
    let n = Normal::standard();
    let lower = gamma_lr(2.0, l);
    let a = if lower <= 0.5 {
        n.inverse_cdf(lower)
    } else {
        -n.inverse_cdf(gamma_ur(2.0, l))
    };
    if !a.is_finite() {
        return None;
    }
    let dens = l * (-l).exp();
    let phi = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
    Some((a, dens / phi))
}

/// Joint prior of a `(lambda_f, lambda_phi)` pair: Gamma(2, 1) marginals
/// coupled by a Gaussian copula with correlation `rho`. Returns the log
/// density and its derivatives with respect to `lambda_f`, `lambda_phi`, `rho`.
pub fn lengthscale_pair_prior(lf: f64, lp: f64, rho: f64) -> (f64, f64, f64, f64) {
    let (gf, dgf) = gamma21(lf);
    let (gp, dgp) = gamma21(lp);
    let (Some((a, da)), Some((b, db))) = (gamma_normal_score(lf), gamma_normal_score(lp)) else {
        return (f64::NEG_INFINITY, 0.0, 0.0, 0.0);
    };
    let d = 1.0 - rho * rho;
    let q = rho * rho * (a * a + b * b) - 2.0 * rho * a * b;
    let lc = -0.5 * d.ln() - q / (2.0 * d);
    let dca = -(rho * rho * a - rho * b) / d;
    let dcb = -(rho * rho * b - rho * a) / d;
    let dq = 2.0 * rho * (a * a + b * b) - 2.0 * a * b;
    let dcr = rho / d - (dq * d + 2.0 * rho * q) / (2.0 * d * d);
    (gf + gp + lc, dgf + dca * da, dgp + dcb * db, dcr)
}

/// Unconstrained canonical partial correlations to a correlation Cholesky
/// factor, returning the factor and the log Jacobian.
pub fn cpc_to_chol(y: &[f64], t: usize) -> (DMatrix<f64>, f64) {
    let mut l = DMatrix::zeros(t, t);
    let mut lj = 0.0;
    l[(0, 0)] = 1.0;
    let mut k = 0;
    for i in 1..t {
        let mut ss: f64 = 0.0;
        for j in 0..i {
            let z = y[k].tanh();
            lj += (1.0 - z * z).ln() + 0.5 * (1.0 - ss).ln();
            l[(i, j)] = z * (1.0 - ss).sqrt();
            ss += l[(i, j)] * l[(i, j)];
            k += 1;
        }
        l[(i, i)] = (1.0 - ss).sqrt();
    }
    (l, lj)
}

/// Reverse pass of [`cpc_to_chol`]: adjoint of `y` given the adjoint of the
/// factor, including the log-Jacobian derivative.
pub fn cpc_backward(y: &[f64], t: usize, l_bar: &DMatrix<f64>) -> Vec<f64> {
    let (l, _) = cpc_to_chol(y, t);
    let mut y_bar = vec![0.0; y.len()];
    let mut k0 = 0;
    for i in 1..t {
        // partial sums of squares before each column
        let mut ss = vec![0.0; i + 1];
        for j in 0..i {
            ss[j + 1] = ss[j] + l[(i, j)] * l[(i, j)];
        }
        let mut ss_bar = -l_bar[(i, i)] / (2.0 * l[(i, i)]);
        for j in (0..i).rev() {
            let k = k0 + j;
            let z = y[k].tanh();
            let r = (1.0 - ss[j]).sqrt();
            let lij_bar = l_bar[(i, j)] + ss_bar * 2.0 * l[(i, j)];
            let z_bar = lij_bar * r;
            ss_bar += lij_bar * z * (-0.5 / r) - 0.5 / (1.0 - ss[j]);
            y_bar[k] = z_bar * (1.0 - z * z) - 2.0 * z;
        }
        k0 += i;
    }
    y_bar
}

/// LKJ log density (without its normalizing constant) on a correlation
/// Cholesky factor, and its derivative with respect to each diagonal entry.
pub fn lkj_chol(l: &DMatrix<f64>, eta: f64) -> (f64, Vec<f64>) {
    let t = l.nrows();
    let mut lp = 0.0;
    let mut d = vec![0.0; t];
    for i in 1..t {
        let c = (t - i - 1) as f64 + 2.0 * eta - 2.0;
        lp += c * l[(i, i)].ln();
        d[i] = c / l[(i, i)];
    }
    (lp, d)
}

/// The model bound to its data; evaluates the log posterior on the
/// unconstrained scale.
#[derive(Debug, Clone)]
pub struct Model {
    grid: GridDomain,
    y: DMatrix<f64>,
    offset: f64,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    u: DMatrix<f64>,
    layout: Layout,
}

struct Hypers {
    beta: Vec<(f64, f64, Option<f64>)>,
    gamma: Vec<(f64, f64, Option<f64>)>,
    b: Vec<GroupHyper>,
    u: Vec<GroupHyper>,
    tau_s: f64,
    lf_s: f64,
    lp_s: Option<f64>,
    /// Upper bounds of the noise lengthscales and which kernel attains them.
    bound_f: (f64, KernelRef),
    bound_p: Option<(f64, KernelRef)>,
    sig_f: f64,
    sig_p: Option<f64>,
    sigma_eps: f64,
    rho: Option<f64>,
    log_jac: f64,
}

struct GroupHyper {
    lf: f64,
    lp: Option<f64>,
    scales: Vec<f64>,
    chol: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug)]
enum KernelRef {
    Beta(usize),
    B(usize),
}

impl Model {
    pub fn new(
        grid: GridDomain,
        responses: &ResponseSet,
        design: &DesignSet,
    ) -> Result<Self, ModelError> {
        if responses.y.nrows() != design.n() {
            return Err(ModelError::Rows {
                design: design.n(),
                responses: responses.y.nrows(),
            });
        }
        if responses.y.ncols() != grid.size() && responses.y.nrows() > 0 {
            return Err(ModelError::Cells {
                obs: responses.ids.first().cloned().unwrap_or_default(),
                got: responses.y.ncols(),
                expected: grid.size(),
            });
        }
        if design.x.ncols() == 0 && design.z.ncols() == 0 {
            return Err(ModelError::Support("the mean formula has no terms".into()));
        }
        let layout = Layout::new(design, &grid);
        let y = if responses.y.nrows() == 0 {
            DMatrix::zeros(0, grid.size())
        } else {
            responses.y.clone()
        };
        Ok(Self {
            grid,
            y,
            offset: responses.offset,
            x: design.x.clone(),
            z: design.z.clone(),
            w: design.w.clone(),
            u: design.u.clone(),
            layout,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn grid(&self) -> &GridDomain {
        &self.grid
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    fn hypers(&self, th: &[f64]) -> Hypers {
        let ly = &self.layout;
        let mut log_jac = 0.0;
        let mut read = |i: usize| {
            log_jac += th[i];
            th[i].exp()
        };
        let beta: Vec<_> = ly
            .beta
            .iter()
            .map(|e| (read(e.log_tau), read(e.log_lf), e.log_lp.map(&mut read)))
            .collect();
        let gamma: Vec<_> = ly
            .gamma
            .iter()
            .map(|e| (read(e.log_tau), read(e.log_lf), e.log_lp.map(&mut read)))
            .collect();
        let group = |slots: &[GroupSlots],
                     read: &mut dyn FnMut(usize) -> f64,
                     lj: &mut f64|
         -> Vec<GroupHyper> {
            slots
                .iter()
                .map(|g| {
                    let t = g.block.terms();
                    let lf = read(g.log_lf);
                    let lp = g.log_lp.map(&mut *read);
                    let scales = (0..t).map(|k| read(g.log_scale + k)).collect();
                    let (chol, j) = cpc_to_chol(&th[g.cpc..g.cpc + t * (t - 1) / 2], t);
                    *lj += j;
                    GroupHyper {
                        lf,
                        lp,
                        scales,
                        chol,
                    }
                })
                .collect()
        };
        let mut extra = 0.0;
        let b = group(&ly.b, &mut read, &mut extra);
        let u = group(&ly.u, &mut read, &mut extra);
        let tau_s = read(ly.noise.log_tau);
        let sigma_eps = read(ly.noise.log_eps);
        log_jac += extra;

        let mut bound_f = (f64::INFINITY, KernelRef::Beta(0));
        let mut bound_p: Option<(f64, KernelRef)> = None;
        let mut consider = |lf: f64, lp: Option<f64>, r: KernelRef| {
            if lf < bound_f.0 {
                bound_f = (lf, r);
            }
            if let Some(lp) = lp {
                if bound_p.is_none_or(|b| lp < b.0) {
                    bound_p = Some((lp, r));
                }
            }
        };
        for (i, e) in beta.iter().enumerate() {
            consider(e.1, e.2, KernelRef::Beta(i));
        }
        for (i, g) in b.iter().enumerate() {
            consider(g.lf, g.lp, KernelRef::B(i));
        }
        let sig_f = logistic(th[ly.noise.theta_f]);
        let lf_s = bound_f.0 * sig_f;
        log_jac += bound_f.0.ln() + sig_f.ln() + (1.0 - sig_f).ln();
        let (sig_p, lp_s) = match (ly.noise.theta_p, bound_p) {
            (Some(i), Some((m, _))) => {
                let s = logistic(th[i]);
                log_jac += m.ln() + s.ln() + (1.0 - s).ln();
                (Some(s), Some(m * s))
            }
            _ => (None, None),
        };
        let rho = ly.rho.map(|i| {
            let s = logistic(th[i]);
            log_jac += s.ln() + (1.0 - s).ln();
            s
        });
        Hypers {
            beta,
            gamma,
            b,
            u,
            tau_s,
            lf_s,
            lp_s,
            bound_f,
            bound_p,
            sig_f,
            sig_p,
            sigma_eps,
            rho,
            log_jac,
        }
    }

    /// Maps an unconstrained vector to model parameters.
    pub fn constrain(&self, th: &[f64]) -> Result<ParameterVector, ModelError> {
        if th.len() != self.dim() {
            return Err(ModelError::Dim {
                got: th.len(),
                expected: self.dim(),
            });
        }
        let h = self.hypers(th);
        let g = self.grid.size();
        let ly = &self.layout;
        let effects = |slots: &[EffectSlots],
                       hs: &[(f64, f64, Option<f64>)]|
         -> Result<Vec<Effect>, ModelError> {
            slots
                .iter()
                .zip(hs)
                .map(|(s, &(tau, lf, lp))| {
                    let fac = Factor::new(&self.grid, lf, lp)?;
                    let values = fac
                        .apply(&th[s.z..s.z + g])
                        .into_iter()
                        .map(|v| tau * v)
                        .collect();
                    Ok(Effect {
                        name: s.name.clone(),
                        kernel: KernelParams::new(tau, lf, lp),
                        values,
                    })
                })
                .collect()
        };
        let groups =
            |slots: &[GroupSlots], hs: &[GroupHyper]| -> Result<Vec<GroupEffect>, ModelError> {
                slots
                    .iter()
                    .zip(hs)
                    .map(|(s, gh)| {
                        let fac = Factor::new(&self.grid, gh.lf, gh.lp)?;
                        let values = group_values(&fac, s, gh, th, g);
                        Ok(GroupEffect {
                            group: s.block.group.clone(),
                            kernel: KernelParams::new(1.0, gh.lf, gh.lp),
                            scales: gh.scales.clone(),
                            corr_chol: gh.chol.clone(),
                            values,
                        })
                    })
                    .collect()
            };
        Ok(ParameterVector {
            beta: effects(&ly.beta, &h.beta)?,
            gamma: effects(&ly.gamma, &h.gamma)?,
            b: groups(&ly.b, &h.b)?,
            u: groups(&ly.u, &h.u)?,
            sigma_kernel: KernelParams::new(h.tau_s, h.lf_s, h.lp_s),
            sigma_eps: h.sigma_eps,
            rho: h.rho,
        })
    }

    /// Names of the values returned by [`Model::constrained_values`].
    pub fn constrained_names(&self, design: &DesignSet) -> Vec<String> {
        let g = self.grid.size();
        let two_d = self.grid.is_2d();
        let mut out = Vec::new();
        let effect = |prefix: &str, name: &str, out: &mut Vec<String>| {
            out.push(format!("{prefix}[{name}].tau"));
            out.push(format!("{prefix}[{name}].lambda_f"));
            if two_d {
                out.push(format!("{prefix}[{name}].lambda_phi"));
            }
            out.extend((0..g).map(|x| format!("{prefix}[{name}][{x}]")));
        };
        for n in &design.x_names {
            effect("beta", n, &mut out);
        }
        for n in &design.w_names {
            effect("gamma", n, &mut out);
        }
        let group =
            |prefix: &str, blocks: &[RandomBlock], cols: &[String], out: &mut Vec<String>| {
                for blk in blocks {
                    out.push(format!("{prefix}[{}].lambda_f", blk.group));
                    if two_d {
                        out.push(format!("{prefix}[{}].lambda_phi", blk.group));
                    }
                    for t in &blk.term_names {
                        out.push(format!("{prefix}[{}].scale[{t}]", blk.group));
                    }
                    for i in 1..blk.terms() {
                        for j in 0..i {
                            out.push(format!(
                                "{prefix}[{}].corr[{},{}]",
                                blk.group, blk.term_names[i], blk.term_names[j]
                            ));
                        }
                    }
                    for c in &cols[blk.offset..blk.offset + blk.width()] {
                        out.extend((0..g).map(|x| format!("{prefix}[{c}][{x}]")));
                    }
                }
            };
        group("b", &design.z_blocks, &design.z_names, &mut out);
        group("u", &design.u_blocks, &design.u_names, &mut out);
        out.push("sigma.tau".into());
        out.push("sigma.lambda_f".into());
        if two_d {
            out.push("sigma.lambda_phi".into());
        }
        out.push("sigma.eps".into());
        if two_d {
            out.push("rho".into());
        }
        out
    }

    /// Flattened constrained parameters in the order of [`Model::constrained_names`].
    pub fn constrained_values(&self, th: &[f64]) -> Result<Vec<f64>, ModelError> {
        let p = self.constrain(th)?;
        let mut out = Vec::new();
        for e in p.beta.iter().chain(&p.gamma) {
            out.push(e.kernel.tau);
            out.push(e.kernel.lambda_f);
            out.extend(e.kernel.lambda_phi);
            out.extend(&e.values);
        }
        for ge in p.b.iter().chain(&p.u) {
            out.push(ge.kernel.lambda_f);
            out.extend(ge.kernel.lambda_phi);
            out.extend(&ge.scales);
            let omega = &ge.corr_chol * ge.corr_chol.transpose();
            for i in 1..omega.nrows() {
                for j in 0..i {
                    out.push(omega[(i, j)]);
                }
            }
            for r in 0..ge.values.nrows() {
                out.extend(ge.values.row(r).iter());
            }
        }
        out.push(p.sigma_kernel.tau);
        out.push(p.sigma_kernel.lambda_f);
        out.extend(p.sigma_kernel.lambda_phi);
        out.push(p.sigma_eps);
        out.extend(p.rho);
        Ok(out)
    }

    fn stack(rows: usize, g: usize, parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, g);
        let mut r = 0;
        for p in parts {
            m.rows_mut(r, p.nrows()).copy_from(p);
            r += p.nrows();
        }
        m
    }

    fn linear_predictors(&self, p: &ParameterVector) -> (DMatrix<f64>, DMatrix<f64>) {
        let g = self.grid.size();
        let bm = DMatrix::from_fn(p.beta.len(), g, |i, j| p.beta[i].values[j]);
        let gm = DMatrix::from_fn(p.gamma.len(), g, |i, j| p.gamma[i].values[j]);
        let bz = Self::stack(
            self.z.ncols(),
            g,
            &p.b.iter().map(|e| &e.values).collect::<Vec<_>>(),
        );
        let bu = Self::stack(
            self.u.ncols(),
            g,
            &p.u.iter().map(|e| &e.values).collect::<Vec<_>>(),
        );
        let eta = (&self.x * bm + &self.z * bz).add_scalar(self.offset);
        let log_w = &self.w * gm + &self.u * bu;
        (eta, log_w)
    }

    /// Log likelihood in the standardized-residual form.
    pub fn log_likelihood(&self, p: &ParameterVector) -> Result<f64, ModelError> {
        let (eta, log_w) = self.linear_predictors(p);
        let noise = NoiseFactor::new(&self.grid, &p.sigma_kernel, p.sigma_eps)?;
        let r = (&self.y - eta).component_div(&log_w.map(f64::exp));
        Ok(noise.log_lik(&r, false).0 - log_w.sum())
    }

    /// Log prior of the constrained parameters: GP priors on every latent
    /// function plus the hyperpriors. The LKJ term omits its constant.
    pub fn log_prior(&self, p: &ParameterVector) -> Result<f64, ModelError> {
        let mut lp = 0.0;
        for e in p.beta.iter().chain(&p.gamma) {
            let cov = build_cov(&self.grid, &e.kernel, false)?;
            lp += gp_log_density(&cov, &e.values);
        }
        for ge in p.b.iter().chain(&p.u) {
            let cov = build_cov(&self.grid, &ge.kernel, true)?;
            let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ge.scales.clone()));
            let sigma_b = &s * &ge.corr_chol * ge.corr_chol.transpose() * &s;
            lp += matrix_normal_log_density(&sigma_b, &cov, &ge.values)?;
        }
        lp += self.log_hyperprior(p);
        Ok(lp)
    }

    fn log_hyperprior(&self, p: &ParameterVector) -> f64 {
        let mut lp = 0.0;
        let pair = |k: &KernelParams| match (k.lambda_phi, p.rho) {
            (Some(lph), Some(rho)) => lengthscale_pair_prior(k.lambda_f, lph, rho).0,
            _ => gamma21(k.lambda_f).0,
        };
        for e in p.beta.iter().chain(&p.gamma) {
            lp += half_t3(e.kernel.tau).0 + pair(&e.kernel);
        }
        for ge in p.b.iter().chain(&p.u) {
            lp += pair(&ge.kernel);
            lp += ge.scales.iter().map(|&s| half_t3(s).0).sum::<f64>();
            lp += lkj_chol(&ge.corr_chol, LKJ_ETA).0;
        }
        lp += half_t3(p.sigma_kernel.tau).0 + pair(&p.sigma_kernel) + half_t3(p.sigma_eps).0;
        if let Some(rho) = p.rho {
            lp += beta22(rho).0;
        }
        lp
    }

    /// Log posterior on the unconstrained scale, writing its gradient into
    /// `grad`. Returns negative infinity outside the numerical support.
    pub fn log_density_grad(&self, th: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|v| *v = 0.0);
        match self.eval(th, grad) {
            Some(lp) if lp.is_finite() && grad.iter().all(|v| v.is_finite()) => lp,
            _ => {
                grad.iter_mut().for_each(|v| *v = 0.0);
                f64::NEG_INFINITY
            }
        }
    }

    pub fn log_posterior_grad(&self, th: &[f64]) -> LogDensityResult {
        let mut grad = vec![0.0; self.dim()];
        let logp = self.log_density_grad(th, &mut grad);
        LogDensityResult { logp, grad }
    }

    fn eval(&self, th: &[f64], grad: &mut [f64]) -> Option<f64> {
        if th.len() != self.dim() || th.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let ly = &self.layout;
        let g = self.grid.size();
        let h = self.hypers(th);
        let mut lp = h.log_jac;

        // constrained-scale adjoints of the hyperparameters
        let mut beta_bar: Vec<[f64; 3]> = vec![[0.0; 3]; ly.beta.len()];
        let mut gamma_bar: Vec<[f64; 3]> = vec![[0.0; 3]; ly.gamma.len()];
        let mut b_bar: Vec<GroupAdjoint> = ly.b.iter().map(GroupAdjoint::new).collect();
        let mut u_bar: Vec<GroupAdjoint> = ly.u.iter().map(GroupAdjoint::new).collect();

        // latent functions
        let beta_fac: Vec<Factor> = h
            .beta
            .iter()
            .map(|&(_, lf, lp)| Factor::new(&self.grid, lf, lp))
            .collect::<Result<_, _>>()
            .ok()?;
        let gamma_fac: Vec<Factor> = h
            .gamma
            .iter()
            .map(|&(_, lf, lp)| Factor::new(&self.grid, lf, lp))
            .collect::<Result<_, _>>()
            .ok()?;
        let b_fac: Vec<Factor> =
            h.b.iter()
                .map(|gh| Factor::new(&self.grid, gh.lf, gh.lp))
                .collect::<Result<_, _>>()
                .ok()?;
        let u_fac: Vec<Factor> =
            h.u.iter()
                .map(|gh| Factor::new(&self.grid, gh.lf, gh.lp))
                .collect::<Result<_, _>>()
                .ok()?;

        let whitened = |fac: &[Factor], slots: &[EffectSlots]| -> Vec<Vec<f64>> {
            fac.iter()
                .zip(slots)
                .map(|(f, s)| f.apply(&th[s.z..s.z + g]))
                .collect()
        };
        let beta_w = whitened(&beta_fac, &ly.beta);
        let gamma_w = whitened(&gamma_fac, &ly.gamma);
        let bm = DMatrix::from_fn(ly.beta.len(), g, |i, j| h.beta[i].0 * beta_w[i][j]);
        let gm = DMatrix::from_fn(ly.gamma.len(), g, |i, j| h.gamma[i].0 * gamma_w[i][j]);
        let b_parts: Vec<(Vec<Vec<f64>>, DMatrix<f64>)> =
            ly.b.iter()
                .zip(&h.b)
                .zip(&b_fac)
                .map(|((s, gh), f)| group_forward(f, s, gh, th, g))
                .collect();
        let u_parts: Vec<(Vec<Vec<f64>>, DMatrix<f64>)> =
            ly.u.iter()
                .zip(&h.u)
                .zip(&u_fac)
                .map(|((s, gh), f)| group_forward(f, s, gh, th, g))
                .collect();
        let bz = Self::stack(
            self.z.ncols(),
            g,
            &b_parts.iter().map(|p| &p.1).collect::<Vec<_>>(),
        );
        let bu = Self::stack(
            self.u.ncols(),
            g,
            &u_parts.iter().map(|p| &p.1).collect::<Vec<_>>(),
        );

        // likelihood
        let eta = (&self.x * &bm + &self.z * &bz).add_scalar(self.offset);
        let log_w = &self.w * &gm + &self.u * &bu;
        let omega = log_w.map(f64::exp);
        let r = (&self.y - &eta).component_div(&omega);
        let kp = KernelParams::new(h.tau_s, h.lf_s, h.lp_s);
        let noise = NoiseFactor::new(&self.grid, &kp, h.sigma_eps).ok()?;
        let (ll, adj) = noise.log_lik(&r, true);
        let adj = adj.expect("requested");
        lp += ll - log_w.sum();
        // adj.alpha = C^-1 r per row; d ll / d r = -alpha
        let eta_bar = adj.alpha.component_div(&omega);
        let logw_bar = adj.alpha.component_mul(&r).add_scalar(-1.0);

        let bm_bar = self.x.transpose() * &eta_bar;
        let bz_bar = self.z.transpose() * &eta_bar;
        let gm_bar = self.w.transpose() * &logw_bar;
        let bu_bar = self.u.transpose() * &logw_bar;

        // effects: beta_p = tau L z
        let effect_back = |fac: &[Factor],
                           slots: &[EffectSlots],
                           hs: &[(f64, f64, Option<f64>)],
                           white: &[Vec<f64>],
                           bar: &DMatrix<f64>,
                           out: &mut [[f64; 3]],
                           grad: &mut [f64],
                           lp: &mut f64| {
            for (p, (f, s)) in fac.iter().zip(slots).enumerate() {
                let tau = hs[p].0;
                let ob: Vec<f64> = bar.row(p).iter().copied().collect();
                let z = &th[s.z..s.z + g];
                out[p][0] += white[p].iter().zip(&ob).map(|(a, b)| a * b).sum::<f64>();
                let scaled: Vec<f64> = ob.iter().map(|v| v * tau).collect();
                let zb = f.apply_t(&scaled);
                for x in 0..g {
                    grad[s.z + x] += zb[x] - z[x];
                }
                *lp += -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * g as f64 * LN_2PI;
                let mut acc = FactorAdjoint::new(f);
                f.accumulate(z, &scaled, &mut acc);
                let (gf, gp) = f.lambda_grads(&self.grid, &acc);
                out[p][1] += gf;
                out[p][2] += gp;
            }
        };
        effect_back(
            &beta_fac,
            &ly.beta,
            &h.beta,
            &beta_w,
            &bm_bar,
            &mut beta_bar,
            grad,
            &mut lp,
        );
        effect_back(
            &gamma_fac,
            &ly.gamma,
            &h.gamma,
            &gamma_w,
            &gm_bar,
            &mut gamma_bar,
            grad,
            &mut lp,
        );

        let mut row = 0;
        for (i, s) in ly.b.iter().enumerate() {
            let w = s.block.width();
            let bar = bz_bar.rows(row, w).into_owned();
            lp += group_backward(
                &b_fac[i],
                s,
                &h.b[i],
                &b_parts[i].0,
                &bar,
                th,
                g,
                &self.grid,
                &mut b_bar[i],
                grad,
            );
            row += w;
        }
        let mut row = 0;
        for (i, s) in ly.u.iter().enumerate() {
            let w = s.block.width();
            let bar = bu_bar.rows(row, w).into_owned();
            lp += group_backward(
                &u_fac[i],
                s,
                &h.u[i],
                &u_parts[i].0,
                &bar,
                th,
                g,
                &self.grid,
                &mut u_bar[i],
                grad,
            );
            row += w;
        }

        // noise kernel adjoints from the likelihood
        let mut tau_s_bar = adj.tau_bar;
        let mut lf_s_bar = adj.lf_bar;
        let mut lp_s_bar = adj.lp_bar;
        let mut eps_bar = adj.eps_bar;
        let mut rho_bar = 0.0;

        // hyperpriors
        let pair = |lf: f64,
                    lph: Option<f64>,
                    bar_f: &mut f64,
                    bar_p: &mut f64,
                    rho_bar: &mut f64|
         -> f64 {
            match (lph, h.rho) {
                (Some(lph), Some(rho)) => {
                    let (v, df, dp, dr) = lengthscale_pair_prior(lf, lph, rho);
                    *bar_f += df;
                    *bar_p += dp;
                    *rho_bar += dr;
                    v
                }
                _ => {
                    let (v, d) = gamma21(lf);
                    *bar_f += d;
                    v
                }
            }
        };
        for (hs, bars) in [(&h.beta, &mut beta_bar), (&h.gamma, &mut gamma_bar)] {
            for (e, bar) in hs.iter().zip(bars.iter_mut()) {
                let (v, d) = half_t3(e.0);
                lp += v;
                bar[0] += d;
                let (mut bf, mut bp) = (0.0, 0.0);
                lp += pair(e.1, e.2, &mut bf, &mut bp, &mut rho_bar);
                bar[1] += bf;
                bar[2] += bp;
            }
        }
        for (hs, bars) in [(&h.b, &mut b_bar), (&h.u, &mut u_bar)] {
            for (gh, bar) in hs.iter().zip(bars.iter_mut()) {
                let (mut bf, mut bp) = (0.0, 0.0);
                lp += pair(gh.lf, gh.lp, &mut bf, &mut bp, &mut rho_bar);
                bar.lf += bf;
                bar.lp += bp;
                for (k, &s) in gh.scales.iter().enumerate() {
                    let (v, d) = half_t3(s);
                    lp += v;
                    bar.scales[k] += d;
                }
                let (v, d) = lkj_chol(&gh.chol, LKJ_ETA);
                lp += v;
                for (i, di) in d.iter().enumerate() {
                    bar.chol[(i, i)] += di;
                }
            }
        }
        let (v, d) = half_t3(h.tau_s);
        lp += v;
        tau_s_bar += d;
        let (mut bf, mut bp) = (0.0, 0.0);
        lp += pair(h.lf_s, h.lp_s, &mut bf, &mut bp, &mut rho_bar);
        lf_s_bar += bf;
        lp_s_bar += bp;
        let (v, d) = half_t3(h.sigma_eps);
        lp += v;
        eps_bar += d;
        if let Some(rho) = h.rho {
            let (v, d) = beta22(rho);
            lp += v;
            rho_bar += d;
        }

        // ordered noise lengthscales: lambda_s = m * logistic(theta)
        let bound_push = |r: KernelRef,
                          axis: usize,
                          v: f64,
                          beta_bar: &mut [[f64; 3]],
                          b_bar: &mut [GroupAdjoint]| match r {
            KernelRef::Beta(i) => beta_bar[i][1 + axis] += v,
            KernelRef::B(i) => {
                if axis == 0 {
                    b_bar[i].lf += v
                } else {
                    b_bar[i].lp += v
                }
            }
        };
        let (m, r) = h.bound_f;
        grad[ly.noise.theta_f] += lf_s_bar * m * h.sig_f * (1.0 - h.sig_f) + 1.0 - 2.0 * h.sig_f;
        bound_push(
            r,
            0,
            lf_s_bar * h.sig_f + 1.0 / m,
            &mut beta_bar,
            &mut b_bar,
        );
        if let (Some(i), Some((m, r)), Some(s)) = (ly.noise.theta_p, h.bound_p, h.sig_p) {
            grad[i] += lp_s_bar * m * s * (1.0 - s) + 1.0 - 2.0 * s;
            bound_push(r, 1, lp_s_bar * s + 1.0 / m, &mut beta_bar, &mut b_bar);
        }

        // constrained adjoints to log-scale coordinates, plus Jacobian terms
        let to_log = |grad: &mut [f64], i: usize, x: f64, bar: f64| grad[i] += bar * x + 1.0;
        for (slots, hs, bars) in [
            (&ly.beta, &h.beta, &beta_bar),
            (&ly.gamma, &h.gamma, &gamma_bar),
        ] {
            for ((s, e), bar) in slots.iter().zip(hs.iter()).zip(bars.iter()) {
                to_log(grad, s.log_tau, e.0, bar[0]);
                to_log(grad, s.log_lf, e.1, bar[1]);
                if let (Some(i), Some(l)) = (s.log_lp, e.2) {
                    to_log(grad, i, l, bar[2]);
                }
            }
        }
        for (slots, hs, bars) in [(&ly.b, &h.b, &b_bar), (&ly.u, &h.u, &u_bar)] {
            for ((s, gh), bar) in slots.iter().zip(hs.iter()).zip(bars.iter()) {
                to_log(grad, s.log_lf, gh.lf, bar.lf);
                if let (Some(i), Some(l)) = (s.log_lp, gh.lp) {
                    to_log(grad, i, l, bar.lp);
                }
                for (k, &sc) in gh.scales.iter().enumerate() {
                    to_log(grad, s.log_scale + k, sc, bar.scales[k]);
                }
                let t = s.block.terms();
                let n = t * (t - 1) / 2;
                let yb = cpc_backward(&th[s.cpc..s.cpc + n], t, &bar.chol);
                for k in 0..n {
                    grad[s.cpc + k] += yb[k];
                }
            }
        }
        to_log(grad, ly.noise.log_tau, h.tau_s, tau_s_bar);
        to_log(grad, ly.noise.log_eps, h.sigma_eps, eps_bar);
        if let (Some(i), Some(rho)) = (ly.rho, h.rho) {
            grad[i] += rho_bar * rho * (1.0 - rho) + 1.0 - 2.0 * rho;
        }
        Some(lp)
    }
}

/// Constrained-scale adjoints of one group term's hyperparameters.
struct GroupAdjoint {
    lf: f64,
    lp: f64,
    scales: Vec<f64>,
    chol: DMatrix<f64>,
}

impl GroupAdjoint {
    fn new(s: &GroupSlots) -> Self {
        let t = s.block.terms();
        Self {
            lf: 0.0,
            lp: 0.0,
            scales: vec![0.0; t],
            chol: DMatrix::zeros(t, t),
        }
    }
}

fn group_z<'a>(th: &'a [f64], s: &GroupSlots, level: usize, t: usize, g: usize) -> &'a [f64] {
    let start = s.z + (level * s.block.terms() + t) * g;
    &th[start..start + g]
}

/// Whitened rows `L_R z` for every (level, term) and the stacked values.
fn group_forward(
    fac: &Factor,
    s: &GroupSlots,
    gh: &GroupHyper,
    th: &[f64],
    g: usize,
) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    let t_n = s.block.terms();
    let levels = s.block.levels.len();
    let mixing = DMatrix::from_fn(t_n, t_n, |i, j| gh.scales[i] * gh.chol[(i, j)]);
    let mut white = Vec::with_capacity(levels * t_n);
    let mut values = DMatrix::zeros(levels * t_n, g);
    for l in 0..levels {
        let rows: Vec<Vec<f64>> = (0..t_n)
            .map(|t| fac.apply(group_z(th, s, l, t, g)))
            .collect();
        for i in 0..t_n {
            for x in 0..g {
                values[(l * t_n + i, x)] = (0..=i).map(|j| mixing[(i, j)] * rows[j][x]).sum();
            }
        }
        white.extend(rows);
    }
    (white, values)
}

fn group_values(
    fac: &Factor,
    s: &GroupSlots,
    gh: &GroupHyper,
    th: &[f64],
    g: usize,
) -> DMatrix<f64> {
    group_forward(fac, s, gh, th, g).1
}

/// Reverse pass for one group term; returns the whitened-prior log density.
#[allow(clippy::too_many_arguments)]
fn group_backward(
    fac: &Factor,
    s: &GroupSlots,
    gh: &GroupHyper,
    white: &[Vec<f64>],
    bar: &DMatrix<f64>,
    th: &[f64],
    g: usize,
    grid: &GridDomain,
    out: &mut GroupAdjoint,
    grad: &mut [f64],
) -> f64 {
    let t_n = s.block.terms();
    let levels = s.block.levels.len();
    let mut acc = FactorAdjoint::new(fac);
    let mut lp = 0.0;
    let mut bars = Vec::with_capacity(levels * t_n);
    for l in 0..levels {
        // B = S Lo M with M rows = white
        let b_bar = |i: usize, x: usize| bar[(l * t_n + i, x)];
        for i in 0..t_n {
            let lom: Vec<f64> = (0..g)
                .map(|x| {
                    (0..=i)
                        .map(|j| gh.chol[(i, j)] * white[l * t_n + j][x])
                        .sum()
                })
                .collect();
            out.scales[i] += (0..g).map(|x| b_bar(i, x) * lom[x]).sum::<f64>();
            for j in 0..=i {
                out.chol[(i, j)] += gh.scales[i]
                    * (0..g)
                        .map(|x| b_bar(i, x) * white[l * t_n + j][x])
                        .sum::<f64>();
            }
        }
        for j in 0..t_n {
            // M_bar row j = sum_i Lo[i,j] s_i B_bar row i
            let m_bar: Vec<f64> = (0..g)
                .map(|x| {
                    (j..t_n)
                        .map(|i| gh.chol[(i, j)] * gh.scales[i] * b_bar(i, x))
                        .sum()
                })
                .collect();
            let z = group_z(th, s, l, j, g);
            lp += -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * g as f64 * LN_2PI;
            bars.push(m_bar);
        }
    }
    let cols = bars.len();
    let zs = DMatrix::from_column_slice(g, cols, &th[s.z..s.z + cols * g]);
    let zb: Vec<Vec<f64>> = match fac.h {
        None => {
            let mb = DMatrix::from_fn(g, cols, |x, c| bars[c][x]);
            acc.f += &mb * zs.transpose();
            let zb = fac.f.chol.tr_mul(&mb);
            zb.column_iter()
                .map(|c| c.iter().copied().collect())
                .collect()
        }
        Some(_) => (0..cols)
            .map(|c| {
                fac.accumulate(zs.column(c).as_slice(), &bars[c], &mut acc);
                fac.apply_t(&bars[c])
            })
            .collect(),
    };
    for (c, zbc) in zb.iter().enumerate() {
        let zc = zs.column(c);
        for x in 0..g {
            grad[s.z + c * g + x] += zbc[x] - zc[x];
        }
    }
    let (gf, gp) = fac.lambda_grads(grid, &acc);
    out.lf += gf;
    out.lp += gp;
    lp
}

/// Noise covariance `tau^2 R + sigma^2 I`: dense Cholesky on 1D grids,
/// per-axis eigendecompositions on 2D grids.
enum NoiseFactor {
    Dense {
        chol: DMatrix<f64>,
        r: DMatrix<f64>,
        dr: DMatrix<f64>,
        tau: f64,
        eps: f64,
    },
    Kron {
        qf: DMatrix<f64>,
        ef: Vec<f64>,
        qh: DMatrix<f64>,
        eh: Vec<f64>,
        rf: DMatrix<f64>,
        rh: DMatrix<f64>,
        drf: DMatrix<f64>,
        drh: DMatrix<f64>,
        tau: f64,
        eps: f64,
    },
}

struct NoiseAdjoint {
    alpha: DMatrix<f64>,
    tau_bar: f64,
    lf_bar: f64,
    lp_bar: f64,
    eps_bar: f64,
}

impl NoiseFactor {
    fn new(grid: &GridDomain, k: &KernelParams, eps: f64) -> Result<Self, ModelError> {
        let f = grid.freqs();
        let tau = k.tau;
        match grid.phases() {
            None => {
                let r = cholesky_with_jitter(&corr_logfreq(f, f, k.lambda_f))?.matrix;
                let mut c = &r * (tau * tau);
                for i in 0..c.nrows() {
                    c[(i, i)] += eps * eps;
                }
                let chol = c
                    .cholesky()
                    .ok_or(ModelError::Kernel(KernelError::NotPositiveDefinite {
                        size: f.len(),
                        jitter: 0.0,
                    }))?
                    .unpack();
                let mut dr = r.clone();
                scale_by_logfreq_distance(&mut dr, f, f, k.lambda_f);
                Ok(NoiseFactor::Dense {
                    chol,
                    r,
                    dr,
                    tau,
                    eps,
                })
            }
            Some(h) => {
                let lp = k
                    .lambda_phi
                    .ok_or_else(|| ModelError::Support("missing lambda_phi".into()))?;
                let rf = cholesky_with_jitter(&corr_logfreq(f, f, k.lambda_f))?.matrix;
                let rh = cholesky_with_jitter(&corr_phase(h, h, lp))?.matrix;
                let sf = SymmetricEigen::new(rf.clone());
                let sh = SymmetricEigen::new(rh.clone());
                Ok(NoiseFactor::Kron {
                    qf: sf.eigenvectors,
                    ef: sf.eigenvalues.iter().copied().collect(),
                    qh: sh.eigenvectors,
                    eh: sh.eigenvalues.iter().copied().collect(),
                    rf,
                    rh,
                    drf: dcorr_logfreq(f, f, k.lambda_f),
                    drh: dcorr_phase(h, h, lp),
                    tau,
                    eps,
                })
            }
        }
    }

    /// Sum over rows of `log N(r_i | 0, C)`, with adjoints when requested.
    fn log_lik(&self, r: &DMatrix<f64>, want: bool) -> (f64, Option<NoiseAdjoint>) {
        let n = r.nrows();
        let g = r.ncols();
        match self {
            NoiseFactor::Dense {
                chol,
                r: corr,
                dr,
                tau,
                eps,
            } => {
                let logdet = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
                // alpha^T = C^-1 r^T
                let rt = r.transpose();
                let half = chol.solve_lower_triangular(&rt).expect("factor");
                let quad = half.norm_squared();
                let ll = -0.5 * quad - 0.5 * n as f64 * (logdet + g as f64 * LN_2PI);
                if !want {
                    return (ll, None);
                }
                let alpha_t = chol.tr_solve_lower_triangular(&half).expect("factor");
                let cinv = crate::kernels::chol_inverse(chol);
                let c_bar = (&alpha_t * alpha_t.transpose()) * 0.5 - cinv * (0.5 * n as f64);
                let adj = NoiseAdjoint {
                    alpha: alpha_t.transpose(),
                    tau_bar: 2.0 * tau * c_bar.component_mul(corr).sum(),
                    lf_bar: tau * tau * c_bar.component_mul(dr).sum(),
                    lp_bar: 0.0,
                    eps_bar: 2.0 * eps * c_bar.trace(),
                };
                (ll, Some(adj))
            }
            NoiseFactor::Kron {
                qf,
                ef,
                qh,
                eh,
                rf,
                rh,
                drf,
                drh,
                tau,
                eps,
            } => {
                let (k, m) = (ef.len(), eh.len());
                let t2 = tau * tau;
                let d = DMatrix::from_fn(k, m, |i, j| t2 * ef[i] * eh[j] + eps * eps);
                let logdet: f64 = d.iter().map(|v| v.ln()).sum();
                let mut quad = 0.0;
                let mut alphas = DMatrix::zeros(n, g);
                let mut d_bar = d.map(|v| -0.5 * n as f64 / v);
                let mut rf_bar = DMatrix::zeros(k, k);
                let mut rh_bar = DMatrix::zeros(m, m);
                for i in 0..n {
                    let ri = rm(k, m, &r.row(i).iter().copied().collect::<Vec<_>>());
                    let rot = qf.transpose() * &ri * qh;
                    let a_rot = rot.component_div(&d);
                    quad += rot.component_mul(&a_rot).sum();
                    if want {
                        d_bar += a_rot.map(|v| 0.5 * v * v);
                        let a = qf * &a_rot * qh.transpose();
                        rf_bar += (&a * rh * a.transpose()) * (0.5 * t2);
                        rh_bar += (a.transpose() * rf * &a) * (0.5 * t2);
                        for (x, v) in flat_rm(&a).into_iter().enumerate() {
                            alphas[(i, x)] = v;
                        }
                    }
                }
                let ll = -0.5 * quad - 0.5 * n as f64 * (logdet + g as f64 * LN_2PI);
                if !want {
                    return (ll, None);
                }
                let sf: Vec<f64> = (0..k)
                    .map(|i| (0..m).map(|j| eh[j] / d[(i, j)]).sum())
                    .collect();
                let sh: Vec<f64> = (0..m)
                    .map(|j| (0..k).map(|i| ef[i] / d[(i, j)]).sum())
                    .collect();
                let diag = |q: &DMatrix<f64>, s: &[f64]| {
                    q * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(s))
                        * q.transpose()
                };
                rf_bar -= diag(qf, &sf) * (0.5 * n as f64 * t2);
                rh_bar -= diag(qh, &sh) * (0.5 * n as f64 * t2);
                let mut dt2 = 0.0;
                for i in 0..k {
                    for j in 0..m {
                        dt2 += d_bar[(i, j)] * ef[i] * eh[j];
                    }
                }
                let adj = NoiseAdjoint {
                    alpha: alphas,
                    tau_bar: 2.0 * tau * dt2,
                    lf_bar: rf_bar.component_mul(drf).sum(),
                    lp_bar: rh_bar.component_mul(drh).sum(),
                    eps_bar: 2.0 * eps * d_bar.sum(),
                };
                (ll, Some(adj))
            }
        }
    }
}

/// `log N(v | 0, Sigma)` using a covariance factorization.
pub fn gp_log_density(cov: &CovarianceFactorization, v: &[f64]) -> f64 {
    let inv = cov.inverse();
    let x = nalgebra::DVector::from_column_slice(v);
    let quad = (x.transpose() * inv * &x)[(0, 0)];
    -0.5 * quad - 0.5 * (cov.log_det() + v.len() as f64 * LN_2PI)
}

/// Sum over levels of `log N(vec(B_l) | 0, Sigma_b kron R)` where `values`
/// stacks the `T x G` blocks of every level.
fn matrix_normal_log_density(
    sigma_b: &DMatrix<f64>,
    cov: &CovarianceFactorization,
    values: &DMatrix<f64>,
) -> Result<f64, ModelError> {
    let t = sigma_b.nrows();
    let g = cov.size();
    let sb = sigma_b
        .clone()
        .cholesky()
        .ok_or_else(|| ModelError::Support("group covariance".into()))?;
    let sb_logdet = 2.0 * sb.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sb_inv = sb.inverse();
    let r_inv = cov.inverse();
    let mut lp = 0.0;
    for l in 0..values.nrows() / t {
        let blk = values.rows(l * t, t);
        let quad = (&sb_inv * blk * &r_inv * blk.transpose()).trace();
        lp += -0.5 * quad
            - 0.5 * (g as f64 * sb_logdet + t as f64 * cov.log_det() + (t * g) as f64 * LN_2PI);
    }
    Ok(lp)
}

/// Standardized-residual log likelihood for explicit parameters.
pub fn log_likelihood(
    params: &ParameterVector,
    y: &ResponseSet,
    design: &DesignSet,
    grid: &GridDomain,
) -> Result<f64, ModelError> {
    Model::new(grid.clone(), y, design)?.log_likelihood(params)
}

/// Centered log prior for explicit parameters.
pub fn log_prior(
    params: &ParameterVector,
    y: &ResponseSet,
    design: &DesignSet,
    grid: &GridDomain,
) -> Result<f64, ModelError> {
    Model::new(grid.clone(), y, design)?.log_prior(params)
}

/// Sum of `log |det|` of every whitening map at `th`; the centered log
/// prior equals the whitened log prior minus this value.
pub fn whitening_log_det(model: &Model, th: &[f64]) -> Result<f64, ModelError> {
    let h = model.hypers(th);
    let g = model.grid.size() as f64;
    let mut total = 0.0;
    for &(tau, lf, lp) in h.beta.iter().chain(&h.gamma) {
        total += Factor::new(&model.grid, lf, lp)?.log_det() + g * tau.ln();
    }
    for (s, gh) in model
        .layout
        .b
        .iter()
        .zip(&h.b)
        .chain(model.layout.u.iter().zip(&h.u))
    {
        let t = s.block.terms() as f64;
        let levels = s.block.levels.len() as f64;
        let fac = Factor::new(&model.grid, gh.lf, gh.lp)?;
        let mix: f64 = gh.scales.iter().map(|v| v.ln()).sum::<f64>()
            + gh.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += levels * (g * mix + t * fac.log_det());
    }
    Ok(total)
}
