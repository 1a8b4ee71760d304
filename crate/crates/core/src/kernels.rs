//! Covariance kernels on frequency and frequency x phase grids.
//!
//! The 2D covariance is separable, `tau^2 (R_F kron R_H)`, so every
//! factorization is done per axis. Grids are stored row-major with
//! frequency as the slow index: cell `(k, m)` lives at `k * M + m`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Relative diagonal jitter added before factorization.
pub const JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("grid is invalid: {0}")]
    InvalidGrid(String),
    #[error("kernel parameters must be positive and finite: {0}")]
    InvalidParams(String),
    #[error("matrix of size {size} is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { size: usize, jitter: f64 },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("source and target grids have different dimensionality")]
    DimensionMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridDomain {
    Freq { freqs: Vec<f64> },
    FreqPhase { freqs: Vec<f64>, phases: Vec<f64> },
}

impl GridDomain {
    pub fn one_d(freqs: Vec<f64>) -> Result<Self, KernelError> {
        check_freqs(&freqs)?;
        Ok(GridDomain::Freq { freqs })
    }

    pub fn two_d(freqs: Vec<f64>, phases: Vec<f64>) -> Result<Self, KernelError> {
        check_freqs(&freqs)?;
        if phases.is_empty() || phases.iter().any(|p| !p.is_finite()) {
            return Err(KernelError::InvalidGrid(
                "phases must be finite and non-empty".into(),
            ));
        }
        Ok(GridDomain::FreqPhase { freqs, phases })
    }

    /// Grid of `k` log-spaced frequency centres over `[f_lo, f_hi]`, with
    /// `m` uniform phase centres over `[-pi, pi)` when `m` is given.
    pub fn log_uniform(
        f_lo: f64,
        f_hi: f64,
        k: usize,
        m: Option<usize>,
    ) -> Result<Self, KernelError> {
        if !(f_lo > 0.0 && f_hi > f_lo) || k == 0 {
            return Err(KernelError::InvalidGrid(format!(
                "bad frequency range {f_lo}..{f_hi}"
            )));
        }
        let step = (f_hi / f_lo).ln() / k as f64;
        let freqs = (0..k)
            .map(|i| (f_lo.ln() + step * (i as f64 + 0.5)).exp())
            .collect();
        match m {
            None => Self::one_d(freqs),
            Some(m) if m > 0 => {
                let w = 2.0 * std::f64::consts::PI / m as f64;
                let phases = (0..m)
                    .map(|j| -std::f64::consts::PI + w * (j as f64 + 0.5))
                    .collect();
                Self::two_d(freqs, phases)
            }
            Some(_) => Err(KernelError::InvalidGrid(
                "need at least one phase bin".into(),
            )),
        }
    }

    pub fn freqs(&self) -> &[f64] {
        match self {
            GridDomain::Freq { freqs } | GridDomain::FreqPhase { freqs, .. } => freqs,
        }
    }

    pub fn phases(&self) -> Option<&[f64]> {
        match self {
            GridDomain::Freq { .. } => None,
            GridDomain::FreqPhase { phases, .. } => Some(phases),
        }
    }

    pub fn is_2d(&self) -> bool {
        matches!(self, GridDomain::FreqPhase { .. })
    }

    /// Number of phase cells, 1 on a frequency-only grid.
    pub fn n_phase(&self) -> usize {
        self.phases().map_or(1, <[f64]>::len)
    }

    pub fn size(&self) -> usize {
        self.freqs().len() * self.n_phase()
    }

    pub fn index(&self, k: usize, m: usize) -> usize {
        k * self.n_phase() + m
    }
}

fn check_freqs(freqs: &[f64]) -> Result<(), KernelError> {
    if freqs.is_empty() || freqs.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(KernelError::InvalidGrid(
            "frequencies must be positive, finite and non-empty".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub tau: f64,
    pub lambda_f: f64,
    pub lambda_phi: Option<f64>,
}

impl KernelParams {
    pub fn new(tau: f64, lambda_f: f64, lambda_phi: Option<f64>) -> Self {
        Self {
            tau,
            lambda_f,
            lambda_phi,
        }
    }

    fn check(&self, grid: &GridDomain) -> Result<(), KernelError> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.tau) || !pos(self.lambda_f) {
            return Err(KernelError::InvalidParams(format!("{self:?}")));
        }
        if grid.is_2d() && !self.lambda_phi.is_some_and(pos) {
            return Err(KernelError::InvalidParams(
                "2D grids need a positive lambda_phi".into(),
            ));
        }
        Ok(())
    }
}

/// `tau^2 exp(-(log f - log f')^2 / (2 lambda^2))`.
pub fn k_logfreq(f: f64, f2: f64, tau: f64, lambda: f64) -> f64 {
    let d = f.ln() - f2.ln();
    tau * tau * (-0.5 * d * d / (lambda * lambda)).exp()
}

/// `exp(-2 sin^2(|phi - phi'| / 2) / lambda^2)`.
pub fn k_phase(phi: f64, phi2: f64, lambda: f64) -> f64 {
    let s = (0.5 * (phi - phi2).abs()).sin();
    (-2.0 * s * s / (lambda * lambda)).exp()
}

/// Unit-amplitude log-frequency correlation between two sets of frequencies.
pub fn corr_logfreq(a: &[f64], b: &[f64], lambda: f64) -> DMatrix<f64> {
    let (la, lb) = (logs(a), logs(b));
    let c = -0.5 / (lambda * lambda);
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d = la[i] - lb[j];
        (c * d * d).exp()
    })
}

/// Derivative of [`corr_logfreq`] with respect to `lambda`.
pub fn dcorr_logfreq(a: &[f64], b: &[f64], lambda: f64) -> DMatrix<f64> {
    let mut k = corr_logfreq(a, b, lambda);
    scale_by_logfreq_distance(&mut k, a, b, lambda);
    k
}

fn logs(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.ln()).collect()
}

/// Turns a correlation matrix on `(a, b)` into its `lambda` derivative
/// in place. Diagonal jitter is annihilated by the zero distance.
pub(crate) fn scale_by_logfreq_distance(k: &mut DMatrix<f64>, a: &[f64], b: &[f64], lambda: f64) {
    let (la, lb) = (logs(a), logs(b));
    let c = 1.0 / lambda.powi(3);
    for j in 0..b.len() {
        for i in 0..a.len() {
            let d = la[i] - lb[j];
            k[(i, j)] *= c * d * d;
        }
    }
}

pub fn corr_phase(a: &[f64], b: &[f64], lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| k_phase(a[i], b[j], lambda))
}

/// Derivative of [`corr_phase`] with respect to `lambda`.
pub fn dcorr_phase(a: &[f64], b: &[f64], lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let s = (0.5 * (a[i] - b[j]).abs()).sin();
        k_phase(a[i], b[j], lambda) * 4.0 * s * s / lambda.powi(3)
    })
}

/// A symmetric matrix with the jitter that made it factorizable.
#[derive(Debug, Clone)]
pub struct Jittered {
    /// Matrix including the jitter on its diagonal.
    pub matrix: DMatrix<f64>,
    /// Lower Cholesky factor of `matrix`.
    pub chol: DMatrix<f64>,
    pub jitter: f64,
}

/// Cholesky factorization after adding `JITTER` times the mean diagonal,
/// escalating by ten until `MAX_JITTER`.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<Jittered, KernelError> {
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER;
    loop {
        let jitter = rel * scale;
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += jitter;
        }
        if let Some(c) = j.clone().cholesky() {
            return Ok(Jittered {
                matrix: j,
                chol: c.unpack(),
                jitter,
            });
        }
        rel *= 10.0;
        if rel > MAX_JITTER * (1.0 + 1e-9) {
            return Err(KernelError::NotPositiveDefinite { size: n, jitter });
        }
    }
}

/// Per-axis factorization: jittered correlation, its Cholesky factor and
/// its eigendecomposition.
#[derive(Debug, Clone)]
pub struct AxisFactor {
    /// Correlation before jitter.
    pub raw: DMatrix<f64>,
    pub jittered: Jittered,
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl AxisFactor {
    pub fn new(raw: DMatrix<f64>) -> Result<Self, KernelError> {
        let jittered = cholesky_with_jitter(&raw)?;
        let eig = SymmetricEigen::new(jittered.matrix.clone());
        Ok(Self {
            raw,
            jittered,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn size(&self) -> usize {
        self.raw.nrows()
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.jittered.chol
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.jittered.matrix
    }
}

#[derive(Debug, Clone)]
pub enum CovarianceFactorization {
    Dense {
        tau2: f64,
        raw: DMatrix<f64>,
        factor: Jittered,
    },
    Kronecker {
        tau2: f64,
        freq: AxisFactor,
        phase: AxisFactor,
    },
}

impl CovarianceFactorization {
    pub fn size(&self) -> usize {
        match self {
            Self::Dense { raw, .. } => raw.nrows(),
            Self::Kronecker { freq, phase, .. } => freq.size() * phase.size(),
        }
    }

    pub fn tau2(&self) -> f64 {
        match self {
            Self::Dense { tau2, .. } | Self::Kronecker { tau2, .. } => *tau2,
        }
    }

    /// Covariance without jitter.
    pub fn raw_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Dense { tau2, raw, .. } => raw * *tau2,
            Self::Kronecker { tau2, freq, phase } => freq.raw.kronecker(&phase.raw) * *tau2,
        }
    }

    /// Jittered covariance that the factors represent.
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Self::Dense { tau2, factor, .. } => &factor.matrix * *tau2,
            Self::Kronecker { tau2, freq, phase } => {
                freq.matrix().kronecker(phase.matrix()) * *tau2
            }
        }
    }

    /// Dense matrix rebuilt from the stored factors.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        match self {
            Self::Dense { tau2, factor, .. } => &factor.chol * factor.chol.transpose() * *tau2,
            Self::Kronecker { tau2, freq, phase } => {
                let rebuild = |a: &AxisFactor| {
                    &a.eigenvectors
                        * DMatrix::from_diagonal(&a.eigenvalues)
                        * a.eigenvectors.transpose()
                };
                rebuild(freq).kronecker(&rebuild(phase)) * *tau2
            }
        }
    }

    /// Inverse of the jittered covariance via the factors.
    pub fn inverse(&self) -> DMatrix<f64> {
        match self {
            Self::Dense { tau2, factor, .. } => chol_inverse(&factor.chol) / *tau2,
            Self::Kronecker { tau2, freq, phase } => {
                chol_inverse(freq.chol()).kronecker(&chol_inverse(phase.chol())) / *tau2
            }
        }
    }

    /// All eigenvalues of the jittered covariance, as pairwise products in
    /// the Kronecker case.
    pub fn eigenvalues(&self) -> Vec<f64> {
        match self {
            Self::Dense { tau2, factor, .. } => SymmetricEigen::new(factor.matrix.clone())
                .eigenvalues
                .iter()
                .map(|e| e * tau2)
                .collect(),
            Self::Kronecker { tau2, freq, phase } => freq
                .eigenvalues
                .iter()
                .flat_map(|a| phase.eigenvalues.iter().map(move |b| a * b * tau2))
                .collect(),
        }
    }

    pub fn log_det(&self) -> f64 {
        let chol_logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        match self {
            Self::Dense { tau2, factor, .. } => {
                chol_logdet(&factor.chol) + factor.chol.nrows() as f64 * tau2.ln()
            }
            Self::Kronecker { tau2, freq, phase } => {
                let (k, m) = (freq.size() as f64, phase.size() as f64);
                m * chol_logdet(freq.chol()) + k * chol_logdet(phase.chol()) + k * m * tau2.ln()
            }
        }
    }
}

/// `L^-T L^-1` for a lower Cholesky factor `L`.
pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("non-singular Cholesky factor");
    linv.transpose() * linv
}

/// Covariance of `params` on `grid`; `correlation_only` fixes `tau = 1`.
pub fn build_cov(
    grid: &GridDomain,
    params: &KernelParams,
    correlation_only: bool,
) -> Result<CovarianceFactorization, KernelError> {
    params.check(grid)?;
    let tau2 = if correlation_only {
        1.0
    } else {
        params.tau * params.tau
    };
    let f = grid.freqs();
    match grid.phases() {
        None => {
            let raw = corr_logfreq(f, f, params.lambda_f);
            let factor = cholesky_with_jitter(&raw)?;
            Ok(CovarianceFactorization::Dense { tau2, raw, factor })
        }
        Some(h) => {
            let lp = params.lambda_phi.expect("checked");
            Ok(CovarianceFactorization::Kronecker {
                tau2,
                freq: AxisFactor::new(corr_logfreq(f, f, params.lambda_f))?,
                phase: AxisFactor::new(corr_phase(h, h, lp))?,
            })
        }
    }
}

/// Reverse-mode step through `L = chol(S)`: given the adjoint of `L`, return
/// the symmetric adjoint of `S`.
pub fn chol_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * l_bar.lower_triangle();
    for i in 0..n {
        for j in i + 1..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    let s = (&p + p.transpose()) * 0.5;
    let li = lower_inverse(l);
    let x = li.tr_mul(&s) * &li;
    (&x + x.transpose()) * 0.5
}

/// Inverse of a lower-triangular matrix by column-wise forward substitution.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let ls = l.as_slice();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    let out = inv.as_mut_slice();
    for j in 0..n {
        let x = &mut out[j * n..(j + 1) * n];
        x[j] = 1.0;
        for k in j..n {
            let lk = &ls[k * n..(k + 1) * n];
            x[k] /= lk[k];
            let xk = x[k];
            for (xi, li) in x[k + 1..].iter_mut().zip(&lk[k + 1..]) {
                *xi -= xk * li;
            }
        }
    }
    inv
}

/// Linear map from values on `x` to GP-conditional means on `x_star`.
///
/// For 2D grids the map is `Y -> A_F Y A_H^T` with `A = K(*, x) K(x, x)^-1`
/// per axis, which equals the dense conditional mean under the separable
/// kernel. The amplitude `tau` cancels.
#[derive(Debug, Clone)]
pub struct Conditioner {
    freq: DMatrix<f64>,
    phase: Option<DMatrix<f64>>,
}

fn coincident(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Adds the factorization jitter to cross-covariance entries between
/// coincident points, so the jitter behaves as a nugget on both sides.
fn with_nugget(mut cross: DMatrix<f64>, a: &[f64], b: &[f64], jitter: f64) -> DMatrix<f64> {
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            if coincident(x, y) {
                cross[(i, j)] += jitter;
            }
        }
    }
    cross
}

fn axis_weights(
    cross: DMatrix<f64>,
    own: &DMatrix<f64>,
    a: &[f64],
    b: &[f64],
) -> Result<DMatrix<f64>, KernelError> {
    let j = cholesky_with_jitter(own)?;
    let cross = with_nugget(cross, a, b, j.jitter);
    let chol = nalgebra::Cholesky::new(j.matrix).ok_or(KernelError::NotPositiveDefinite {
        size: own.nrows(),
        jitter: j.jitter,
    })?;
    // A = K* K^-1, so A^T = K^-1 K*^T
    Ok(chol.solve(&cross.transpose()).transpose())
}

impl Conditioner {
    pub fn new(
        x_star: &GridDomain,
        x: &GridDomain,
        params: &KernelParams,
    ) -> Result<Self, KernelError> {
        params.check(x)?;
        if x_star.is_2d() != x.is_2d() {
            return Err(KernelError::DimensionMismatch);
        }
        let (fs, f) = (x_star.freqs(), x.freqs());
        let freq = axis_weights(
            corr_logfreq(fs, f, params.lambda_f),
            &corr_logfreq(f, f, params.lambda_f),
            fs,
            f,
        )?;
        let phase = match (x_star.phases(), x.phases()) {
            (Some(hs), Some(h)) => {
                let lp = params.lambda_phi.expect("checked");
                Some(axis_weights(
                    corr_phase(hs, h, lp),
                    &corr_phase(h, h, lp),
                    hs,
                    h,
                )?)
            }
            _ => None,
        };
        Ok(Self { freq, phase })
    }

    pub fn source_size(&self) -> usize {
        self.freq.ncols() * self.phase.as_ref().map_or(1, |p| p.ncols())
    }

    pub fn target_size(&self) -> usize {
        self.freq.nrows() * self.phase.as_ref().map_or(1, |p| p.nrows())
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>, KernelError> {
        if y.len() != self.source_size() {
            return Err(KernelError::Length {
                expected: self.source_size(),
                got: y.len(),
            });
        }
        match &self.phase {
            None => Ok((&self.freq * DVector::from_column_slice(y))
                .as_slice()
                .to_vec()),
            Some(ph) => {
                let (k, m) = (self.freq.ncols(), ph.ncols());
                let ym = DMatrix::from_row_slice(k, m, y);
                let out = &self.freq * ym * ph.transpose();
                Ok(out.transpose().as_slice().to_vec())
            }
        }
    }
}

/// Conditional mean `K(x*, x) K(x, x)^-1 y`.
pub fn gp_condition(
    x_star: &GridDomain,
    x: &GridDomain,
    y: &[f64],
    params: &KernelParams,
) -> Result<Vec<f64>, KernelError> {
    Conditioner::new(x_star, x, params)?.apply(y)
}

/// Points of a grid as `(f, phi)` pairs in storage order.
fn points(g: &GridDomain) -> Vec<(f64, f64)> {
    match g.phases() {
        None => g.freqs().iter().map(|&f| (f, 0.0)).collect(),
        Some(h) => g
            .freqs()
            .iter()
            .flat_map(|&f| h.iter().map(move |&p| (f, p)))
            .collect(),
    }
}

/// Elementwise kernel matrix between two grids.
pub fn dense_kernel(a: &GridDomain, b: &GridDomain, params: &KernelParams) -> DMatrix<f64> {
    let (pa, pb) = (points(a), points(b));
    let two_d = a.is_2d();
    DMatrix::from_fn(pa.len(), pb.len(), |i, j| {
        let mut v = k_logfreq(pa[i].0, pb[j].0, params.tau, params.lambda_f);
        if two_d {
            v *= k_phase(pa[i].1, pb[j].1, params.lambda_phi.unwrap_or(1.0));
        }
        v
    })
}

/// Conditional mean computed with one dense solve; used as a reference.
pub fn gp_condition_dense(
    x_star: &GridDomain,
    x: &GridDomain,
    y: &[f64],
    params: &KernelParams,
) -> Result<Vec<f64>, KernelError> {
    params.check(x)?;
    let n = x.size();
    if y.len() != n {
        return Err(KernelError::Length {
            expected: n,
            got: y.len(),
        });
    }
    let tau2 = params.tau * params.tau;
    let f = x.freqs();
    let jf = cholesky_with_jitter(&corr_logfreq(f, f, params.lambda_f))?;
    let nugget = |a: f64, b: f64, j: f64| if coincident(a, b) { j } else { 0.0 };
    let (pa, pb) = (points(x_star), points(x));
    let (kxx, ks) = match x.phases() {
        None => {
            let kxx = &jf.matrix * tau2;
            let ks = DMatrix::from_fn(pa.len(), pb.len(), |i, j| {
                k_logfreq(pa[i].0, pb[j].0, params.tau, params.lambda_f)
                    + tau2 * nugget(pa[i].0, pb[j].0, jf.jitter)
            });
            (kxx, ks)
        }
        Some(h) => {
            let lp = params.lambda_phi.expect("checked");
            let jh = cholesky_with_jitter(&corr_phase(h, h, lp))?;
            let kxx = jf.matrix.kronecker(&jh.matrix) * tau2;
            let ks = DMatrix::from_fn(pa.len(), pb.len(), |i, j| {
                let rf = k_logfreq(pa[i].0, pb[j].0, 1.0, params.lambda_f)
                    + nugget(pa[i].0, pb[j].0, jf.jitter);
                let rh = k_phase(pa[i].1, pb[j].1, lp) + nugget(pa[i].1, pb[j].1, jh.jitter);
                tau2 * rf * rh
            });
            (kxx, ks)
        }
    };
    let chol = kxx.cholesky().ok_or(KernelError::NotPositiveDefinite {
        size: n,
        jitter: JITTER,
    })?;
    let alpha = chol.solve(&DVector::from_column_slice(y));
    Ok((ks * alpha).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, PI};

    #[test]
    fn kernel_values() {
        assert_eq!(k_logfreq(0.3, 0.3, 1.7, 0.5), 1.7 * 1.7);
        assert!((k_logfreq(0.1, E * 0.1, 1.0, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
        let lam: f64 = 0.3;
        assert!(k_logfreq(0.1, 0.1 * (10.0 * lam).exp(), 2.0, lam) < 2e-22 * 4.0);
        assert!((k_phase(0.2, 0.2 + 2.0 * PI, 0.7) - 1.0).abs() < 1e-15);
        assert!((k_phase(0.0, PI, 1.0) - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(k_phase(1.1, 1.1, 0.4), 1.0);
    }

    #[test]
    fn one_by_one_grid_is_tau_squared() {
        let g = GridDomain::two_d(vec![0.05], vec![0.0]).unwrap();
        let c = build_cov(&g, &KernelParams::new(1.3, 0.5, Some(0.8)), false).unwrap();
        assert!((c.raw_dense()[(0, 0)] - 1.69).abs() < 1e-15);
        assert!((c.dense()[(0, 0)] - 1.69).abs() < 1e-7);
    }

    fn random_params(rng: &mut ChaCha8Rng) -> KernelParams {
        KernelParams::new(
            rng.random_range(0.5..2.0),
            rng.random_range(0.3..2.0),
            Some(rng.random_range(0.3..2.0)),
        )
    }

    #[test]
    fn kronecker_matches_elementwise_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GridDomain::log_uniform(1.0 / 960.0, 16.0 / 60.0, 5, Some(4)).unwrap();
        for _ in 0..10 {
            let p = random_params(&mut rng);
            let c = build_cov(&g, &p, false).unwrap();
            let direct = dense_kernel(&g, &g, &p);
            assert!((c.raw_dense() - &direct).abs().max() < 1e-12);
            assert!((c.reconstruct() - c.dense()).abs().max() < 1e-8 * c.dense().abs().max());
            let dense_inv = c.dense().try_inverse().unwrap();
            let kron_inv = c.inverse();
            let rel = (&kron_inv - &dense_inv).abs().max() / dense_inv.abs().max();
            assert!(rel < 1e-8, "relative error {rel}");
            let mut a = c.eigenvalues();
            let mut b: Vec<f64> = SymmetricEigen::new(c.dense())
                .eigenvalues
                .iter()
                .copied()
                .collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
            let sign_logdet = c
                .dense()
                .cholesky()
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|d| 2.0 * d.ln())
                .sum::<f64>();
            assert!((c.log_det() - sign_logdet).abs() < 1e-8);
        }
    }

    #[test]
    fn covariances_are_symmetric() {
        let g = GridDomain::log_uniform(0.001, 0.3, 29, None).unwrap();
        let c = build_cov(&g, &KernelParams::new(1.0, 1.5, None), false).unwrap();
        let d = c.dense();
        assert!((&d - d.transpose()).abs().max() < 1e-12);
        assert!(d.iter().all(|&v| v > 0.0 && v <= 1.0 + 1e-7));
    }

    #[test]
    fn chol_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(n, n);
        let w = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let f = |m: &DMatrix<f64>| (m.clone().cholesky().unwrap().unpack().component_mul(&w)).sum();
        let l = s.clone().cholesky().unwrap().unpack();
        let g = chol_backward(&l, &w);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (f(&(&s + &e * h)) - f(&(&s - &e * h))) / (2.0 * h);
                let an = if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] };
                assert!((fd - an).abs() < 1e-7, "({i},{j}): {fd} vs {an}");
            }
        }
    }

    #[test]
    fn conditioning_identity_and_constant() {
        let g = GridDomain::log_uniform(1.0 / 960.0, 16.0 / 60.0, 29, None).unwrap();
        let p = KernelParams::new(1.0, 0.8, None);
        let y: Vec<f64> = (0..29).map(|i| (i as f64 * 0.37).sin()).collect();
        let same = gp_condition(&g, &g, &y, &p).unwrap();
        assert!(same.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-8));
        let fine = GridDomain::log_uniform(1.0 / 960.0, 16.0 / 60.0, 200, None).unwrap();
        let c = gp_condition(&fine, &g, &vec![2.5; 29], &p).unwrap();
        let (lo, hi) = (g.freqs()[0], g.freqs()[28]);
        for (f, v) in fine.freqs().iter().zip(&c) {
            if *f >= lo && *f <= hi {
                assert!((v - 2.5).abs() < 1e-3, "{f}: {v}");
            }
        }
    }

    #[test]
    fn kronecker_refinement_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let coarse = GridDomain::log_uniform(1.0 / 960.0, 16.0 / 60.0, 5, Some(4)).unwrap();
        let fine = GridDomain::log_uniform(1.0 / 960.0, 16.0 / 60.0, 9, Some(7)).unwrap();
        for _ in 0..5 {
            let p = random_params(&mut rng);
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = gp_condition(&fine, &coarse, &y, &p).unwrap();
            let b = gp_condition_dense(&fine, &coarse, &y, &p).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-8, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn jitter_escalates_and_fails() {
        let ones = DMatrix::from_element(4, 4, 1.0);
        let j = cholesky_with_jitter(&ones).unwrap();
        assert!(j.jitter >= JITTER);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            cholesky_with_jitter(&bad),
            Err(KernelError::NotPositiveDefinite { .. })
        ));
    }
}
