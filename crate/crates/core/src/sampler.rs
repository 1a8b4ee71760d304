//! Multinomial No-U-Turn sampler with a diagonal metric, dual-averaging
//! step size adaptation and windowed metric adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::Model;

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns the log density and writes its gradient; negative infinity
    /// marks points outside the support.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        Model::log_density_grad(self, x, grad)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("no finite initial point found for chain {chain} after {tries} tries")]
    Init { chain: usize, tries: usize },
    #[error("invalid sampler settings: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub warmup: usize,
    pub draws: usize,
    pub chains: usize,
    pub adapt_delta: f64,
    pub max_treedepth: usize,
    pub seed: u64,
    /// Initial values are uniform on `[-init_radius, init_radius]`.
    pub init_radius: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            warmup: 200,
            draws: 500,
            chains: 4,
            adapt_delta: 0.95,
            max_treedepth: 10,
            seed: 1,
            init_radius: 2.0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.warmup < 20 {
            return Err(SamplerError::Config(format!(
                "warmup must be at least 20, got {}",
                self.warmup
            )));
        }
        if self.draws == 0 || self.chains == 0 || self.max_treedepth == 0 {
            return Err(SamplerError::Config(
                "draws, chains and max_treedepth must be positive".into(),
            ));
        }
        if !(self.adapt_delta > 0.0 && self.adapt_delta < 1.0) {
            return Err(SamplerError::Config(format!(
                "adapt_delta must lie in (0, 1), got {}",
                self.adapt_delta
            )));
        }
        if !(self.init_radius > 0.0) {
            return Err(SamplerError::Config("init_radius must be positive".into()));
        }

        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawStats {
    pub accept_stat: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy: f64,
}

/// Post-warmup draws of one chain on the unconstrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

impl Chain {
    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }
}

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Subtree {
    minus: Point,
    plus: Point,
    sharp_minus: Vec<f64>,
    sharp_plus: Vec<f64>,
    rho: Vec<f64>,
    log_w: f64,
    proposal: Point,
}

struct TreeStats {
    sum_metro: f64,
    n_leapfrog: usize,
    divergent: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn no_u_turn(sharp_minus: &[f64], sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(sharp_plus, rho) > 0.0 && dot(sharp_minus, rho) > 0.0
}

struct Hamiltonian<'a, D: LogDensity + ?Sized> {
    target: &'a D,
    inv_metric: &'a [f64],
}

impl<D: LogDensity + ?Sized> Hamiltonian<'_, D> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn energy(&self, pt: &Point) -> f64 {
        -pt.logp + self.kinetic(&pt.p)
    }

    fn sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&self, from: &Point, eps: f64) -> Point {
        let mut p: Vec<f64> = from
            .p
            .iter()
            .zip(&from.grad)
            .map(|(p, g)| p + 0.5 * eps * g)
            .collect();
        let q: Vec<f64> = from
            .q
            .iter()
            .zip(&p)
            .zip(self.inv_metric)
            .map(|((q, p), m)| q + eps * m * p)
            .collect();
        let mut grad = vec![0.0; q.len()];
        let logp = self.target.log_density_grad(&q, &mut grad);
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        Point { q, p, grad, logp }
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect()
    }

    /// Builds `2^depth` leapfrog steps away from `edge`; `None` on a
    /// divergence or a U-turn inside the subtree.
    fn build(
        &self,
        depth: usize,
        edge: &Point,
        eps: f64,
        h0: f64,
        stats: &mut TreeStats,
        rng: &mut ChaCha8Rng,
    ) -> Option<Subtree> {
        if depth == 0 {
            let pt = self.leapfrog(edge, eps);
            let mut h = self.energy(&pt);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            stats.n_leapfrog += 1;
            stats.sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            if h - h0 > MAX_DELTA_H {
                stats.divergent = true;
                return None;
            }
            let sharp = self.sharp(&pt.p);
            return Some(Subtree {
                minus: pt.clone(),
                plus: pt.clone(),
                sharp_minus: sharp.clone(),
                sharp_plus: sharp,
                rho: pt.p.clone(),
                log_w: h0 - h,
                proposal: pt,
            });
        }
        let first = self.build(depth - 1, edge, eps, h0, stats, rng)?;
        let next_edge = if eps > 0.0 { &first.plus } else { &first.minus };
        let second = self.build(depth - 1, next_edge, eps, h0, stats, rng)?;
        let log_w = log_add_exp(first.log_w, second.log_w);
        let take_second = rng.random::<f64>() < (second.log_w - log_w).exp();
        merge(first, second, eps > 0.0, log_w, take_second)
    }
}

/// Joins two adjacent subtrees, `first` built before `second`; `None` if
/// the joined trajectory turns back on itself.
fn merge(
    first: Subtree,
    second: Subtree,
    forward: bool,
    log_w: f64,
    take_second: bool,
) -> Option<Subtree> {
    let proposal = if take_second {
        second.proposal.clone()
    } else {
        first.proposal.clone()
    };
    let (a, b) = if forward {
        (first, second)
    } else {
        (second, first)
    };
    let rho = add(&a.rho, &b.rho);
    let persist = no_u_turn(&a.sharp_minus, &b.sharp_plus, &rho)
        && no_u_turn(&a.sharp_minus, &b.sharp_minus, &add(&a.rho, &b.minus.p))
        && no_u_turn(&a.sharp_plus, &b.sharp_plus, &add(&b.rho, &a.plus.p));
    if !persist {
        return None;
    }
    Some(Subtree {
        minus: a.minus,
        plus: b.plus,
        sharp_minus: a.sharp_minus,
        sharp_plus: b.sharp_plus,
        rho,
        log_w,
        proposal,
    })
}

fn transition<D: LogDensity + ?Sized>(
    ham: &Hamiltonian<'_, D>,
    current: &Point,
    eps: f64,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> (Point, DrawStats) {
    let mut start = current.clone();
    start.p = ham.sample_momentum(rng);
    let h0 = ham.energy(&start);
    let sharp = ham.sharp(&start.p);
    let mut tree = Subtree {
        minus: start.clone(),
        plus: start.clone(),
        sharp_minus: sharp.clone(),
        sharp_plus: sharp,
        rho: start.p.clone(),
        log_w: 0.0,
        proposal: start,
    };
    let mut stats = TreeStats {
        sum_metro: 0.0,
        n_leapfrog: 0,
        divergent: false,
    };
    let mut sample = tree.proposal.clone();
    let mut depth = 0;
    while depth < max_depth {
        let forward = rng.random::<bool>();
        let signed = if forward { eps } else { -eps };
        let edge = if forward {
            tree.plus.clone()
        } else {
            tree.minus.clone()
        };
        let Some(sub) = ham.build(depth, &edge, signed, h0, &mut stats, rng) else {
            break;
        };
        depth += 1;
        if rng.random::<f64>() < (sub.log_w - tree.log_w).exp() {
            sample = sub.proposal.clone();
        }
        let log_w = log_add_exp(tree.log_w, sub.log_w);
        match merge(tree, sub, forward, log_w, false) {
            Some(t) => tree = t,
            None => break,
        }
    }
    let energy = ham.energy(&sample);
    let accept = if stats.n_leapfrog == 0 {
        0.0
    } else {
        stats.sum_metro / stats.n_leapfrog as f64
    };
    let st = DrawStats {
        accept_stat: accept,
        depth,
        n_leapfrog: stats.n_leapfrog,
        divergent: stats.divergent,
        energy,
    };
    (sample, st)
}

/// Dual averaging of the log step size.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// End indices (exclusive) of the metric adaptation windows.
pub fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    const INIT: usize = 75;
    const TERM: usize = 50;
    const BASE: usize = 25;
    if warmup < 20 {
        return Vec::new();
    }
    let (init, term, base) = if INIT + TERM + BASE > warmup {
        let init = (0.15 * warmup as f64) as usize;
        let term = (0.1 * warmup as f64) as usize;
        (init, term, warmup - init - term)
    } else {
        (INIT, TERM, BASE)
    };
    let last = warmup - term;
    let mut out = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < last {
        let mut end = start + size;
        if end + 2 * size > last || end > last {
            end = last;
        }
        out.push((start, end));
        start = end;
        size *= 2;
    }
    out
}

fn find_initial_step<D: LogDensity + ?Sized>(
    ham: &Hamiltonian<'_, D>,
    current: &Point,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut eps = 1.0;
    let probe = |eps: f64, rng: &mut ChaCha8Rng| {
        let mut s = current.clone();
        s.p = ham.sample_momentum(rng);
        let h0 = ham.energy(&s);
        let h = ham.energy(&ham.leapfrog(&s, eps));
        let d = h0 - h;
        if d.is_nan() {
            f64::NEG_INFINITY
        } else {
            d
        }
    };
    let th = 0.8f64.ln();
    let up = probe(eps, rng) > th;
    for _ in 0..100 {
        eps = if up { 2.0 * eps } else { 0.5 * eps };
        let d = probe(eps, rng);
        if (up && d <= th) || (!up && d > th) || !(1e-10..=1e7).contains(&eps) {
            break;
        }
    }
    eps
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m| {
                let var = m / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

/// Runs one chain: warmup with adaptation, then `cfg.draws` draws.
pub fn run_chain<D: LogDensity + ?Sized>(
    target: &D,
    cfg: &ChainConfig,
    chain: usize,
) -> Result<Chain, SamplerError> {
    let d = target.dim();
    let mut rng = chain_rng(cfg.seed, chain);
    let mut grad = vec![0.0; d];
    let mut q = Vec::new();
    let mut logp = f64::NEG_INFINITY;
    for _ in 0..100 {
        q = (0..d)
            .map(|_| rng.random_range(-cfg.init_radius..=cfg.init_radius))
            .collect();
        logp = target.log_density_grad(&q, &mut grad);
        if logp.is_finite() {
            break;
        }
    }
    if !logp.is_finite() {
        return Err(SamplerError::Init { chain, tries: 100 });
    }
    Ok(sample_from(
        target,
        cfg,
        rng,
        Point {
            q,
            p: vec![0.0; d],
            grad,
            logp,
        },
    ))
}

/// Runs one chain from the unconstrained point `init`.
pub fn run_chain_from<D: LogDensity + ?Sized>(
    target: &D,
    cfg: &ChainConfig,
    chain: usize,
    init: &[f64],
) -> Result<Chain, SamplerError> {
    let d = target.dim();
    let mut grad = vec![0.0; d];
    let logp = target.log_density_grad(init, &mut grad);
    if init.len() != d || !logp.is_finite() {
        return Err(SamplerError::Init { chain, tries: 1 });
    }
    let current = Point {
        q: init.to_vec(),
        p: vec![0.0; d],
        grad,
        logp,
    };
    Ok(sample_from(
        target,
        cfg,
        chain_rng(cfg.seed, chain),
        current,
    ))
}

fn sample_from<D: LogDensity + ?Sized>(
    target: &D,
    cfg: &ChainConfig,
    mut rng: ChaCha8Rng,
    mut current: Point,
) -> Chain {
    let d = target.dim();
    let mut inv_metric = vec![1.0; d];
    let mut eps = {
        let ham = Hamiltonian {
            target,
            inv_metric: &inv_metric,
        };
        find_initial_step(&ham, &current, &mut rng)
    };
    let mut da = DualAveraging::new(eps, cfg.adapt_delta);
    let windows = adaptation_windows(cfg.warmup);
    let mut welford = Welford::new(d);
    let adapt = cfg.warmup >= 20;
    for it in 0..cfg.warmup {
        let (next, st) = {
            let ham = Hamiltonian {
                target,
                inv_metric: &inv_metric,
            };
            transition(&ham, &current, eps, cfg.max_treedepth, &mut rng)
        };
        current = next;
        if adapt {
            eps = da.update(st.accept_stat);
        }
        if let Some(&(_, end)) = windows.iter().find(|w| it >= w.0 && it < w.1) {
            welford.push(&current.q);
            if it + 1 == end {
                inv_metric = welford.regularized_variance();
                welford = Welford::new(d);
                let ham = Hamiltonian {
                    target,
                    inv_metric: &inv_metric,
                };
                eps = find_initial_step(&ham, &current, &mut rng);
                da = DualAveraging::new(eps, cfg.adapt_delta);
            }
        }
    }
    if adapt && cfg.warmup > 0 {
        eps = da.final_step();
    }
    let ham = Hamiltonian {
        target,
        inv_metric: &inv_metric,
    };
    let mut draws = Vec::with_capacity(cfg.draws);
    let mut stats = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws {
        let (next, st) = transition(&ham, &current, eps, cfg.max_treedepth, &mut rng);
        current = next;
        draws.push(current.q.clone());
        stats.push(st);
    }
    Chain {
        draws,
        stats,
        step_size: eps,
        inv_metric,
    }
}

/// Runs `cfg.chains` independent chains in parallel. Results depend only
/// on the seed and the chain index.
pub fn nuts_run<D: LogDensity + ?Sized>(
    target: &D,
    cfg: &ChainConfig,
) -> Result<Vec<Chain>, SamplerError> {
    cfg.validate()?;
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect()
}

/// Draws of every chain with their constrained values.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// `chain x draw x parameter`, in the order of `names`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub chains: Vec<Chain>,
}

impl PosteriorSamples {
    /// Maps every unconstrained draw through `constrain`.
    pub fn new<F>(names: Vec<String>, chains: Vec<Chain>, constrain: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let values = chains
            .par_iter()
            .map(|c| c.draws.iter().map(|d| constrain(d)).collect())
            .collect();
        Self {
            names,
            values,
            chains,
        }
    }

    pub fn n_chains(&self) -> usize {
        self.values.len()
    }

    pub fn n_draws(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain draws of one parameter.
    pub fn column(&self, k: usize) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|c| c.iter().map(|d| d[k]).collect())
            .collect()
    }

    /// Every draw in chain-major order.
    pub fn draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.values.iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub divergences: usize,
    pub max_treedepth_hits: usize,
}

impl Diagnostics {
    pub fn compute(samples: &PosteriorSamples, max_treedepth: usize) -> Self {
        let (rhat, ess_bulk) = (0..samples.names.len())
            .into_par_iter()
            .map(|k| {
                let col = samples.column(k);
                (
                    crate::diagnostics::rhat(&col),
                    crate::diagnostics::ess_bulk(&col),
                )
            })
            .unzip();
        let stats = samples.chains.iter().flat_map(|c| &c.stats);
        let (mut divergences, mut max_treedepth_hits) = (0, 0);
        for s in stats {
            divergences += usize::from(s.divergent);
            max_treedepth_hits += usize::from(s.depth >= max_treedepth);
        }
        Self {
            rhat,
            ess_bulk,
            divergences,
            max_treedepth_hits,
        }
    }

    /// Largest R-hat ignoring undefined values.
    pub fn max_rhat(&self) -> f64 {
        self.rhat
            .iter()
            .copied()
            .filter(|r| !r.is_nan())
            .fold(f64::NAN, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Normal {
        d: usize,
    }

    impl LogDensity for Normal {
        fn dim(&self) -> usize {
            self.d
        }
        fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -xi;
            }
            -0.5 * dot(x, x)
        }
    }

    #[test]
    fn windows_follow_doubling_schedule() {
        assert_eq!(
            adaptation_windows(1000),
            vec![(75, 100), (100, 150), (150, 250), (250, 450), (450, 950)]
        );
        assert_eq!(adaptation_windows(200), vec![(75, 100), (100, 150)]);
        assert!(adaptation_windows(10).is_empty());
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = Normal { d: 3 };
        let inv = vec![1.0, 0.5, 2.0];
        let ham = Hamiltonian {
            target: &t,
            inv_metric: &inv,
        };
        let q = vec![0.3, -1.0, 2.0];
        let grad: Vec<f64> = q.iter().map(|v| -v).collect();
        let start = Point {
            q: q.clone(),
            p: vec![0.5, 0.1, -0.7],
            grad,
            logp: -0.5 * dot(&q, &q),
        };
        let mut pt = start.clone();
        for _ in 0..10 {
            pt = ham.leapfrog(&pt, 0.1);
        }
        for _ in 0..10 {
            pt = ham.leapfrog(&pt, -0.1);
        }
        for i in 0..3 {
            assert!((pt.q[i] - start.q[i]).abs() < 1e-12);
            assert!((pt.p[i] - start.p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let t = Normal { d: 4 };
        let cfg = ChainConfig {
            chains: 2,
            warmup: 100,
            draws: 50,
            seed: 9,
            ..Default::default()
        };
        let a = nuts_run(&t, &cfg).unwrap();
        let b = nuts_run(&t, &cfg).unwrap();
        assert_eq!(a, b);
        let c = nuts_run(&t, &ChainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a[0].draws, c[0].draws);
    }

    #[test]
    fn config_is_validated() {
        let t = Normal { d: 1 };
        for cfg in [
            ChainConfig {
                warmup: 10,
                ..Default::default()
            },
            ChainConfig {
                draws: 0,
                ..Default::default()
            },
            ChainConfig {
                adapt_delta: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(nuts_run(&t, &cfg), Err(SamplerError::Config(_))));
        }
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            2
        }
        fn log_density_grad(&self, _: &[f64], _: &mut [f64]) -> f64 {
            f64::NEG_INFINITY
        }
    }

    #[test]
    fn non_finite_target_aborts() {
        let e = nuts_run(&Nowhere, &ChainConfig::default()).unwrap_err();
        assert!(matches!(e, SamplerError::Init { tries: 100, .. }));
    }

    #[test]
    fn chain_from_point() {
        let t = Normal { d: 2 };
        let cfg = ChainConfig {
            warmup: 100,
            draws: 200,
            ..Default::default()
        };
        let c = run_chain_from(&t, &cfg, 0, &[8.0, -8.0]).unwrap();
        assert_eq!(c.draws.len(), 200);
        let m: f64 = c.draws.iter().map(|d| d[0]).sum::<f64>() / 200.0;
        assert!(m.abs() < 0.5, "{m}");
        assert!(matches!(
            run_chain_from(&t, &cfg, 1, &[0.0]),
            Err(SamplerError::Init { chain: 1, tries: 1 })
        ));
        assert!(run_chain_from(&Nowhere, &cfg, 0, &[0.0, 0.0]).is_err());
    }
}
