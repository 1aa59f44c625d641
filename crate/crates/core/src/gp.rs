//! Time-varying Gaussian process over mixed continuous/categorical inputs.
//!
//! The kernel combines a continuous factor and a categorical factor, each
//! discounted by its own time kernel `(1−ε)^{|t−t'|/2}`:
//!
//! ```text
//! k_xt = σ₁·exp(−‖x−x'‖²/ℓ) · (1−ε₁)^{|t−t'|/2}
//! k_ht = σ₂·(matching dims / dims) · (1−ε₂)^{|t−t'|/2}
//! k_z  = (1−λ)(k_xt + k_ht) + λ·k_xt·k_ht
//! ```
//!
//! [`KernelKind::TimeContinuous`] drops the categorical factor and uses
//! `k_xt` alone. Continuous inputs are expected in the unit hypercube.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Cholesky;

pub const N_PARAMS: usize = 7;
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "eps1",
    "eps2",
    "lengthscale",
    "sigma1",
    "sigma2",
    "lambda",
    "noise",
];

const EPS1: usize = 0;
const EPS2: usize = 1;
const LENGTHSCALE: usize = 2;
const SIGMA1: usize = 3;
const SIGMA2: usize = 4;
const LAMBDA: usize = 5;
const NOISE: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("Gram matrix is not positive definite even with 1e-4 jitter")]
    Cholesky,
    #[error("{points} inputs but {targets} targets")]
    Length { points: usize, targets: usize },
    #[error("log marginal likelihood needs at least one observation")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub eps1: f64,
    pub eps2: f64,
    pub lengthscale: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub noise: f64,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        GpHyperparams {
            eps1: 0.1,
            eps2: 0.1,
            lengthscale: 0.5,
            sigma1: 1.0,
            sigma2: 1.0,
            lambda: 0.5,
            noise: 0.01,
        }
    }
}

impl GpHyperparams {
    pub fn to_array(self) -> [f64; N_PARAMS] {
        [
            self.eps1,
            self.eps2,
            self.lengthscale,
            self.sigma1,
            self.sigma2,
            self.lambda,
            self.noise,
        ]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        GpHyperparams {
            eps1: a[EPS1],
            eps2: a[EPS2],
            lengthscale: a[LENGTHSCALE],
            sigma1: a[SIGMA1],
            sigma2: a[SIGMA2],
            lambda: a[LAMBDA],
            noise: a[NOISE],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// `k_xt` only; categories are invisible to the model.
    TimeContinuous,
    /// Sum/product mix of the continuous and categorical factors.
    Mixed,
}

impl KernelKind {
    /// Which hyperparameters influence this kernel.
    pub fn active(self) -> [bool; N_PARAMS] {
        match self {
            KernelKind::TimeContinuous => [true, false, true, true, false, false, true],
            KernelKind::Mixed => [true; N_PARAMS],
        }
    }
}

/// Box bounds for the hyperparameters; the prior is uniform over the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub lower: [f64; N_PARAMS],
    pub upper: [f64; N_PARAMS],
}

impl HyperBounds {
    /// Default box for `dims` continuous dimensions scaled to the unit cube.
    pub fn for_dims(dims: usize) -> Self {
        let diameter = (dims.max(1) as f64).sqrt();
        HyperBounds {
            lower: [0.0, 0.0, 1e-3, 1e-3, 1e-3, 0.0, 1e-6],
            upper: [0.5, 0.5, 10.0 * diameter, 10.0, 10.0, 1.0, 1.0],
        }
    }

    pub fn clip(&self, theta: GpHyperparams) -> GpHyperparams {
        let mut a = theta.to_array();
        for i in 0..N_PARAMS {
            a[i] = a[i].clamp(self.lower[i], self.upper[i]);
        }
        GpHyperparams::from_array(a)
    }

    pub fn contains(&self, theta: &GpHyperparams) -> bool {
        theta
            .to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| self.lower[i] <= *v && *v <= self.upper[i])
    }

    /// Log density of the uniform prior over the active coordinates.
    pub fn ln_prior(&self, kind: KernelKind, theta: &GpHyperparams) -> f64 {
        let a = theta.to_array();
        let mut lp = 0.0;
        for (i, on) in kind.active().into_iter().enumerate() {
            if !on {
                continue;
            }
            if a[i] < self.lower[i] || a[i] > self.upper[i] {
                return f64::NEG_INFINITY;
            }
            lp -= (self.upper[i] - self.lower[i]).ln();
        }
        lp
    }
}

/// A kernel input: unit-cube continuous coordinates, category indices, time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPoint {
    pub x: Vec<f64>,
    pub h: Vec<usize>,
    pub t: f64,
}

pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn k_continuous(x: &[f64], y: &[f64], sigma1: f64, lengthscale: f64) -> f64 {
    sigma1 * (-sq_dist(x, y) / lengthscale).exp()
}

fn match_fraction(h: &[usize], g: &[usize]) -> f64 {
    if h.is_empty() {
        return 1.0;
    }
    h.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / h.len() as f64
}

/// `σ₂ / dims · Σ 𝟙(h_i = h'_i)`.
pub fn k_categorical(h: &[usize], g: &[usize], sigma2: f64) -> f64 {
    sigma2 * match_fraction(h, g)
}

pub fn k_time(t: f64, s: f64, eps: f64) -> f64 {
    (1.0 - eps).powf((t - s).abs() / 2.0)
}

pub fn k_mixed(a: &GpPoint, b: &GpPoint, theta: &GpHyperparams) -> f64 {
    kernel(KernelKind::Mixed, &Features::between(a, b), theta).0
}

/// θ-independent pair statistics.
#[derive(Debug, Clone, Copy)]
struct Features {
    d2: f64,
    matches: f64,
    lag: f64,
}

impl Features {
    fn between(a: &GpPoint, b: &GpPoint) -> Self {
        Features {
            d2: sq_dist(&a.x, &b.x),
            matches: match_fraction(&a.h, &b.h),
            lag: (a.t - b.t).abs(),
        }
    }
}

/// Time-decay factors `(1−ε)^{lag/2}` and their ε-derivatives.
#[derive(Debug, Clone, Copy)]
struct Decay {
    kt1: f64,
    dkt1: f64,
    kt2: f64,
    dkt2: f64,
}

impl Decay {
    fn new(lag: f64, th: &GpHyperparams) -> Self {
        let half = lag / 2.0;
        let factor = |eps: f64| {
            let k = (1.0 - eps).powf(half);
            let dk = if lag == 0.0 {
                0.0
            } else {
                -half * (1.0 - eps).powf(half - 1.0)
            };
            (k, dk)
        };
        let (kt1, dkt1) = factor(th.eps1);
        let (kt2, dkt2) = factor(th.eps2);
        Decay {
            kt1,
            dkt1,
            kt2,
            dkt2,
        }
    }
}

/// Kernel value and its partials with respect to the first six
/// hyperparameters (the noise enters only on the diagonal).
fn kernel(kind: KernelKind, f: &Features, th: &GpHyperparams) -> (f64, [f64; 6]) {
    kernel_with(kind, f, &Decay::new(f.lag, th), th)
}

#[inline]
fn kernel_with(
    kind: KernelKind,
    f: &Features,
    decay: &Decay,
    th: &GpHyperparams,
) -> (f64, [f64; 6]) {
    let Decay {
        kt1,
        dkt1,
        kt2,
        dkt2,
    } = *decay;
    let shape = (-f.d2 / th.lengthscale).exp();
    let kc = th.sigma1 * shape;
    let kxt = kc * kt1;
    let dkxt_eps1 = kc * dkt1;
    let dkxt_len = kt1 * kc * f.d2 / (th.lengthscale * th.lengthscale);
    let dkxt_sig1 = kt1 * shape;

    if kind == KernelKind::TimeContinuous {
        return (kxt, [dkxt_eps1, 0.0, dkxt_len, dkxt_sig1, 0.0, 0.0]);
    }

    let kk = th.sigma2 * f.matches;
    let kht = kk * kt2;
    let dkht_eps2 = kk * dkt2;
    let dkht_sig2 = kt2 * f.matches;

    let lam = th.lambda;
    let dz_dxt = (1.0 - lam) + lam * kht;
    let dz_dht = (1.0 - lam) + lam * kxt;
    let kz = (1.0 - lam) * (kxt + kht) + lam * kxt * kht;
    (
        kz,
        [
            dz_dxt * dkxt_eps1,
            dz_dht * dkht_eps2,
            dz_dxt * dkxt_len,
            dz_dxt * dkxt_sig1,
            dz_dht * dkht_sig2,
            -(kxt + kht) + kxt * kht,
        ],
    )
}

pub fn kernel_value(kind: KernelKind, a: &GpPoint, b: &GpPoint, theta: &GpHyperparams) -> f64 {
    kernel(kind, &Features::between(a, b), theta).0
}

/// Pairwise features of a training set, computed once per fit. Lags are
/// few and repeated (rounds are integers), so decay factors are tabulated
/// per distinct lag.
#[derive(Debug, Clone)]
struct PairCache {
    n: usize,
    features: Vec<Features>,
    lags: Vec<f64>,
    lag_slot: Vec<usize>,
}

impl PairCache {
    fn new(points: &[GpPoint]) -> Self {
        let n = points.len();
        let mut features = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                features.push(Features::between(&points[i], &points[j]));
            }
        }
        let mut lags: Vec<f64> = features.iter().map(|f| f.lag).collect();
        lags.sort_by(f64::total_cmp);
        lags.dedup();
        let lag_slot = features
            .iter()
            .map(|f| {
                lags.binary_search_by(|l| l.total_cmp(&f.lag))
                    .expect("lag was tabulated")
            })
            .collect();
        PairCache {
            n,
            features,
            lags,
            lag_slot,
        }
    }

    fn decays(&self, th: &GpHyperparams) -> Vec<Decay> {
        self.lags.iter().map(|&lag| Decay::new(lag, th)).collect()
    }

    fn gram(&self, kind: KernelKind, th: &GpHyperparams) -> Vec<f64> {
        let n = self.n;
        let decays = self.decays(th);
        let mut a = vec![0.0; n * n];
        let mut idx = 0;
        for i in 0..n {
            for j in 0..=i {
                let k = kernel_with(kind, &self.features[idx], &decays[self.lag_slot[idx]], th).0;
                a[i * n + j] = k;
                a[j * n + i] = k;
                idx += 1;
            }
            a[i * n + i] += th.noise;
        }
        a
    }
}

/// Data term of the log marginal likelihood and its gradient.
struct Evidence {
    value: f64,
    grad: [f64; N_PARAMS],
}

fn data_term(chol: &Cholesky, targets: &[f64]) -> (f64, Vec<f64>) {
    let alpha = chol.solve(targets);
    let quad: f64 = targets.iter().zip(&alpha).map(|(y, a)| y * a).sum();
    let n = targets.len() as f64;
    let value = -0.5 * quad - 0.5 * chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    (value, alpha)
}

fn factor(cache: &PairCache, kind: KernelKind, th: &GpHyperparams) -> Option<Cholesky> {
    Cholesky::factor_with_jitter(&cache.gram(kind, th), cache.n)
}

fn evidence_with_grad(
    cache: &PairCache,
    kind: KernelKind,
    targets: &[f64],
    th: &GpHyperparams,
) -> Option<Evidence> {
    let chol = factor(cache, kind, th)?;
    Some(grad_from_factor(cache, kind, targets, th, &chol))
}

fn grad_from_factor(
    cache: &PairCache,
    kind: KernelKind,
    targets: &[f64],
    th: &GpHyperparams,
    chol: &Cholesky,
) -> Evidence {
    let n = cache.n;
    let (value, alpha) = data_term(chol, targets);
    let inv = chol.inverse();
    let decays = cache.decays(th);
    // ∂L/∂θ = ½ tr[(ααᵀ − A⁻¹) ∂A/∂θ], summed over the lower triangle.
    let mut grad = [0.0; N_PARAMS];
    let mut idx = 0;
    for i in 0..n {
        for j in 0..=i {
            let w = alpha[i] * alpha[j] - inv[i * n + j];
            let w = if i == j { 0.5 * w } else { w };
            let (_, dk) = kernel_with(kind, &cache.features[idx], &decays[cache.lag_slot[idx]], th);
            for p in 0..6 {
                grad[p] += w * dk[p];
            }
            if i == j {
                grad[NOISE] += w;
            }
            idx += 1;
        }
    }
    for (g, on) in grad.iter_mut().zip(kind.active()) {
        if !on {
            *g = 0.0;
        }
    }
    Evidence { value, grad }
}

/// GP conditioned on a fixed training set and hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    kind: KernelKind,
    theta: GpHyperparams,
    points: Vec<GpPoint>,
    targets: Vec<f64>,
    chol: Option<Cholesky>,
    alpha: Vec<f64>,
}

impl GpModel {
    pub fn new(
        kind: KernelKind,
        points: Vec<GpPoint>,
        targets: Vec<f64>,
        theta: GpHyperparams,
    ) -> Result<Self, GpError> {
        if points.len() != targets.len() {
            return Err(GpError::Length {
                points: points.len(),
                targets: targets.len(),
            });
        }
        let (chol, alpha) = if points.is_empty() {
            (None, Vec::new())
        } else {
            let cache = PairCache::new(&points);
            let chol = Cholesky::factor_with_jitter(&cache.gram(kind, &theta), points.len())
                .ok_or(GpError::Cholesky)?;
            let alpha = chol.solve(&targets);
            (Some(chol), alpha)
        };
        Ok(GpModel {
            kind,
            theta,
            points,
            targets,
            chol,
            alpha,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn theta(&self) -> &GpHyperparams {
        &self.theta
    }

    pub fn points(&self) -> &[GpPoint] {
        &self.points
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Jitter that was needed to factor the Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.chol.as_ref().map_or(0.0, Cholesky::jitter)
    }

    pub fn k(&self, a: &GpPoint, b: &GpPoint) -> f64 {
        kernel_value(self.kind, a, b, &self.theta)
    }

    pub(crate) fn cross(&self, query: &GpPoint) -> Vec<f64> {
        self.points.iter().map(|p| self.k(p, query)).collect()
    }

    /// Mean from a cross-covariance vector whose first `len()` entries
    /// belong to this model's training points.
    pub(crate) fn mean_from_cross(&self, kq: &[f64]) -> f64 {
        kq.iter().zip(&self.alpha).map(|(k, a)| k * a).sum()
    }

    pub(crate) fn variance_from_cross(&self, kq: &[f64], prior: f64) -> f64 {
        match &self.chol {
            None => prior,
            Some(chol) => {
                let v = chol.solve_lower(kq);
                (prior - v.iter().map(|x| x * x).sum::<f64>()).max(0.0)
            }
        }
    }

    pub fn mean(&self, query: &GpPoint) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.cross(query)
            .iter()
            .zip(&self.alpha)
            .map(|(k, a)| k * a)
            .sum()
    }

    pub fn variance(&self, query: &GpPoint) -> f64 {
        let prior = self.k(query, query);
        match &self.chol {
            None => prior,
            Some(chol) => {
                let v = chol.solve_lower(&self.cross(query));
                (prior - v.iter().map(|x| x * x).sum::<f64>()).max(0.0)
            }
        }
    }

    /// Predictive mean and variance of the latent function at `query`.
    pub fn posterior(&self, query: &GpPoint) -> (f64, f64) {
        if self.points.is_empty() {
            return (0.0, self.k(query, query));
        }
        let kq = self.cross(query);
        let mu = kq.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = self.chol.as_ref().expect("factor").solve_lower(&kq);
        let var = (self.k(query, query) - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (mu, var)
    }

    /// Adds a pending evaluation with dummy target 0. Only the variance of
    /// the returned model is meaningful.
    pub fn with_hallucinated(&self, point: GpPoint) -> Result<Self, GpError> {
        let mut next = self.clone();
        let diag = self.k(&point, &point) + self.theta.noise;
        let chol = match &self.chol {
            None => Cholesky::factor_with_jitter(&[diag], 1),
            Some(c) => c.append(&self.cross(&point), diag),
        }
        .ok_or(GpError::Cholesky)?;
        next.points.push(point);
        next.targets.push(0.0);
        next.alpha = chol.solve(&next.targets);
        next.chol = Some(chol);
        Ok(next)
    }

    /// `−½ yᵀA⁻¹y − ½ ln|A| − (N/2) ln 2π` with `A = K̃ + σ²I`.
    pub fn log_evidence(&self) -> Result<f64, GpError> {
        let chol = self.chol.as_ref().ok_or(GpError::Empty)?;
        Ok(data_term(chol, &self.targets).0)
    }

    /// Log evidence plus the log hyperparameter prior.
    pub fn log_marginal(&self, bounds: &HyperBounds) -> Result<f64, GpError> {
        Ok(self.log_evidence()? + bounds.ln_prior(self.kind, &self.theta))
    }

    /// Gradient of [`GpModel::log_marginal`] in [`PARAM_NAMES`] order.
    /// The uniform prior contributes nothing inside the box.
    pub fn grad_log_marginal(&self) -> Result<[f64; N_PARAMS], GpError> {
        if self.points.is_empty() {
            return Err(GpError::Empty);
        }
        let cache = PairCache::new(&self.points);
        evidence_with_grad(&cache, self.kind, &self.targets, &self.theta)
            .map(|e| e.grad)
            .ok_or(GpError::Cholesky)
    }

    /// Writes the Gram matrix `K̃ + σ²I` as CSV.
    pub fn write_gram_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let gram = PairCache::new(&self.points).gram(self.kind, &self.theta);
        let n = self.points.len();
        for i in 0..n {
            let row: Vec<String> = gram[i * n..(i + 1) * n]
                .iter()
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 3,
            max_iters: 100,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub theta: GpHyperparams,
    pub log_marginal: f64,
    /// Set when every ascent failed numerically and `theta` is the init.
    pub failed: bool,
}

/// MAP hyperparameters by projected gradient ascent from `init` plus
/// `restarts` uniform random starts; the best log marginal wins.
pub fn fit(
    kind: KernelKind,
    points: &[GpPoint],
    targets: &[f64],
    init: GpHyperparams,
    bounds: &HyperBounds,
    opts: &FitOptions,
    seed: u64,
) -> FitOutcome {
    let init = bounds.clip(init);
    if points.len() < 2 || points.len() != targets.len() {
        return FitOutcome {
            theta: init,
            log_marginal: f64::NAN,
            failed: false,
        };
    }
    let cache = PairCache::new(points);
    let prior = bounds.ln_prior(kind, &init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active = kind.active();

    let mut best: Option<(GpHyperparams, f64)> = None;
    for restart in 0..=opts.restarts {
        let start = if restart == 0 {
            init
        } else {
            let mut a = init.to_array();
            for i in 0..N_PARAMS {
                if active[i] {
                    a[i] = rng.gen_range(bounds.lower[i]..=bounds.upper[i]);
                }
            }
            GpHyperparams::from_array(a)
        };
        if let Some((theta, value)) = ascend(&cache, kind, targets, start, bounds, opts) {
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((theta, value));
            }
        }
    }
    match best {
        Some((theta, value)) => FitOutcome {
            theta,
            log_marginal: value + prior,
            failed: false,
        },
        None => FitOutcome {
            theta: init,
            log_marginal: f64::NAN,
            failed: true,
        },
    }
}

/// Gradient ascent in box-normalized coordinates `u = (θ − lo) / width`,
/// projected back onto the box, with Armijo backtracking.
fn ascend(
    cache: &PairCache,
    kind: KernelKind,
    targets: &[f64],
    start: GpHyperparams,
    bounds: &HyperBounds,
    opts: &FitOptions,
) -> Option<(GpHyperparams, f64)> {
    let active = kind.active();
    let lower = bounds.lower;
    let width: [f64; N_PARAMS] = std::array::from_fn(|i| bounds.upper[i] - bounds.lower[i]);
    let to_theta = |u: &[f64; N_PARAMS]| {
        GpHyperparams::from_array(std::array::from_fn(|i| lower[i] + u[i] * width[i]))
    };
    let theta0 = bounds.clip(start).to_array();
    let mut u: [f64; N_PARAMS] = std::array::from_fn(|i| (theta0[i] - lower[i]) / width[i]);
    let mut current = evidence_with_grad(cache, kind, targets, &to_theta(&u))?;
    let grad_u = |e: &Evidence| -> [f64; N_PARAMS] {
        std::array::from_fn(|i| if active[i] { e.grad[i] * width[i] } else { 0.0 })
    };
    let mut g = grad_u(&current);
    let mut step: f64 = 0.1;

    for _ in 0..opts.max_iters {
        // Projected gradient: drop components pushing out of the box.
        let mut norm_inf: f64 = 0.0;
        for i in 0..N_PARAMS {
            let blocked = (u[i] <= 0.0 && g[i] < 0.0) || (u[i] >= 1.0 && g[i] > 0.0);
            if !blocked {
                norm_inf = norm_inf.max((g[i] / width[i]).abs());
            }
        }
        if norm_inf < opts.grad_tol {
            break;
        }

        let mut accepted = None;
        let mut s = step;
        while s > 1e-12 {
            let next: [f64; N_PARAMS] = std::array::from_fn(|i| (u[i] + s * g[i]).clamp(0.0, 1.0));
            let gain: f64 = (0..N_PARAMS).map(|i| g[i] * (next[i] - u[i])).sum();
            if gain <= 0.0 {
                break;
            }
            if let Some(chol) = factor(cache, kind, &to_theta(&next)) {
                if data_term(&chol, targets).0 >= current.value + 1e-4 * gain {
                    accepted = Some((next, chol));
                    break;
                }
            }
            s *= 0.5;
        }
        let Some((next, chol)) = accepted else { break };
        let e = grad_from_factor(cache, kind, targets, &to_theta(&next), &chol);
        let g_next = grad_u(&e);
        // Barzilai-Borwein length for the next trial step.
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..N_PARAMS {
            let du = next[i] - u[i];
            ss += du * du;
            sy -= du * (g_next[i] - g[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-8, 1e8)
        } else {
            (s * 2.0).min(1e8)
        };
        let improved = e.value - current.value;
        u = next;
        g = g_next;
        current = e;
        if improved <= 1e-12 * current.value.abs().max(1.0) {
            break;
        }
    }
    Some((to_theta(&u), current.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn pt(x: &[f64], h: &[usize], t: f64) -> GpPoint {
        GpPoint {
            x: x.to_vec(),
            h: h.to_vec(),
            t,
        }
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<GpPoint>, Vec<f64>) {
        let points: Vec<GpPoint> = (0..n)
            .map(|_| {
                pt(
                    &[rng.gen(), rng.gen()],
                    &[rng.gen_range(0..3), rng.gen_range(0..2)],
                    rng.gen_range(0..6) as f64,
                )
            })
            .collect();
        let targets = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (points, targets)
    }

    fn random_theta(rng: &mut ChaCha8Rng) -> GpHyperparams {
        GpHyperparams {
            eps1: rng.gen_range(0.02..0.45),
            eps2: rng.gen_range(0.02..0.45),
            lengthscale: rng.gen_range(0.1..2.0),
            sigma1: rng.gen_range(0.2..3.0),
            sigma2: rng.gen_range(0.2..3.0),
            lambda: rng.gen_range(0.05..0.95),
            noise: rng.gen_range(0.01..0.5),
        }
    }

    #[test]
    fn continuous_kernel_examples() {
        assert_eq!(k_continuous(&[0.3, 0.1], &[0.3, 0.1], 1.0, 0.7), 1.0);
        let l = 0.25;
        let v = k_continuous(&[0.0], &[0.5], 2.0, l);
        assert!((v - 2.0 / E).abs() < 1e-12);
        assert!((k_continuous(&[0.0], &[1.0], 1.5, 1e12) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn categorical_kernel_examples() {
        assert_eq!(k_categorical(&[1], &[1], 1.0), 1.0);
        assert_eq!(k_categorical(&[1], &[0], 1.0), 0.0);
        assert_eq!(k_categorical(&[1, 0], &[1, 1], 2.0), 1.0);
    }

    #[test]
    fn time_kernel_examples() {
        assert_eq!(k_time(4.0, 4.0, 0.3), 1.0);
        assert_eq!(k_time(0.0, 9.0, 0.0), 1.0);
        assert!((k_time(1.0, 3.0, 0.19) - 0.81).abs() < 1e-12);
        assert!(k_time(0.0, 3.0, 0.2) < k_time(0.0, 2.0, 0.2));
    }

    #[test]
    fn mixed_kernel_examples() {
        let a = pt(&[0.2], &[0], 1.0);
        let b = pt(&[0.6], &[1], 3.0);
        let mut th = GpHyperparams::default();
        let kxt = k_continuous(&a.x, &b.x, th.sigma1, th.lengthscale) * k_time(1.0, 3.0, th.eps1);
        let kht = k_categorical(&a.h, &b.h, th.sigma2) * k_time(1.0, 3.0, th.eps2);
        th.lambda = 0.0;
        assert!((k_mixed(&a, &b, &th) - (kxt + kht)).abs() < 1e-15);
        th.lambda = 1.0;
        assert!((k_mixed(&a, &b, &th) - kxt * kht).abs() < 1e-15);
        th.lambda = 0.3;
        th.sigma1 = 1.0;
        th.sigma2 = 1.0;
        assert!((k_mixed(&a, &a, &th) - (0.7 * 2.0 + 0.3)).abs() < 1e-15);
        assert_eq!(k_mixed(&a, &b, &th), k_mixed(&b, &a, &th));
    }

    #[test]
    fn empty_posterior_is_prior() {
        let th = GpHyperparams::default();
        let m = GpModel::new(KernelKind::Mixed, vec![], vec![], th).unwrap();
        let q = pt(&[0.4], &[0], 2.0);
        let (mu, var) = m.posterior(&q);
        assert_eq!(mu, 0.0);
        assert_eq!(var, k_mixed(&q, &q, &th));
        assert_eq!(m.log_evidence(), Err(GpError::Empty));
    }

    #[test]
    fn single_observation_closed_form() {
        let th = GpHyperparams {
            noise: 0.2,
            ..GpHyperparams::default()
        };
        let p = pt(&[0.5], &[1], 0.0);
        let m = GpModel::new(KernelKind::Mixed, vec![p.clone()], vec![0.8], th).unwrap();
        let k11 = k_mixed(&p, &p, &th);
        let (mu, var) = m.posterior(&p);
        assert!((mu - k11 * 0.8 / (k11 + 0.2)).abs() < 1e-12);
        assert!((var - (k11 - k11 * k11 / (k11 + 0.2))).abs() < 1e-12);

        let zero = GpModel::new(KernelKind::Mixed, vec![p.clone()], vec![0.0], th).unwrap();
        let b = HyperBounds::for_dims(1);
        let want =
            -0.5 * (k11 + 0.2).ln() - 0.5 * (2.0 * PI).ln() + b.ln_prior(KernelKind::Mixed, &th);
        assert!((zero.log_marginal(&b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let err = GpModel::new(
            KernelKind::Mixed,
            vec![pt(&[0.1], &[0], 0.0)],
            vec![],
            GpHyperparams::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            GpError::Length {
                points: 1,
                targets: 0
            }
        );
    }

    #[test]
    fn pure_noise_doubling() {
        // With σ₁, σ₂ at their floor and far-apart inputs, K̃ ≈ 0 and the
        // evidence is that of independent N(0, σ²) draws.
        let th = GpHyperparams {
            sigma1: 1e-12,
            sigma2: 1e-12,
            noise: 0.05,
            ..GpHyperparams::default()
        };
        let points: Vec<_> = (0..5).map(|i| pt(&[i as f64], &[i], i as f64)).collect();
        let y = vec![0.3, -0.2, 0.5, 0.1, -0.4];
        let a = GpModel::new(KernelKind::Mixed, points.clone(), y.clone(), th).unwrap();
        let b = GpModel::new(
            KernelKind::Mixed,
            points,
            y.clone(),
            GpHyperparams { noise: 0.1, ..th },
        )
        .unwrap();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let want = -2.5 * 2f64.ln() - yy / 2.0 * (1.0 / 0.1 - 1.0 / 0.05);
        let got = b.log_evidence().unwrap() - a.log_evidence().unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn lambda_partial_at_equal_factors() {
        let th = GpHyperparams {
            sigma1: 0.7,
            sigma2: 0.7,
            eps1: 0.2,
            eps2: 0.2,
            ..GpHyperparams::default()
        };
        let f = Features {
            d2: 0.0,
            matches: 1.0,
            lag: 2.0,
        };
        let (_, dk) = kernel(KernelKind::Mixed, &f, &th);
        let k = 0.7 * 0.8;
        assert!((dk[LAMBDA] - (-2.0 * k + k * k)).abs() < 1e-12);
    }

    #[test]
    fn eps_gradient_vanishes_without_lag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut points, y) = random_points(8, &mut rng);
        points.iter_mut().for_each(|p| p.t = 4.0);
        let m = GpModel::new(KernelKind::Mixed, points, y, random_theta(&mut rng)).unwrap();
        let g = m.grad_log_marginal().unwrap();
        assert_eq!(g[EPS1], 0.0);
        assert_eq!(g[EPS2], 0.0);
    }

    fn fd_grad(
        kind: KernelKind,
        points: &[GpPoint],
        y: &[f64],
        th: GpHyperparams,
    ) -> [f64; N_PARAMS] {
        let h = 1e-6;
        let mut out = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            let mut a = th.to_array();
            let mut b = th.to_array();
            a[i] += h;
            b[i] -= h;
            let fa = GpModel::new(
                kind,
                points.to_vec(),
                y.to_vec(),
                GpHyperparams::from_array(a),
            )
            .unwrap()
            .log_evidence()
            .unwrap();
            let fb = GpModel::new(
                kind,
                points.to_vec(),
                y.to_vec(),
                GpHyperparams::from_array(b),
            )
            .unwrap()
            .log_evidence()
            .unwrap();
            out[i] = (fa - fb) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [KernelKind::Mixed, KernelKind::TimeContinuous] {
            for _ in 0..10 {
                let n = rng.gen_range(3..=12);
                let (points, y) = random_points(n, &mut rng);
                let th = random_theta(&mut rng);
                let m = GpModel::new(kind, points.clone(), y.clone(), th).unwrap();
                let g = m.grad_log_marginal().unwrap();
                let fd = fd_grad(kind, &points, &y, th);
                for i in 0..N_PARAMS {
                    let want = if kind.active()[i] { fd[i] } else { 0.0 };
                    let rel = (g[i] - want).abs() / g[i].abs().max(want.abs()).max(1e-3);
                    assert!(
                        rel < 1e-4,
                        "{kind:?} {} {} vs {}",
                        PARAM_NAMES[i],
                        g[i],
                        want
                    );
                }
            }
        }
    }

    #[test]
    fn hallucination_shrinks_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (points, y) = random_points(6, &mut rng);
        let th = random_theta(&mut rng);
        let m = GpModel::new(KernelKind::Mixed, points, y, th).unwrap();
        let q = pt(&[0.5, 0.5], &[1, 0], 6.0);
        let grown = m.with_hallucinated(q.clone()).unwrap();
        assert!(grown.variance(&q) < m.variance(&q));
        let probe = pt(&[0.1, 0.9], &[2, 1], 6.0);
        assert!(grown.variance(&probe) <= m.variance(&probe) + 1e-12);
        let rebuilt = GpModel::new(
            KernelKind::Mixed,
            grown.points().to_vec(),
            grown.targets().to_vec(),
            th,
        )
        .unwrap();
        assert!((rebuilt.variance(&probe) - grown.variance(&probe)).abs() < 1e-10);
    }

    #[test]
    fn gram_csv_has_square_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (points, y) = random_points(4, &mut rng);
        let m = GpModel::new(KernelKind::Mixed, points, y, GpHyperparams::default()).unwrap();
        let mut buf = Vec::new();
        m.write_gram_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn fit_never_loses_to_init_and_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bounds = HyperBounds::for_dims(2);
        for seed in 0..4 {
            let (points, y) = random_points(10, &mut rng);
            let init = GpHyperparams::default();
            let base = GpModel::new(KernelKind::Mixed, points.clone(), y.clone(), init)
                .unwrap()
                .log_marginal(&bounds)
                .unwrap();
            let out = fit(
                KernelKind::Mixed,
                &points,
                &y,
                init,
                &bounds,
                &FitOptions::default(),
                seed,
            );
            assert!(!out.failed);
            assert!(bounds.contains(&out.theta));
            assert!(out.log_marginal >= base - 1e-9);
        }
    }

    #[test]
    fn fit_is_deterministic_and_skips_tiny_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (points, y) = random_points(9, &mut rng);
        let bounds = HyperBounds::for_dims(2);
        let opts = FitOptions {
            restarts: 0,
            ..FitOptions::default()
        };
        let init = GpHyperparams::default();
        let a = fit(KernelKind::Mixed, &points, &y, init, &bounds, &opts, 1);
        let b = fit(KernelKind::Mixed, &points, &y, init, &bounds, &opts, 99);
        assert_eq!(a, b);
        let tiny = fit(
            KernelKind::Mixed,
            &points[..1],
            &y[..1],
            init,
            &bounds,
            &opts,
            1,
        );
        assert_eq!(tiny.theta, init);
    }

    #[test]
    fn inactive_parameters_are_untouched_by_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (points, y) = random_points(10, &mut rng);
        let init = GpHyperparams::default();
        let out = fit(
            KernelKind::TimeContinuous,
            &points,
            &y,
            init,
            &HyperBounds::for_dims(2),
            &FitOptions::default(),
            0,
        );
        assert_eq!(out.theta.eps2, init.eps2);
        assert_eq!(out.theta.sigma2, init.sigma2);
        assert_eq!(out.theta.lambda, init.lambda);
    }

    #[test]
    fn stationary_data_fits_small_forgetting() {
        // Draws from a stationary GP (ε = 0) spread over several rounds.
        let truth = GpHyperparams {
            eps1: 0.0,
            eps2: 0.0,
            lengthscale: 0.3,
            sigma1: 1.0,
            sigma2: 0.5,
            lambda: 0.5,
            noise: 0.01,
        };
        let bounds = HyperBounds::for_dims(1);
        let mut small = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 40;
            let points: Vec<GpPoint> = (0..n)
                .map(|i| pt(&[rng.gen()], &[rng.gen_range(0..2)], (i / 4) as f64))
                .collect();
            let cache = PairCache::new(&points);
            let gram = cache.gram(KernelKind::Mixed, &truth);
            let chol = Cholesky::factor_with_jitter(&gram, n).unwrap();
            let z: Vec<f64> = (0..n)
                .map(|_| {
                    let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-300), rng.gen());
                    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
                })
                .collect();
            let y: Vec<f64> = (0..n)
                .map(|i| (0..=i).map(|k| chol.get(i, k) * z[k]).sum())
                .collect();
            let out = fit(
                KernelKind::Mixed,
                &points,
                &y,
                GpHyperparams::default(),
                &bounds,
                &FitOptions::default(),
                seed,
            );
            if out.theta.eps1 <= 0.2 && out.theta.eps2 <= 0.2 {
                small += 1;
            }
        }
        assert!(small >= 16, "{small}/20");
    }
}
