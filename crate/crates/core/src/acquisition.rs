//! Batch UCB over the continuous dimensions.
//!
//! Picks are made one at a time. The mean stays frozen at the batch's
//! starting posterior while each chosen point is added to the covariance
//! with a dummy target, shrinking the variance around it so later picks
//! spread out.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, GpModel, GpPoint};
use crate::space::{Assignment, ContinuousParam};

const GOLDEN: f64 = 0.618_033_988_749_894_8;
/// Half-width of the refinement bracket, in unit-cube coordinates.
const REFINE_RADIUS: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum AcquisitionError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("pick {pick} left the box in dimension `{param}`: {value}")]
    OutOfBounds {
        pick: usize,
        param: String,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub c1: f64,
    pub c2: f64,
    pub n_candidates: usize,
    pub n_refine_steps: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            c1: 0.2,
            c2: 0.4,
            n_candidates: 1000,
            n_refine_steps: 20,
        }
    }
}

/// `β_t = c1 + c2·ln t`, floored at zero. `t` below 1 is treated as 1.
pub fn beta(t: f64, cfg: &AcquisitionConfig) -> f64 {
    (cfg.c1 + cfg.c2 * t.max(1.0).ln()).max(0.0)
}

/// Frozen-mean, shrinking-variance view of a GP during one batch.
#[derive(Debug, Clone)]
pub struct HallucinationChain {
    base: GpModel,
    current: GpModel,
    query_t: f64,
    sqrt_beta: f64,
}

impl HallucinationChain {
    pub fn new(base: &GpModel, query_t: f64, beta: f64) -> Self {
        HallucinationChain {
            base: base.clone(),
            current: base.clone(),
            query_t,
            sqrt_beta: beta.max(0.0).sqrt(),
        }
    }

    pub fn point(&self, unit_x: &[f64], h: &Assignment) -> GpPoint {
        GpPoint {
            x: unit_x.to_vec(),
            h: h.0.clone(),
            t: self.query_t,
        }
    }

    /// Frozen mean and current standard deviation at `unit_x`.
    pub fn mean_sigma(&self, unit_x: &[f64], h: &Assignment) -> (f64, f64) {
        let q = self.point(unit_x, h);
        let kq = self.current.cross(&q);
        let mu = self.base.mean_from_cross(&kq[..self.base.len()]);
        let var = self
            .current
            .variance_from_cross(&kq, self.current.k(&q, &q));
        (mu, var.sqrt())
    }

    pub fn sigma(&self, unit_x: &[f64], h: &Assignment) -> f64 {
        self.mean_sigma(unit_x, h).1
    }

    pub fn score(&self, unit_x: &[f64], h: &Assignment) -> f64 {
        let (mu, sigma) = self.mean_sigma(unit_x, h);
        mu + self.sqrt_beta * sigma
    }

    pub fn commit(&mut self, unit_x: &[f64], h: &Assignment) -> Result<(), GpError> {
        self.current = self.current.with_hallucinated(self.point(unit_x, h))?;
        Ok(())
    }

    pub fn hallucinated(&self) -> usize {
        self.current.len() - self.base.len()
    }
}

/// Picks one continuous vector per entry of `fixed_h` by sequentially
/// maximizing `μ_{t,1}(x) + √β_t·σ_{t,b}(x)`. `model` must have been built
/// on unit-cube inputs for `bounds`. `t` is the index of the round the
/// picks will be evaluated in.
pub fn select_batch_continuous<R: Rng + ?Sized>(
    model: &GpModel,
    fixed_h: &[Assignment],
    bounds: &[ContinuousParam],
    t: usize,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, AcquisitionError> {
    select_batch_continuous_observed(model, fixed_h, bounds, t, cfg, rng, |_, _| {})
}

/// As [`select_batch_continuous`], calling `observer(b, chain)` just
/// before pick `b` is made.
pub fn select_batch_continuous_observed<R, F>(
    model: &GpModel,
    fixed_h: &[Assignment],
    bounds: &[ContinuousParam],
    t: usize,
    cfg: &AcquisitionConfig,
    rng: &mut R,
    mut observer: F,
) -> Result<Vec<Vec<f64>>, AcquisitionError>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &HallucinationChain),
{
    let dims = bounds.len();
    let mut chain = HallucinationChain::new(model, t as f64, beta(t as f64, cfg));
    let mut picks = Vec::with_capacity(fixed_h.len());

    for (b, h) in fixed_h.iter().enumerate() {
        observer(b, &chain);
        let (unit, _) = maximize(&chain, h, dims, cfg, rng);
        let x: Vec<f64> = bounds
            .iter()
            .zip(&unit)
            .map(|(p, u)| (p.lower + u * p.width()).clamp(p.lower, p.upper))
            .collect();
        for (p, v) in bounds.iter().zip(&x) {
            if !(v.is_finite() && p.lower <= *v && *v <= p.upper) {
                return Err(AcquisitionError::OutOfBounds {
                    pick: b,
                    param: p.name.clone(),
                    value: *v,
                });
            }
        }
        if b + 1 < fixed_h.len() {
            chain.commit(&unit, h)?;
        }
        picks.push(x);
    }
    Ok(picks)
}

/// Random candidates, then one golden-section sweep per coordinate around
/// the best. Ties keep the earliest candidate.
fn maximize<R: Rng + ?Sized>(
    chain: &HallucinationChain,
    h: &Assignment,
    dims: usize,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..cfg.n_candidates.max(1) {
        let u: Vec<f64> = (0..dims).map(|_| rng.gen::<f64>()).collect();
        let s = chain.score(&u, h);
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((u, s));
        }
    }
    let (mut u, mut score) = best.expect("at least one candidate");
    if dims == 0 || cfg.n_refine_steps == 0 {
        return (u, score);
    }

    for d in 0..dims {
        let mut lo = (u[d] - REFINE_RADIUS).max(0.0);
        let mut hi = (u[d] + REFINE_RADIUS).min(1.0);
        let mut probe = u.clone();
        let eval = |v: f64, probe: &mut Vec<f64>| {
            probe[d] = v;
            chain.score(probe, h)
        };
        let mut a = hi - GOLDEN * (hi - lo);
        let mut b = lo + GOLDEN * (hi - lo);
        let mut fa = eval(a, &mut probe);
        let mut fb = eval(b, &mut probe);
        for _ in 0..cfg.n_refine_steps {
            if fa >= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - GOLDEN * (hi - lo);
                fa = eval(a, &mut probe);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + GOLDEN * (hi - lo);
                fb = eval(b, &mut probe);
            }
        }
        let (v, f) = if fa >= fb { (a, fa) } else { (b, fb) };
        if f > score {
            u[d] = v;
            score = f;
        }
    }
    (u, score)
}
