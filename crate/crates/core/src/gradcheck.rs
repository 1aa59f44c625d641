//! Finite-difference audit of the analytic log-marginal gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{GpError, GpHyperparams, GpModel, GpPoint, KernelKind, N_PARAMS, PARAM_NAMES};

pub const GRAD_TOL: f64 = 1e-4;
pub const MAX_POINTS: usize = 15;
const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are judged on absolute error.
const REL_FLOOR: f64 = 1e-3;

/// One random mixed-kernel dataset with hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradInstance {
    pub points: Vec<GpPoint>,
    pub targets: Vec<f64>,
    pub theta: GpHyperparams,
}

impl GradInstance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.gen_range(2..=MAX_POINTS);
        let dims = rng.gen_range(1..=3);
        let arities: Vec<usize> = (0..rng.gen_range(1..=2))
            .map(|_| rng.gen_range(2..=3))
            .collect();
        let points = (0..n)
            .map(|_| GpPoint {
                x: (0..dims).map(|_| rng.gen()).collect(),
                h: arities.iter().map(|&c| rng.gen_range(0..c)).collect(),
                t: rng.gen_range(0..10) as f64,
            })
            .collect();
        let targets = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta = GpHyperparams {
            eps1: rng.gen_range(0.02..0.45),
            eps2: rng.gen_range(0.02..0.45),
            lengthscale: rng.gen_range(0.1..2.0),
            sigma1: rng.gen_range(0.2..3.0),
            sigma2: rng.gen_range(0.2..3.0),
            lambda: rng.gen_range(0.05..0.95),
            noise: rng.gen_range(0.01..0.5),
        };
        GradInstance {
            points,
            targets,
            theta,
        }
    }

    fn model(&self, theta: GpHyperparams) -> Result<GpModel, GpError> {
        GpModel::new(
            KernelKind::Mixed,
            self.points.clone(),
            self.targets.clone(),
            theta,
        )
    }

    pub fn analytic(&self) -> Result<[f64; N_PARAMS], GpError> {
        self.model(self.theta)?.grad_log_marginal()
    }

    /// Central differences of the log evidence.
    pub fn finite_difference(&self) -> Result<[f64; N_PARAMS], GpError> {
        let mut out = [0.0; N_PARAMS];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut up = self.theta.to_array();
            let mut down = up;
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            let fu = self.model(GpHyperparams::from_array(up))?.log_evidence()?;
            let fd = self
                .model(GpHyperparams::from_array(down))?
                .log_evidence()?;
            *slot = (fu - fd) / (2.0 * FD_STEP);
        }
        Ok(out)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradFailure {
    pub instance: usize,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub data: GradInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    /// Worst relative error per hyperparameter.
    pub max_rel: [f64; N_PARAMS],
    /// First instance with the largest error over tolerance, if any.
    pub failure: Option<GradFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel.iter().all(|&e| e < GRAD_TOL)
    }

    pub fn lines(&self) -> Vec<String> {
        PARAM_NAMES
            .iter()
            .zip(self.max_rel)
            .map(|(name, e)| {
                format!(
                    "{name:<12} max_rel_err={e:.3e} {}",
                    if e < GRAD_TOL { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Compares `gradient` against central differences on `count` random
/// instances drawn from `seed`.
pub fn run_gradcheck<F>(seed: u64, count: usize, gradient: F) -> Result<GradcheckReport, GpError>
where
    F: Fn(&GradInstance) -> Result<[f64; N_PARAMS], GpError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = [0.0f64; N_PARAMS];
    let mut failure: Option<(f64, GradFailure)> = None;
    for k in 0..count {
        let inst = GradInstance::random(&mut rng);
        let a = gradient(&inst)?;
        let f = inst.finite_difference()?;
        for i in 0..N_PARAMS {
            let e = relative_error(a[i], f[i]);
            max_rel[i] = max_rel[i].max(e);
            if e >= GRAD_TOL && failure.as_ref().is_none_or(|(worst, _)| e > *worst) {
                failure = Some((
                    e,
                    GradFailure {
                        instance: k,
                        param: PARAM_NAMES[i].to_string(),
                        analytic: a[i],
                        numeric: f[i],
                        data: inst.clone(),
                    },
                ));
            }
        }
    }
    Ok(GradcheckReport {
        instances: count,
        max_rel,
        failure: failure.map(|(_, f)| f),
    })
}
