//! Time-varying EXP3 with multiple plays.
//!
//! Each round the bandit draws `B` distinct arms out of `C`. Oversized
//! weights are capped so that no arm's inclusion probability exceeds one,
//! the batch is drawn with dependent rounding so that arm `c` is included
//! with probability exactly `p_c`, and after the rewards come in every
//! weight receives an additive share `e·α/C · Σw` of the total mass. That
//! share keeps every arm recoverable after the reward distribution shifts.

use std::collections::BTreeMap;
use std::f64::consts::E;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weights are rescaled by their max once it exceeds this value.
const RESCALE_ABOVE: f64 = 1e100;
const SUM_TOL: f64 = 1e-6;
const SNAP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum BanditError {
    #[error("need at least one arm")]
    NoArms,
    #[error("plays per round must be in [1, {arms}], got {plays}")]
    InvalidPlays { plays: usize, arms: usize },
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("horizon of {0} rounds exhausted")]
    HorizonExceeded(usize),
    #[error("probabilities sum to {sum}, expected {plays}")]
    ProbabilitySum { sum: f64, plays: usize },
    #[error("probability {value} for arm {arm} outside [0, 1]")]
    ProbabilityRange { arm: usize, value: f64 },
    #[error("reward {value} for arm {arm} outside [0, 1]")]
    RewardRange { arm: usize, value: f64 },
    #[error("arm {0} carries a reward but was not selected")]
    UnselectedArm(usize),
    #[error("selected arm {0} has no reward")]
    MissingReward(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    arms: usize,
    plays: usize,
    horizon: usize,
    weights: Vec<f64>,
    gamma: f64,
    alpha: f64,
    round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapResult {
    pub capped_weights: Vec<f64>,
    /// Arms whose weight was capped, ascending.
    pub s0: Vec<usize>,
    pub nu: f64,
}

/// Everything `select_batch` decided; handed back to `update`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected arms, ascending.
    pub arms: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub cap: CapResult,
}

/// Exploration rate `min{1, √(C ln(C/B) / ((e−1) B T))}`; `C = B` yields 1.
pub fn exploration_rate(arms: usize, plays: usize, horizon: usize) -> f64 {
    if arms == plays {
        return 1.0;
    }
    let (c, b, t) = (arms as f64, plays as f64, horizon as f64);
    ((c * (c / b).ln()) / ((E - 1.0) * b * t)).sqrt().min(1.0)
}

impl BanditState {
    pub fn new(arms: usize, plays: usize, horizon: usize) -> Result<Self, BanditError> {
        if arms == 0 {
            return Err(BanditError::NoArms);
        }
        if plays == 0 || plays > arms {
            return Err(BanditError::InvalidPlays { plays, arms });
        }
        if horizon == 0 {
            return Err(BanditError::InvalidHorizon);
        }
        Ok(BanditState {
            arms,
            plays,
            horizon,
            weights: vec![1.0; arms],
            gamma: exploration_rate(arms, plays, horizon),
            alpha: 1.0 / horizon as f64,
            round: 0,
        })
    }

    /// Overrides γ, mainly for reproducing hand-worked examples.
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma.clamp(f64::MIN_POSITIVE, 1.0);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.arms, "weight vector length");
        assert!(
            weights.iter().all(|w| w.is_finite() && *w > 0.0),
            "weights must be positive"
        );
        self.weights = weights;
        self
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn plays(&self) -> usize {
        self.plays
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Capping threshold η = (1/B − γ/C) / (1 − γ).
    pub fn eta(&self) -> f64 {
        (1.0 / self.plays as f64 - self.gamma / self.arms as f64) / (1.0 - self.gamma)
    }

    pub fn cap_weights(&self) -> CapResult {
        let unchanged = CapResult {
            capped_weights: self.weights.clone(),
            s0: Vec::new(),
            nu: 0.0,
        };
        if self.gamma >= 1.0 {
            return unchanged;
        }
        let eta = self.eta();
        let total: f64 = self.weights.iter().sum();
        let max = self.weights.iter().cloned().fold(f64::MIN, f64::max);
        if max < eta * total {
            return unchanged;
        }

        // ν/η = k·ν + R, where the k largest weights are capped and R sums
        // the rest. Scan k upward until ν lands between the k-th and
        // (k+1)-th largest weights.
        let mut order: Vec<usize> = (0..self.arms).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        let mut rest = total;
        for k in 1..=self.arms {
            rest -= self.weights[order[k - 1]];
            let denom = 1.0 - eta * k as f64;
            if denom <= 0.0 {
                break;
            }
            let nu = eta * rest.max(0.0) / denom;
            let kth = self.weights[order[k - 1]];
            let next = order.get(k).map_or(f64::NEG_INFINITY, |&i| self.weights[i]);
            if nu <= kth && next < nu {
                let mut capped_weights = self.weights.clone();
                let mut s0: Vec<usize> = order[..k].to_vec();
                for &i in &s0 {
                    capped_weights[i] = nu;
                }
                s0.sort_unstable();
                return CapResult {
                    capped_weights,
                    s0,
                    nu,
                };
            }
        }
        unchanged
    }

    /// `p_c = B((1−γ) w_c / Σw + γ/C)` over the capped weights.
    pub fn arm_probabilities(&self, cap: &CapResult) -> Vec<f64> {
        let b = self.plays as f64;
        let c = self.arms as f64;
        let total: f64 = cap.capped_weights.iter().sum();
        cap.capped_weights
            .iter()
            .map(|w| (b * ((1.0 - self.gamma) * w / total + self.gamma / c)).min(1.0))
            .collect()
    }

    pub fn select_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Selection, BanditError> {
        if self.round >= self.horizon {
            return Err(BanditError::HorizonExceeded(self.horizon));
        }
        let cap = self.cap_weights();
        let probabilities = self.arm_probabilities(&cap);
        let arms = depround(self.plays, &probabilities, rng)?;
        Ok(Selection {
            arms,
            probabilities,
            cap,
        })
    }

    /// Applies the exponential-weights update for the rewards observed on
    /// the selected arms and advances the round counter.
    pub fn update(
        &mut self,
        selection: &Selection,
        rewards: &BTreeMap<usize, f64>,
    ) -> Result<(), BanditError> {
        if self.round >= self.horizon {
            return Err(BanditError::HorizonExceeded(self.horizon));
        }
        for (&arm, &g) in rewards {
            if !selection.arms.contains(&arm) {
                return Err(BanditError::UnselectedArm(arm));
            }
            if !(0.0..=1.0).contains(&g) {
                return Err(BanditError::RewardRange { arm, value: g });
            }
        }
        if let Some(&arm) = selection.arms.iter().find(|a| !rewards.contains_key(a)) {
            return Err(BanditError::MissingReward(arm));
        }

        let c = self.arms as f64;
        let b = self.plays as f64;
        let total: f64 = self.weights.iter().sum();
        let share = E * self.alpha / c * total;
        for (arm, w) in self.weights.iter_mut().enumerate() {
            if selection.cap.s0.contains(&arm) {
                *w += share;
                continue;
            }
            let gain = rewards
                .get(&arm)
                .map_or(0.0, |g| g / selection.probabilities[arm]);
            *w = *w * (b * self.gamma * gain / c).exp() + share;
        }

        let max = self.weights.iter().cloned().fold(0.0, f64::max);
        if max > RESCALE_ABOVE {
            self.weights.iter_mut().for_each(|w| *w /= max);
        }
        self.round += 1;
        Ok(())
    }
}

/// Dependent rounding: draws exactly `plays` distinct indices, each index
/// `i` included with probability exactly `p[i]`. Returned ascending.
pub fn depround<R: Rng + ?Sized>(
    plays: usize,
    p: &[f64],
    rng: &mut R,
) -> Result<Vec<usize>, BanditError> {
    for (arm, &value) in p.iter().enumerate() {
        if !(-SNAP..=1.0 + SNAP).contains(&value) || value.is_nan() {
            return Err(BanditError::ProbabilityRange { arm, value });
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - plays as f64).abs() > SUM_TOL {
        return Err(BanditError::ProbabilitySum { sum, plays });
    }

    let fractional = |v: f64| v > SNAP && v < 1.0 - SNAP;
    let mut q = p.to_vec();
    loop {
        let mut open = q
            .iter()
            .enumerate()
            .filter(|(_, &v)| fractional(v))
            .map(|(i, _)| i);
        let (i, j) = match (open.next(), open.next()) {
            (Some(i), Some(j)) => (i, j),
            (Some(i), None) => {
                // Only rounding residue can leave a single fractional entry.
                q[i] = q[i].round();
                break;
            }
            _ => break,
        };
        let up = (1.0 - q[i]).min(q[j]);
        let down = q[i].min(1.0 - q[j]);
        if rng.gen::<f64>() < down / (up + down) {
            q[i] += up;
            q[j] -= up;
        } else {
            q[i] -= down;
            q[j] += down;
        }
        for k in [i, j] {
            if q[k] <= SNAP {
                q[k] = 0.0;
            } else if q[k] >= 1.0 - SNAP {
                q[k] = 1.0;
            }
        }
    }
    let chosen: Vec<usize> = q
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect();
    debug_assert_eq!(chosen.len(), plays);
    Ok(chosen)
}
