//! Mixed continuous/categorical search spaces and the time-indexed
//! observation log shared by every explore strategy.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("parameter `{0}`: bounds must be finite with lower < upper")]
    InvalidBounds(String),
    #[error("categorical `{0}` needs at least two distinct choices")]
    InvalidChoices(String),
    #[error("search space has no parameters")]
    Empty,
    #[error("unknown label `{label}` for categorical `{param}`")]
    UnknownLabel { param: String, label: String },
    #[error("expected {expected} categorical labels, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("observation round {got} precedes last round {last}")]
    RoundOrder { last: usize, got: usize },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousParam {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl ContinuousParam {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        ContinuousParam {
            name: name.into(),
            lower,
            upper,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    fn check(&self) -> Result<(), SpaceError> {
        if self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper {
            Ok(())
        } else {
            Err(SpaceError::InvalidBounds(self.name.clone()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalParam {
    pub name: String,
    pub choices: Vec<String>,
}

impl CategoricalParam {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        choices: impl IntoIterator<Item = S>,
    ) -> Self {
        CategoricalParam {
            name: name.into(),
            choices: choices.into_iter().map(Into::into).collect(),
        }
    }

    fn check(&self) -> Result<(), SpaceError> {
        let distinct = self
            .choices
            .iter()
            .enumerate()
            .all(|(i, c)| !self.choices[..i].contains(c));
        if self.choices.len() >= 2 && distinct {
            Ok(())
        } else {
            Err(SpaceError::InvalidChoices(self.name.clone()))
        }
    }
}

/// One choice index per categorical dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn dims(&self) -> usize {
        self.0.len()
    }
}

/// Continuous subspace that replaces the shared continuous list when the
/// categorical assignment equals `assignment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySubspace {
    pub assignment: Vec<String>,
    pub continuous: Vec<ContinuousParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default)]
    pub continuous: Vec<ContinuousParam>,
    #[serde(default)]
    pub categorical: Vec<CategoricalParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_category_continuous: Option<Vec<CategorySubspace>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub x: Vec<f64>,
    pub h: Assignment,
}

impl SearchSpace {
    pub fn new(
        continuous: Vec<ContinuousParam>,
        categorical: Vec<CategoricalParam>,
    ) -> Result<Self, SpaceError> {
        let space = SearchSpace {
            continuous,
            categorical,
            per_category_continuous: None,
        };
        space.check()?;
        Ok(space)
    }

    /// One continuous dimension `x ∈ [0, π/2]` and one categorical `h ∈ {sin, cos}`.
    pub fn sincos() -> Self {
        SearchSpace {
            continuous: vec![ContinuousParam::new("x", 0.0, std::f64::consts::FRAC_PI_2)],
            categorical: vec![CategoricalParam::new("h", ["sin", "cos"])],
            per_category_continuous: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let space: SearchSpace = serde_json::from_str(text)?;
        space.check().map_err(serde::de::Error::custom)?;
        Ok(space)
    }

    pub fn check(&self) -> Result<(), SpaceError> {
        if self.continuous.is_empty() && self.categorical.is_empty() {
            return Err(SpaceError::Empty);
        }
        self.continuous
            .iter()
            .try_for_each(ContinuousParam::check)?;
        self.categorical
            .iter()
            .try_for_each(CategoricalParam::check)?;
        if let Some(subspaces) = &self.per_category_continuous {
            for sub in subspaces {
                self.parse_assignment(&sub.assignment)?;
                sub.continuous.iter().try_for_each(ContinuousParam::check)?;
            }
        }
        Ok(())
    }

    /// Number of bandit arms: the size of the Cartesian product of choices.
    pub fn n_arms(&self) -> usize {
        self.categorical.iter().map(|c| c.choices.len()).product()
    }

    /// Mixed-radix decode, first categorical dimension most significant.
    pub fn arm_assignment(&self, mut arm: usize) -> Assignment {
        let mut idx = vec![0; self.categorical.len()];
        for (d, cat) in self.categorical.iter().enumerate().rev() {
            let c = cat.choices.len();
            idx[d] = arm % c;
            arm /= c;
        }
        Assignment(idx)
    }

    pub fn assignment_arm(&self, h: &Assignment) -> usize {
        self.categorical
            .iter()
            .zip(&h.0)
            .fold(0, |acc, (cat, &i)| acc * cat.choices.len() + i)
    }

    pub fn parse_assignment<S: AsRef<str>>(&self, labels: &[S]) -> Result<Assignment, SpaceError> {
        if labels.len() != self.categorical.len() {
            return Err(SpaceError::ArityMismatch {
                expected: self.categorical.len(),
                got: labels.len(),
            });
        }
        self.categorical
            .iter()
            .zip(labels)
            .map(|(cat, label)| {
                let label = label.as_ref();
                cat.choices.iter().position(|c| c == label).ok_or_else(|| {
                    SpaceError::UnknownLabel {
                        param: cat.name.clone(),
                        label: label.to_string(),
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Assignment)
    }

    pub fn labels(&self, h: &Assignment) -> Vec<&str> {
        self.categorical
            .iter()
            .zip(&h.0)
            .map(|(cat, &i)| cat.choices[i].as_str())
            .collect()
    }

    /// The continuous dimensions active under assignment `h`.
    pub fn continuous_for(&self, h: &Assignment) -> &[ContinuousParam] {
        if let Some(subspaces) = &self.per_category_continuous {
            for sub in subspaces {
                if self.parse_assignment(&sub.assignment).as_ref() == Ok(h) {
                    return &sub.continuous;
                }
            }
        }
        &self.continuous
    }

    pub fn has_category_subspaces(&self) -> bool {
        self.per_category_continuous
            .as_ref()
            .is_some_and(|s| !s.is_empty())
    }

    /// Largest continuous dimensionality over all assignments.
    pub fn max_continuous_dims(&self) -> usize {
        let sub = self
            .per_category_continuous
            .iter()
            .flatten()
            .map(|s| s.continuous.len())
            .max()
            .unwrap_or(0);
        sub.max(self.continuous.len())
    }

    pub fn sample_assignment<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        Assignment(
            self.categorical
                .iter()
                .map(|c| rng.gen_range(0..c.choices.len()))
                .collect(),
        )
    }

    pub fn sample_x<R: Rng + ?Sized>(&self, h: &Assignment, rng: &mut R) -> Vec<f64> {
        self.continuous_for(h)
            .iter()
            .map(|p| p.lower + rng.gen::<f64>() * p.width())
            .collect()
    }

    pub fn sample_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Config {
        let h = self.sample_assignment(rng);
        let x = self.sample_x(&h, rng);
        Config { x, h }
    }
}

/// True iff every component of `config` lies inside `space`.
pub fn validate_config(space: &SearchSpace, config: &Config) -> bool {
    let h_ok = config.h.dims() == space.categorical.len()
        && space
            .categorical
            .iter()
            .zip(&config.h.0)
            .all(|(cat, &i)| i < cat.choices.len());
    if !h_ok {
        return false;
    }
    let dims = space.continuous_for(&config.h);
    dims.len() == config.x.len()
        && dims
            .iter()
            .zip(&config.x)
            .all(|(p, &v)| v.is_finite() && p.lower <= v && v <= p.upper)
}

/// Label-level variant of [`validate_config`]: unknown labels are invalid.
pub fn validate_labeled<S: AsRef<str>>(space: &SearchSpace, x: &[f64], labels: &[S]) -> bool {
    match space.parse_assignment(labels) {
        Ok(h) => validate_config(space, &Config { x: x.to_vec(), h }),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub round: usize,
    pub agent: usize,
    pub config: Config,
    pub raw_score: f64,
    pub reward: f64,
}

/// Append-only observation log with running reward extrema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    reward_min: f64,
    reward_max: f64,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset {
            observations: Vec::new(),
            reward_min: f64::INFINITY,
            reward_max: f64::NEG_INFINITY,
        }
    }

    pub fn push(&mut self, obs: Observation) -> Result<(), SpaceError> {
        if !obs.reward.is_finite() {
            return Err(SpaceError::NonFiniteReward(obs.reward));
        }
        if let Some(last) = self.observations.last() {
            if obs.round < last.round {
                return Err(SpaceError::RoundOrder {
                    last: last.round,
                    got: obs.round,
                });
            }
        }
        self.reward_min = self.reward_min.min(obs.reward);
        self.reward_max = self.reward_max.max(obs.reward);
        self.observations.push(obs);
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn reward_range(&self) -> Option<(f64, f64)> {
        (!self.is_empty()).then_some((self.reward_min, self.reward_max))
    }

    /// Observations whose assignment equals `h`, in insertion order. The
    /// parent's reward extrema are kept so normalization stays comparable
    /// across categories.
    pub fn filter_by_category(&self, h: &Assignment) -> Dataset {
        Dataset {
            observations: self
                .observations
                .iter()
                .filter(|o| &o.config.h == h)
                .cloned()
                .collect(),
            reward_min: self.reward_min,
            reward_max: self.reward_max,
        }
    }

    /// The most recent `n` observations.
    pub fn window(&self, n: usize) -> Dataset {
        let start = self.observations.len().saturating_sub(n);
        Dataset {
            observations: self.observations[start..].to_vec(),
            reward_min: self.reward_min,
            reward_max: self.reward_max,
        }
    }

    /// Min-max map of every reward into [0, 1]; a degenerate range maps to 0.5.
    pub fn normalize_rewards(&self) -> Result<Vec<f64>, SpaceError> {
        if self.is_empty() {
            return Err(SpaceError::EmptyDataset);
        }
        Ok(self
            .observations
            .iter()
            .map(|o| self.normalize(o.reward))
            .collect())
    }

    pub fn normalize(&self, reward: f64) -> f64 {
        let span = self.reward_max - self.reward_min;
        if !(span > 0.0) {
            0.5
        } else {
            ((reward - self.reward_min) / span).clamp(0.0, 1.0)
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}
