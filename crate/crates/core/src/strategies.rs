//! Explore and exploit planners for the population loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{select_batch_continuous, AcquisitionConfig, AcquisitionError};
use crate::bandit::{BanditError, BanditState, Selection};
use crate::gp::{
    fit, FitOptions, GpError, GpHyperparams, GpModel, GpPoint, HyperBounds, KernelKind,
};
use crate::space::{Assignment, Config, ContinuousParam, Dataset, SearchSpace};

pub const PBT_RESAMPLE_PROB: f64 = 0.25;
pub const PBT_FACTORS: [f64; 2] = [0.8, 1.2];

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error("{0} does not support per-category continuous subspaces")]
    UnsupportedSpace(StrategyKind),
    #[error("exploit needs at least two agents, got {0}")]
    PopulationTooSmall(usize),
    #[error("quantile must be in (0, 0.5], got {0}")]
    InvalidQuantile(f64),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    Random,
    Pbt,
    Pb2Rand,
    Pb2Mult,
    Pb2Mix,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Random,
        StrategyKind::Pbt,
        StrategyKind::Pb2Rand,
        StrategyKind::Pb2Mult,
        StrategyKind::Pb2Mix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Pbt => "pbt",
            StrategyKind::Pb2Rand => "pb2-rand",
            StrategyKind::Pb2Mult => "pb2-mult",
            StrategyKind::Pb2Mix => "pb2-mix",
        }
    }

    /// Whether categories are chosen by the time-varying bandit.
    pub fn uses_bandit(self) -> bool {
        matches!(self, StrategyKind::Pb2Mult | StrategyKind::Pb2Mix)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| StrategyError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub agent: usize,
    pub config: Config,
}

/// New configurations for the replaced agents, in agent order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExploreDecision {
    pub entries: Vec<AgentConfig>,
}

impl ExploreDecision {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A bandit draw plus which agent ran which arm.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPlan {
    pub selection: Selection,
    /// (agent, arm) pairs, agent-ascending.
    pub assignments: Vec<(usize, usize)>,
}

impl BanditPlan {
    /// Mean reward per selected arm over the agents that ran it.
    pub fn arm_rewards<F: Fn(usize) -> f64>(&self, reward_of: F) -> BTreeMap<usize, f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &(agent, arm) in &self.assignments {
            let e = sums.entry(arm).or_default();
            e.0 += reward_of(agent);
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(arm, (s, n))| (arm, (s / n as f64).clamp(0.0, 1.0)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pb2Settings {
    pub acquisition: AcquisitionConfig,
    pub fit: FitOptions,
    /// Most recent observations used per GP.
    pub window: usize,
    pub init: GpHyperparams,
    /// Overrides the default hyperparameter box.
    pub bounds: Option<HyperBounds>,
}

impl Default for Pb2Settings {
    fn default() -> Self {
        Pb2Settings {
            acquisition: AcquisitionConfig::default(),
            fit: FitOptions::default(),
            window: 200,
            init: GpHyperparams::default(),
            bounds: None,
        }
    }
}

impl Pb2Settings {
    fn bounds_for(&self, dims: usize) -> HyperBounds {
        self.bounds.unwrap_or_else(|| HyperBounds::for_dims(dims))
    }
}

pub fn explore_random<R: Rng + ?Sized>(
    space: &SearchSpace,
    agents: &[usize],
    rng: &mut R,
) -> ExploreDecision {
    ExploreDecision {
        entries: agents
            .iter()
            .map(|&agent| AgentConfig {
                agent,
                config: space.sample_config(rng),
            })
            .collect(),
    }
}

/// PBT perturbation of each replaced agent's parent config. A categorical
/// dimension is redrawn among its other choices with probability 0.25.
/// Each continuous value is redrawn uniformly with probability 0.25 and
/// otherwise scaled by 0.8 or 1.2 and clipped to its bounds.
pub fn explore_pbt<R: Rng + ?Sized>(
    replaced: &[(usize, Config)],
    space: &SearchSpace,
    rng: &mut R,
) -> ExploreDecision {
    let mut entries = Vec::with_capacity(replaced.len());
    for (agent, parent) in replaced {
        let h = Assignment(
            space
                .categorical
                .iter()
                .zip(&parent.h.0)
                .map(|(cat, &i)| {
                    if rng.gen::<f64>() < PBT_RESAMPLE_PROB {
                        let other = rng.gen_range(0..cat.choices.len() - 1);
                        if other >= i {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        i
                    }
                })
                .collect(),
        );
        let dims = space.continuous_for(&h);
        let x = if dims.len() != parent.x.len() || space.continuous_for(&parent.h) != dims {
            space.sample_x(&h, rng)
        } else {
            dims.iter()
                .zip(&parent.x)
                .map(|(p, &v)| perturb(p, v, rng))
                .collect()
        };
        entries.push(AgentConfig {
            agent: *agent,
            config: Config { x, h },
        });
    }
    ExploreDecision { entries }
}

fn perturb<R: Rng + ?Sized>(p: &ContinuousParam, v: f64, rng: &mut R) -> f64 {
    if rng.gen::<f64>() < PBT_RESAMPLE_PROB {
        p.lower + rng.gen::<f64>() * p.width()
    } else {
        let factor = PBT_FACTORS[rng.gen_range(0..PBT_FACTORS.len())];
        (v * factor).clamp(p.lower, p.upper)
    }
}

fn to_unit(bounds: &[ContinuousParam], x: &[f64]) -> Vec<f64> {
    bounds
        .iter()
        .zip(x)
        .map(|(p, v)| (v - p.lower) / p.width())
        .collect()
}

/// GP inputs and centred min-max targets from `data`.
fn training_set(
    data: &Dataset,
    bounds: &[ContinuousParam],
    with_categories: bool,
) -> (Vec<GpPoint>, Vec<f64>) {
    let points: Vec<GpPoint> = data
        .observations()
        .iter()
        .map(|o| GpPoint {
            x: to_unit(bounds, &o.config.x),
            h: if with_categories {
                o.config.h.0.clone()
            } else {
                Vec::new()
            },
            t: o.round as f64,
        })
        .collect();
    let mut targets: Vec<f64> = data
        .observations()
        .iter()
        .map(|o| data.normalize(o.reward))
        .collect();
    if !targets.is_empty() {
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        targets.iter_mut().for_each(|y| *y -= mean);
    }
    (points, targets)
}

/// Fits hyperparameters on `data` and returns the conditioned model.
pub fn fitted_model<R: Rng + ?Sized>(
    data: &Dataset,
    bounds: &[ContinuousParam],
    kind: KernelKind,
    settings: &Pb2Settings,
    rng: &mut R,
) -> Result<GpModel, GpError> {
    let (points, targets) = training_set(data, bounds, kind == KernelKind::Mixed);
    let hyper_bounds = settings.bounds_for(bounds.len());
    let seed = rng.gen::<u64>();
    let outcome = fit(
        kind,
        &points,
        &targets,
        settings.init,
        &hyper_bounds,
        &settings.fit,
        seed,
    );
    GpModel::new(kind, points, targets, outcome.theta)
}

/// Categories uniform at random; continuous values from a GP that never
/// sees the categories.
pub fn explore_pb2_rand<R: Rng + ?Sized>(
    data: &Dataset,
    replaced: &[usize],
    space: &SearchSpace,
    t: usize,
    settings: &Pb2Settings,
    rng: &mut R,
) -> Result<ExploreDecision, StrategyError> {
    if space.has_category_subspaces() {
        return Err(StrategyError::UnsupportedSpace(StrategyKind::Pb2Rand));
    }
    let hs: Vec<Assignment> = replaced
        .iter()
        .map(|_| space.sample_assignment(rng))
        .collect();
    let window = data.window(settings.window);
    let model = fitted_model(
        &window,
        &space.continuous,
        KernelKind::TimeContinuous,
        settings,
        rng,
    )?;
    let blind = vec![Assignment(Vec::new()); replaced.len()];
    let xs = select_batch_continuous(
        &model,
        &blind,
        &space.continuous,
        t,
        &settings.acquisition,
        rng,
    )?;
    Ok(ExploreDecision {
        entries: replaced
            .iter()
            .zip(hs)
            .zip(xs)
            .map(|((&agent, h), x)| AgentConfig {
                agent,
                config: Config { x, h },
            })
            .collect(),
    })
}

/// Draws arms from the bandit and hands them to `replaced` (sorted) in
/// ascending arm order, cycling when there are more agents than arms.
pub fn plan_categories<R: Rng + ?Sized>(
    bandit: &BanditState,
    replaced: &[usize],
    rng: &mut R,
) -> Result<BanditPlan, StrategyError> {
    let selection = bandit.select_batch(rng)?;
    let mut agents = replaced.to_vec();
    agents.sort_unstable();
    let assignments = agents
        .iter()
        .enumerate()
        .map(|(k, &agent)| (agent, selection.arms[k % selection.arms.len()]))
        .collect();
    Ok(BanditPlan {
        selection,
        assignments,
    })
}

/// Bandit-chosen categories; one time-varying GP per chosen category,
/// each trained only on that category's observations.
pub fn explore_pb2_mult<R: Rng + ?Sized>(
    data: &Dataset,
    bandit: &BanditState,
    replaced: &[usize],
    space: &SearchSpace,
    t: usize,
    settings: &Pb2Settings,
    rng: &mut R,
) -> Result<(ExploreDecision, BanditPlan), StrategyError> {
    let plan = plan_categories(bandit, replaced, rng)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(agent, arm) in &plan.assignments {
        groups.entry(arm).or_default().push(agent);
    }

    let mut entries = Vec::with_capacity(replaced.len());
    for (arm, agents) in groups {
        let h = space.arm_assignment(arm);
        let bounds = space.continuous_for(&h);
        let subset = data.filter_by_category(&h).window(settings.window);
        let xs = if subset.len() < 2 {
            agents.iter().map(|_| space.sample_x(&h, rng)).collect()
        } else {
            let model = fitted_model(&subset, bounds, KernelKind::TimeContinuous, settings, rng)?;
            let blind = vec![Assignment(Vec::new()); agents.len()];
            select_batch_continuous(&model, &blind, bounds, t, &settings.acquisition, rng)?
        };
        for (agent, x) in agents.into_iter().zip(xs) {
            entries.push(AgentConfig {
                agent,
                config: Config { x, h: h.clone() },
            });
        }
    }
    entries.sort_by_key(|e| e.agent);
    Ok((ExploreDecision { entries }, plan))
}

/// Bandit-chosen categories; one joint GP with the mixed kernel, queried
/// with each agent's category fixed and a shared hallucination chain.
pub fn explore_pb2_mix<R: Rng + ?Sized>(
    data: &Dataset,
    bandit: &BanditState,
    replaced: &[usize],
    space: &SearchSpace,
    t: usize,
    settings: &Pb2Settings,
    rng: &mut R,
) -> Result<(ExploreDecision, BanditPlan), StrategyError> {
    if space.has_category_subspaces() {
        return Err(StrategyError::UnsupportedSpace(StrategyKind::Pb2Mix));
    }
    let plan = plan_categories(bandit, replaced, rng)?;
    let hs: Vec<Assignment> = plan
        .assignments
        .iter()
        .map(|&(_, arm)| space.arm_assignment(arm))
        .collect();
    let window = data.window(settings.window);
    let model = fitted_model(&window, &space.continuous, KernelKind::Mixed, settings, rng)?;
    let xs = select_batch_continuous(
        &model,
        &hs,
        &space.continuous,
        t,
        &settings.acquisition,
        rng,
    )?;
    let entries = plan
        .assignments
        .iter()
        .zip(hs)
        .zip(xs)
        .map(|((&(agent, _), h), x)| AgentConfig {
            agent,
            config: Config { x, h },
        })
        .collect();
    Ok((ExploreDecision { entries }, plan))
}

/// Number of agents replaced per round: `⌈quantile·B⌉`.
pub fn replacement_count(population: usize, quantile: f64) -> usize {
    ((quantile * population as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Truncation selection: the bottom `⌈q·B⌉` agents by score are each paired
/// with a uniformly drawn agent from the top `⌈q·B⌉`. Equal scores rank the
/// lower agent index higher. Returns (loser, winner) pairs, loser-ascending.
pub fn exploit_truncation<R: Rng + ?Sized>(
    scores: &[f64],
    quantile: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, StrategyError> {
    let b = scores.len();
    if b < 2 {
        return Err(StrategyError::PopulationTooSmall(b));
    }
    if !(quantile > 0.0 && quantile <= 0.5) {
        return Err(StrategyError::InvalidQuantile(quantile));
    }
    let n = replacement_count(b, quantile);
    let mut ranked: Vec<usize> = (0..b).collect();
    ranked.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let top = &ranked[..n];
    let mut losers = ranked[b - n..].to_vec();
    losers.sort_unstable();
    Ok(losers
        .into_iter()
        .map(|loser| (loser, *top.choose(rng).expect("nonempty top set")))
        .collect())
}
