//! Population loop over synthetic objectives with regret accounting, plus a
//! standalone bandit simulator for piecewise-stationary Bernoulli arms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{BanditError, BanditState};
use crate::space::{
    validate_config, Assignment, Config, Dataset, Observation, SearchSpace, SpaceError,
};
use crate::strategies::{
    exploit_truncation, explore_pb2_mix, explore_pb2_mult, explore_pb2_rand, explore_pbt,
    explore_random, replacement_count, BanditPlan, ExploreDecision, Pb2Settings, StrategyError,
    StrategyKind,
};

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("population needs at least 2 agents, got {0}")]
    PopulationTooSmall(usize),
    #[error("need at least one round")]
    NoRounds,
    #[error("change points must satisfy 0 <= V < T, got V={changes}, T={rounds}")]
    InvalidChanges { changes: usize, rounds: usize },
    #[error("unknown objective `{0}`")]
    UnknownObjective(String),
    #[error("objective needs a categorical with labels sin/cos and one continuous parameter")]
    IncompatibleSpace,
    #[error("round {round}, agent {agent}: {what}")]
    Invariant {
        round: usize,
        agent: usize,
        what: String,
    },
}

/// sin/cos blackbox. With swaps, the mapping of labels to functions flips at
/// each swap round, so the optimal category alternates while f* stays 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub name: String,
    /// Rounds (1-based) from which the labels are swapped, ascending.
    pub swaps: Vec<usize>,
}

impl Objective {
    pub fn sincos() -> Self {
        Objective {
            name: "sincos".into(),
            swaps: Vec::new(),
        }
    }

    /// `changes` swaps evenly spaced over `rounds` rounds, at `k·T/(V+1)`.
    pub fn changepoint(changes: usize, rounds: usize) -> Result<Self, HarnessError> {
        if changes >= rounds {
            return Err(HarnessError::InvalidChanges { changes, rounds });
        }
        Ok(Objective {
            name: "sincos-switch".into(),
            swaps: (1..=changes).map(|k| k * rounds / (changes + 1)).collect(),
        })
    }

    pub fn by_name(name: &str, changes: usize, rounds: usize) -> Result<Self, HarnessError> {
        match name {
            "sincos" => Ok(Self::sincos()),
            "sincos-switch" => Self::changepoint(changes, rounds),
            other => Err(HarnessError::UnknownObjective(other.to_string())),
        }
    }

    pub fn swapped(&self, round: usize) -> bool {
        self.swaps.iter().filter(|&&s| s <= round).count() % 2 == 1
    }

    /// `f` for the labelled category at `round`; `is_sin` picks the base function.
    pub fn value(&self, is_sin: bool, x: f64, round: usize) -> f64 {
        let sin = is_sin != self.swapped(round);
        let f = if sin { x.sin() } else { x.cos() };
        f.clamp(0.0, 1.0)
    }

    pub fn optimum(&self, _round: usize) -> f64 {
        1.0
    }

    fn sin_index(space: &SearchSpace) -> Result<usize, HarnessError> {
        let cat = space
            .categorical
            .first()
            .ok_or(HarnessError::IncompatibleSpace)?;
        if space.continuous.len() != 1 || cat.choices.len() != 2 || space.has_category_subspaces() {
            return Err(HarnessError::IncompatibleSpace);
        }
        let sin = cat.choices.iter().position(|c| c == "sin");
        let cos = cat.choices.iter().position(|c| c == "cos");
        match (sin, cos) {
            (Some(s), Some(_)) => Ok(s),
            _ => Err(HarnessError::IncompatibleSpace),
        }
    }

    pub fn check(&self, space: &SearchSpace) -> Result<(), HarnessError> {
        Self::sin_index(space).map(|_| ())
    }

    pub fn eval(
        &self,
        space: &SearchSpace,
        config: &Config,
        round: usize,
    ) -> Result<f64, HarnessError> {
        let sin = Self::sin_index(space)?;
        Ok(self.value(config.h.0[0] == sin, config.x[0], round))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub population: usize,
    pub rounds: usize,
    pub quantile: f64,
    pub pb2: Pb2Settings,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            population: 4,
            rounds: 50,
            quantile: 0.25,
            pb2: Pb2Settings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub config: Config,
    pub total_score: f64,
    pub last_score: f64,
    pub lineage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub round: usize,
    pub agent: usize,
    pub h: Assignment,
    pub x: Vec<f64>,
    pub f: f64,
    pub regret: f64,
    /// Population regret summed over all rows up to and including this one.
    pub cum_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub rows: Vec<RunRow>,
    /// Cumulative population regret at the end of each round.
    pub cum_regret: Vec<f64>,
}

impl RunRecord {
    pub fn final_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }
}

/// Runs the evaluate / exploit / explore loop for `settings.rounds` rounds.
/// Random search redraws every agent each round and skips exploit.
pub fn run_experiment(
    space: &SearchSpace,
    objective: &Objective,
    strategy: StrategyKind,
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<RunRecord, HarnessError> {
    let b = settings.population;
    if b < 2 {
        return Err(HarnessError::PopulationTooSmall(b));
    }
    if settings.rounds == 0 {
        return Err(HarnessError::NoRounds);
    }
    space.check()?;
    objective.check(space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let all: Vec<usize> = (0..b).collect();
    let mut agents: Vec<Agent> = explore_random(space, &all, &mut rng)
        .entries
        .into_iter()
        .map(|e| Agent {
            config: e.config,
            total_score: 0.0,
            last_score: 0.0,
            lineage: e.agent,
        })
        .collect();

    let mut bandit = if strategy.uses_bandit() {
        let plays = replacement_count(b, settings.quantile).min(space.n_arms());
        Some(BanditState::new(space.n_arms(), plays, settings.rounds)?)
    } else {
        None
    };
    let mut pending: Option<BanditPlan> = None;

    let mut data = Dataset::new();
    let mut rows = Vec::with_capacity(b * settings.rounds);
    let mut cum_series = Vec::with_capacity(settings.rounds);
    let mut cum = 0.0;

    for round in 1..=settings.rounds {
        let scores: Vec<f64> = agents
            .iter()
            .map(|a| objective.eval(space, &a.config, round))
            .collect::<Result<_, _>>()?;

        for (i, (agent, &f)) in agents.iter_mut().zip(&scores).enumerate() {
            if !f.is_finite() {
                return Err(HarnessError::Invariant {
                    round,
                    agent: i,
                    what: format!("non-finite score {f}"),
                });
            }
            agent.total_score += f;
            agent.last_score = f;
            data.push(Observation {
                round,
                agent: i,
                config: agent.config.clone(),
                raw_score: agent.total_score,
                reward: f,
            })?;
            let regret = objective.optimum(round) - f;
            cum += regret;
            rows.push(RunRow {
                round,
                agent: i,
                h: agent.config.h.clone(),
                x: agent.config.x.clone(),
                f,
                regret,
                cum_regret: cum,
            });
        }
        cum_series.push(cum);

        if let (Some(plan), Some(state)) = (pending.take(), bandit.as_mut()) {
            let rewards = plan.arm_rewards(|agent| data.normalize(scores[agent]));
            state.update(&plan.selection, &rewards)?;
        }

        let decision = if strategy == StrategyKind::Random {
            explore_random(space, &all, &mut rng)
        } else {
            let pairs = exploit_truncation(&scores, settings.quantile, &mut rng)?;
            for &(loser, winner) in &pairs {
                agents[loser].config = agents[winner].config.clone();
                agents[loser].lineage = agents[winner].lineage;
                agents[loser].total_score = agents[winner].total_score;
            }
            let losers: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let next = round + 1;
            match strategy {
                StrategyKind::Random => unreachable!(),
                StrategyKind::Pbt => {
                    let parents: Vec<(usize, Config)> = losers
                        .iter()
                        .map(|&l| (l, agents[l].config.clone()))
                        .collect();
                    explore_pbt(&parents, space, &mut rng)
                }
                StrategyKind::Pb2Rand => {
                    explore_pb2_rand(&data, &losers, space, next, &settings.pb2, &mut rng)?
                }
                StrategyKind::Pb2Mult | StrategyKind::Pb2Mix => {
                    let state = bandit.as_ref().expect("bandit strategies own a bandit");
                    let (decision, plan) = if strategy == StrategyKind::Pb2Mult {
                        explore_pb2_mult(
                            &data,
                            state,
                            &losers,
                            space,
                            next,
                            &settings.pb2,
                            &mut rng,
                        )?
                    } else {
                        explore_pb2_mix(
                            &data,
                            state,
                            &losers,
                            space,
                            next,
                            &settings.pb2,
                            &mut rng,
                        )?
                    };
                    pending = Some(plan);
                    decision
                }
            }
        };
        apply(&mut agents, decision, space, round)?;
    }

    Ok(RunRecord {
        strategy,
        seed,
        rows,
        cum_regret: cum_series,
    })
}

fn apply(
    agents: &mut [Agent],
    decision: ExploreDecision,
    space: &SearchSpace,
    round: usize,
) -> Result<(), HarnessError> {
    for e in decision.entries {
        if !validate_config(space, &e.config) {
            return Err(HarnessError::Invariant {
                round,
                agent: e.agent,
                what: format!("explore produced an invalid config {:?}", e.config),
            });
        }
        agents[e.agent].config = e.config;
    }
    Ok(())
}

/// Piecewise-stationary Bernoulli instance: one arm pays `high`, the rest
/// `low`; the paying arm advances by one at each of `changes` evenly spaced
/// change points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSimConfig {
    pub arms: usize,
    pub plays: usize,
    pub horizon: usize,
    pub changes: usize,
    pub seeds: Vec<u64>,
    pub high: f64,
    pub low: f64,
}

impl BanditSimConfig {
    pub fn new(arms: usize, plays: usize, horizon: usize, changes: usize, seeds: usize) -> Self {
        BanditSimConfig {
            arms,
            plays,
            horizon,
            changes,
            seeds: (0..seeds as u64).collect(),
            high: 0.9,
            low: 0.1,
        }
    }

    /// First round (0-based) of each segment after the first.
    pub fn change_rounds(&self) -> Vec<usize> {
        (1..=self.changes)
            .map(|k| k * self.horizon / (self.changes + 1))
            .collect()
    }

    pub fn best_arm(&self, round: usize) -> usize {
        self.change_rounds().iter().filter(|&&c| c <= round).count() % self.arms
    }

    pub fn means(&self, round: usize) -> Vec<f64> {
        let best = self.best_arm(round);
        (0..self.arms)
            .map(|a| if a == best { self.high } else { self.low })
            .collect()
    }

    fn top_sum(&self, means: &[f64]) -> f64 {
        let mut sorted = means.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[..self.plays].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSimReport {
    pub config: BanditSimConfig,
    /// Expected regret per round against the best `plays` arms, seed-averaged.
    pub regret: Vec<f64>,
    /// Same for uniformly random `plays`-subsets (analytic).
    pub uniform_regret: Vec<f64>,
    /// Fraction of seeds whose selection included the current best arm.
    pub best_inclusion: Vec<f64>,
}

impl BanditSimReport {
    /// Mean per-round regret over the 0-based rounds `lo..hi`.
    pub fn mean_regret(&self, lo: usize, hi: usize) -> f64 {
        let s = &self.regret[lo..hi];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn early_regret(&self) -> f64 {
        self.mean_regret(0, (self.regret.len() / 4).max(1))
    }

    pub fn late_regret(&self) -> f64 {
        self.mean_regret(self.regret.len() / 2, self.regret.len())
    }

    /// Late-half regret at least 25% below first-quarter regret.
    pub fn sublinear_proxy(&self) -> bool {
        self.late_regret() <= 0.75 * self.early_regret()
    }

    /// Inclusion frequency of the current best arm over the final quarter.
    pub fn final_quarter_tracking(&self) -> f64 {
        let n = self.best_inclusion.len();
        let s = &self.best_inclusion[n - n / 4..];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn cumulative_regret(&self) -> Vec<f64> {
        self.regret
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }
}

/// Runs the bandit alone on the instance for each seed.
pub fn bandit_sim(config: &BanditSimConfig) -> Result<BanditSimReport, BanditError> {
    let t = config.horizon;
    let mut regret = vec![0.0; t];
    let mut inclusion = vec![0.0; t];
    for &seed in &config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = BanditState::new(config.arms, config.plays, t)?;
        for round in 0..t {
            let means = config.means(round);
            let sel = state.select_batch(&mut rng)?;
            let got: f64 = sel.arms.iter().map(|&a| means[a]).sum();
            regret[round] += config.top_sum(&means) - got;
            if sel.arms.contains(&config.best_arm(round)) {
                inclusion[round] += 1.0;
            }
            let rewards: BTreeMap<usize, f64> = sel
                .arms
                .iter()
                .map(|&a| {
                    (
                        a,
                        if rng.gen::<f64>() < means[a] {
                            1.0
                        } else {
                            0.0
                        },
                    )
                })
                .collect();
            state.update(&sel, &rewards)?;
        }
    }
    let n = config.seeds.len().max(1) as f64;
    regret.iter_mut().for_each(|r| *r /= n);
    inclusion.iter_mut().for_each(|r| *r /= n);
    let uniform_regret = (0..t)
        .map(|round| {
            let means = config.means(round);
            let avg = means.iter().sum::<f64>() / config.arms as f64;
            config.top_sum(&means) - config.plays as f64 * avg
        })
        .collect();
    Ok(BanditSimReport {
        config: config.clone(),
        regret,
        uniform_regret,
        best_inclusion: inclusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::AcquisitionConfig;
    use crate::gp::FitOptions;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cfg(x: f64, h: usize) -> Config {
        Config {
            x: vec![x],
            h: Assignment(vec![h]),
        }
    }

    fn quick(rounds: usize) -> ExperimentSettings {
        ExperimentSettings {
            population: 4,
            rounds,
            quantile: 0.25,
            pb2: Pb2Settings {
                fit: FitOptions {
                    restarts: 1,
                    max_iters: 20,
                    ..FitOptions::default()
                },
                acquisition: AcquisitionConfig {
                    n_candidates: 100,
                    n_refine_steps: 10,
                    ..AcquisitionConfig::default()
                },
                ..Pb2Settings::default()
            },
        }
    }

    #[test]
    fn sincos_examples() {
        let s = SearchSpace::sincos();
        let o = Objective::sincos();
        assert!((o.eval(&s, &cfg(FRAC_PI_2, 0), 1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(o.eval(&s, &cfg(0.0, 1), 1).unwrap(), 1.0);
        assert_eq!(o.eval(&s, &cfg(0.0, 0), 1).unwrap(), 0.0);
        assert_eq!(o.optimum(7), 1.0);
    }

    #[test]
    fn changepoint_examples() {
        let s = SearchSpace::sincos();
        let none = Objective::changepoint(0, 10).unwrap();
        for r in 1..=10 {
            assert_eq!(none.eval(&s, &cfg(0.3, 0), r).unwrap(), 0.3f64.sin());
        }
        let one = Objective::changepoint(1, 100).unwrap();
        assert_eq!(one.swaps, vec![50]);
        let best = cfg(FRAC_PI_2, 0);
        assert!(1.0 - one.eval(&s, &best, 49).unwrap() < 1e-15);
        assert!((1.0 - one.eval(&s, &best, 50).unwrap() - (1.0 - FRAC_PI_2.cos())).abs() < 1e-15);
        assert_eq!(one.eval(&s, &cfg(FRAC_PI_2, 1), 50).unwrap(), 1.0);
        assert!(Objective::changepoint(5, 5).is_err());
        assert!(Objective::by_name("rosenbrock", 0, 5).is_err());
    }

    #[test]
    fn incompatible_space_is_rejected() {
        let space = SearchSpace::new(
            vec![crate::space::ContinuousParam::new("x", 0.0, 1.0)],
            vec![crate::space::CategoricalParam::new("h", ["a", "b"])],
        )
        .unwrap();
        assert_eq!(
            run_experiment(
                &space,
                &Objective::sincos(),
                StrategyKind::Pbt,
                &quick(2),
                0
            ),
            Err(HarnessError::IncompatibleSpace)
        );
    }

    #[test]
    fn single_round_two_agents() {
        let mut s = quick(1);
        s.population = 2;
        for k in StrategyKind::ALL {
            let r = run_experiment(&SearchSpace::sincos(), &Objective::sincos(), k, &s, 3).unwrap();
            assert_eq!(r.rows.len(), 2);
            assert_eq!(r.cum_regret.len(), 1);
        }
        s.population = 1;
        assert!(run_experiment(
            &SearchSpace::sincos(),
            &Objective::sincos(),
            StrategyKind::Pbt,
            &s,
            3
        )
        .is_err());
    }

    #[test]
    fn records_are_deterministic_and_well_formed() {
        let space = SearchSpace::sincos();
        let o = Objective::changepoint(1, 12).unwrap();
        for k in StrategyKind::ALL {
            let a = run_experiment(&space, &o, k, &quick(12), 11).unwrap();
            let b = run_experiment(&space, &o, k, &quick(12), 11).unwrap();
            assert_eq!(a, b, "{k}");
            assert_eq!(a.rows.len(), 48);
            let mut prev = 0.0;
            for (i, row) in a.rows.iter().enumerate() {
                assert_eq!(row.round, i / 4 + 1);
                assert_eq!(row.agent, i % 4);
                assert!((0.0..=1.0).contains(&row.f));
                assert!((row.regret - (1.0 - row.f)).abs() < 1e-15);
                assert!(row.cum_regret >= prev);
                prev = row.cum_regret;
                assert!(validate_config(
                    &space,
                    &Config {
                        x: row.x.clone(),
                        h: row.h.clone()
                    }
                ));
            }
            let c = run_experiment(&space, &o, k, &quick(12), 12).unwrap();
            assert_ne!(a.rows, c.rows);
        }
    }

    #[test]
    fn random_search_regret_is_linear() {
        let space = SearchSpace::sincos();
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..20 {
            let r = run_experiment(
                &space,
                &Objective::sincos(),
                StrategyKind::Random,
                &quick(200),
                seed,
            )
            .unwrap();
            total += r.rows.iter().map(|row| row.regret).sum::<f64>();
            n += r.rows.len();
        }
        let oracle = 1.0 - 2.0 / PI;
        assert!((total / n as f64 - oracle).abs() < 0.02);
    }

    #[test]
    fn pbt_beats_random_on_average() {
        let space = SearchSpace::sincos();
        let o = Objective::sincos();
        let mean = |k| {
            (0..10)
                .map(|seed| {
                    run_experiment(&space, &o, k, &quick(30), seed)
                        .unwrap()
                        .final_regret()
                })
                .sum::<f64>()
                / 10.0
        };
        assert!(mean(StrategyKind::Pbt) < mean(StrategyKind::Random));
    }

    #[test]
    fn bandit_sim_stationary() {
        let c = BanditSimConfig::new(2, 1, 500, 0, 50);
        let r = bandit_sim(&c).unwrap();
        assert!(
            r.sublinear_proxy(),
            "{} vs {}",
            r.late_regret(),
            r.early_regret()
        );
        assert!(r.uniform_regret.iter().all(|&u| (u - 0.4).abs() < 1e-12));
        let cum = r.cumulative_regret();
        assert!(cum.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(bandit_sim(&c).unwrap(), r);
    }

    #[test]
    fn bandit_sim_instance_layout() {
        let c = BanditSimConfig::new(3, 2, 90, 2, 1);
        assert_eq!(c.change_rounds(), vec![30, 60]);
        assert_eq!(c.best_arm(29), 0);
        assert_eq!(c.best_arm(30), 1);
        assert_eq!(c.best_arm(89), 2);
        assert!((c.top_sum(&c.means(0)) - 1.0).abs() < 1e-12);
        let r = bandit_sim(&c).unwrap();
        // Uniform pick of 2 of 3: 1.0 − 2·(1.1/3).
        assert!((r.uniform_regret[0] - (1.0 - 2.2 / 3.0)).abs() < 1e-12);
        assert!(bandit_sim(&BanditSimConfig::new(2, 3, 10, 0, 1)).is_err());
    }
}
