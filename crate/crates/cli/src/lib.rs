//! Experiment driver: JSON configs in, CSV results out.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use popbandit::acquisition::AcquisitionConfig;
use popbandit::gp::{FitOptions, GpError, GpHyperparams, HyperBounds, N_PARAMS, PARAM_NAMES};
use popbandit::gradcheck::{run_gradcheck, GradInstance, GradcheckReport};
use popbandit::harness::{
    bandit_sim, run_experiment, BanditSimConfig, BanditSimReport, ExperimentSettings, Objective,
    RunRecord,
};
use popbandit::space::SearchSpace;
use popbandit::strategies::{Pb2Settings, StrategyKind};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

pub const THREADS_ENV: &str = "POPBANDIT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn default_population() -> usize {
    4
}

fn default_rounds() -> usize {
    50
}

fn default_quantile() -> f64 {
    0.25
}

fn default_objective() -> String {
    "sincos".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_window() -> usize {
    200
}

/// GP settings; `bounds` overrides individual hyperparameter ranges by name.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    #[serde(default)]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub grad_tol: Option<f64>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub init: Option<GpHyperparams>,
    #[serde(default)]
    pub bounds: BTreeMap<String, [f64; 2]>,
}

impl Default for GpSection {
    fn default() -> Self {
        GpSection {
            restarts: None,
            max_iters: None,
            grad_tol: None,
            window: default_window(),
            init: None,
            bounds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "SearchSpace::sincos")]
    pub space: SearchSpace,
    #[serde(default = "default_objective")]
    pub objective: String,
    /// Number of change points for `sincos-switch`.
    #[serde(default)]
    pub switches: usize,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub strategies: Option<Vec<String>>,
    #[serde(rename = "B", default = "default_population")]
    pub population: usize,
    #[serde(rename = "T_rounds", default = "default_rounds")]
    pub rounds: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub gp: GpSection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strategy: Option<String>,
}

/// A validated config ready to execute.
#[derive(Debug, Clone)]
pub struct Plan {
    pub space: SearchSpace,
    pub objective: Objective,
    pub strategies: Vec<StrategyKind>,
    pub settings: ExperimentSettings,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.output = out.clone();
        }
        if let Some(s) = &o.strategy {
            self.strategy = Some(s.clone());
            self.strategies = None;
        }
    }

    fn hyper_bounds(&self) -> Result<Option<HyperBounds>, CliError> {
        if self.gp.bounds.is_empty() {
            return Ok(None);
        }
        let mut b = HyperBounds::for_dims(self.space.max_continuous_dims());
        for (name, [lo, hi]) in &self.gp.bounds {
            let i = PARAM_NAMES.iter().position(|p| p == name).ok_or_else(|| {
                CliError::Config(format!("gp.bounds: unknown hyperparameter `{name}`"))
            })?;
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(CliError::Config(format!(
                    "gp.bounds.{name}: need finite lo <= hi"
                )));
            }
            b.lower[i] = *lo;
            b.upper[i] = *hi;
        }
        Ok(Some(b))
    }

    fn resolve(self, strategies: Vec<StrategyKind>) -> Result<Plan, CliError> {
        self.space
            .check()
            .map_err(|e| CliError::Config(format!("space: {e}")))?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: need at least one seed".into()));
        }
        if self.population < 2 {
            return Err(CliError::Config(format!(
                "B: need at least 2 agents, got {}",
                self.population
            )));
        }
        if self.rounds == 0 {
            return Err(CliError::Config("T_rounds: need at least one round".into()));
        }
        if !(self.quantile > 0.0 && self.quantile <= 0.5) {
            return Err(CliError::Config(format!(
                "quantile: must be in (0, 0.5], got {}",
                self.quantile
            )));
        }
        let objective = Objective::by_name(&self.objective, self.switches, self.rounds)
            .map_err(|e| CliError::Config(format!("objective: {e}")))?;
        objective
            .check(&self.space)
            .map_err(|e| CliError::Config(format!("space: {e}")))?;
        for k in &strategies {
            if matches!(k, StrategyKind::Pb2Rand | StrategyKind::Pb2Mix)
                && self.space.has_category_subspaces()
            {
                return Err(CliError::Config(format!(
                    "strategy: {k} needs one continuous space shared by all categories"
                )));
            }
        }
        let defaults = FitOptions::default();
        let bounds = self.hyper_bounds()?;
        let pb2 = Pb2Settings {
            acquisition: self.acquisition,
            fit: FitOptions {
                restarts: self.gp.restarts.unwrap_or(defaults.restarts),
                max_iters: self.gp.max_iters.unwrap_or(defaults.max_iters),
                grad_tol: self.gp.grad_tol.unwrap_or(defaults.grad_tol),
            },
            window: self.gp.window,
            init: self.gp.init.unwrap_or_default(),
            bounds,
        };
        Ok(Plan {
            space: self.space,
            objective,
            strategies,
            settings: ExperimentSettings {
                population: self.population,
                rounds: self.rounds,
                quantile: self.quantile,
                pb2,
            },
            seeds: self.seeds,
            output: self.output,
        })
    }

    /// Plan for `run`: exactly one strategy.
    pub fn plan_single(mut self, o: &Overrides) -> Result<Plan, CliError> {
        self.apply(o);
        let name = self
            .strategy
            .clone()
            .ok_or_else(|| CliError::Config("missing field `strategy`".into()))?;
        let kind = parse_strategy(&name)?;
        self.resolve(vec![kind])
    }

    /// Plan for `compare`: the `strategies` list, or the single `strategy`.
    pub fn plan_many(mut self, o: &Overrides) -> Result<Plan, CliError> {
        self.apply(o);
        let names = match (&self.strategies, &self.strategy) {
            (Some(list), _) if !list.is_empty() => list.clone(),
            (_, Some(one)) => vec![one.clone()],
            _ => return Err(CliError::Config("missing field `strategies`".into())),
        };
        let mut kinds = Vec::with_capacity(names.len());
        for n in &names {
            let k = parse_strategy(n)?;
            if kinds.contains(&k) {
                return Err(CliError::Config(format!("strategies: `{n}` listed twice")));
            }
            kinds.push(k);
        }
        self.resolve(kinds)
    }
}

fn parse_strategy(name: &str) -> Result<StrategyKind, CliError> {
    name.parse()
        .map_err(|_| CliError::Config(format!("strategy: unknown strategy `{name}`")))
}

/// `%.10g`-style formatting: 10 significant digits, trailing zeros trimmed.
pub fn fmt_g(x: f64) -> String {
    const DIGITS: i32 = 10;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..DIGITS).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Builds a pool sized by `POPBANDIT_THREADS` (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Runs every (strategy, seed) pair of the plan, in parallel across seeds.
pub fn execute(plan: &Plan) -> Result<Vec<Vec<RunRecord>>, CliError> {
    let pool = thread_pool()?;
    let jobs: Vec<(StrategyKind, u64)> = plan
        .strategies
        .iter()
        .flat_map(|&k| plan.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, seed)| {
                run_experiment(&plan.space, &plan.objective, k, &plan.settings, seed)
                    .map_err(|e| CliError::Runtime(format!("{k}, seed {seed}: {e}")))
            })
            .collect::<Result<_, _>>()
    })?;
    let mut it = results.into_iter();
    Ok(plan
        .strategies
        .iter()
        .map(|_| it.by_ref().take(plan.seeds.len()).collect())
        .collect())
}

/// Per-seed rows for one run.
pub fn run_csv(plan: &Plan, record: &RunRecord) -> Result<Vec<u8>, CliError> {
    let dims = plan.space.max_continuous_dims();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["round", "agent", "strategy", "seed", "h"]
        .map(String::from)
        .to_vec();
    header.extend((0..dims).map(|i| format!("x_{i}")));
    header.extend(["f", "regret", "cum_regret"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for row in &record.rows {
        let mut fields = vec![
            row.round.to_string(),
            row.agent.to_string(),
            record.strategy.to_string(),
            record.seed.to_string(),
            plan.space.labels(&row.h).join("|"),
        ];
        fields.extend((0..dims).map(|i| row.x.get(i).map(|&v| fmt_g(v)).unwrap_or_default()));
        fields.extend([fmt_g(row.f), fmt_g(row.regret), fmt_g(row.cum_regret)]);
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

/// Mean and standard error of the cumulative regret at each round.
pub fn mean_sem(records: &[RunRecord]) -> Vec<(f64, f64)> {
    let rounds = records.first().map_or(0, |r| r.cum_regret.len());
    (0..rounds)
        .map(|t| {
            let vals: Vec<f64> = records.iter().map(|r| r.cum_regret[t]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sem = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            (mean, sem)
        })
        .collect()
}

pub fn summary_csv(records: &[RunRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "mean", "sem"]).map_err(csv_err)?;
    for (t, (mean, sem)) in mean_sem(records).into_iter().enumerate() {
        w.write_record([(t + 1).to_string(), fmt_g(mean), fmt_g(sem)])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Wide table: round plus the mean cumulative regret of each strategy.
pub fn compare_csv(
    strategies: &[StrategyKind],
    results: &[Vec<RunRecord>],
) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["round".to_string()];
    header.extend(strategies.iter().map(|k| k.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let series: Vec<Vec<(f64, f64)>> = results.iter().map(|r| mean_sem(r)).collect();
    let rounds = series.first().map_or(0, Vec::len);
    for t in 0..rounds {
        let mut fields = vec![(t + 1).to_string()];
        fields.extend(series.iter().map(|s| fmt_g(s[t].0)));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Writes every file to a temporary name first and renames only once all
/// writes succeeded, so a failure leaves no partial outputs behind.
pub fn write_all(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut staged = Vec::with_capacity(files.len());
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (name, bytes) in files {
        let final_path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        let result = fs::File::create(&tmp).and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        });
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            cleanup(&staged);
            return Err(CliError::io(&tmp, e));
        }
        staged.push((tmp, final_path));
    }
    for (tmp, dst) in &staged {
        fs::rename(tmp, dst).map_err(|e| CliError::io(dst, e))?;
    }
    Ok(staged.into_iter().map(|(_, dst)| dst).collect())
}

pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub records: Vec<RunRecord>,
}

/// Runs one strategy over every seed; writes one CSV per seed plus a summary.
pub fn cmd_run(config: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let plan = RunConfig::load(config)?.plan_single(overrides)?;
    let records = execute(&plan)?.remove(0);
    let kind = plan.strategies[0];
    let mut files = Vec::with_capacity(records.len() + 1);
    for r in &records {
        files.push((format!("{kind}_seed{}.csv", r.seed), run_csv(&plan, r)?));
    }
    files.push((format!("{kind}_summary.csv"), summary_csv(&records)?));
    let files = write_all(&plan.output, &files)?;
    Ok(RunOutcome { files, records })
}

pub struct CompareOutcome {
    pub file: PathBuf,
    /// (strategy, mean final cumulative regret), best first.
    pub ordering: Vec<(StrategyKind, f64)>,
}

/// Runs each listed strategy on the same seeds and writes a wide summary.
pub fn cmd_compare(config: &Path, overrides: &Overrides) -> Result<CompareOutcome, CliError> {
    let plan = RunConfig::load(config)?.plan_many(overrides)?;
    let results = execute(&plan)?;
    let bytes = compare_csv(&plan.strategies, &results)?;
    let file = write_all(&plan.output, &[("compare.csv".into(), bytes)])?.remove(0);
    let mut ordering: Vec<(StrategyKind, f64)> = plan
        .strategies
        .iter()
        .zip(&results)
        .map(|(&k, recs)| {
            (
                k,
                recs.iter().map(RunRecord::final_regret).sum::<f64>() / recs.len() as f64,
            )
        })
        .collect();
    ordering.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(CompareOutcome { file, ordering })
}

pub fn format_ordering(ordering: &[(StrategyKind, f64)]) -> String {
    ordering
        .iter()
        .map(|(k, v)| format!("{k}={}", fmt_g(*v)))
        .collect::<Vec<_>>()
        .join(" < ")
}

pub const GRADCHECK_INSTANCES: usize = 100;

/// Gradient audit with an injectable gradient; prints per-parameter lines
/// and, on failure, the offending instance as JSON. Returns the exit code.
pub fn gradcheck_with<F, W>(seed: u64, gradient: F, out: &mut W) -> Result<i32, CliError>
where
    F: Fn(&GradInstance) -> Result<[f64; N_PARAMS], GpError>,
    W: Write,
{
    let report: GradcheckReport = run_gradcheck(seed, GRADCHECK_INSTANCES, gradient)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let io_err = |e| CliError::io(Path::new("<stdout>"), e);
    for line in report.lines() {
        writeln!(out, "{line}").map_err(io_err)?;
    }
    if report.passed() {
        writeln!(out, "gradcheck: pass ({} instances)", report.instances).map_err(io_err)?;
        Ok(0)
    } else {
        writeln!(out, "gradcheck: FAIL").map_err(io_err)?;
        if let Some(f) = &report.failure {
            let json =
                serde_json::to_string_pretty(f).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(out, "{json}").map_err(io_err)?;
        }
        Ok(1)
    }
}

pub fn cmd_gradcheck<W: Write>(seed: u64, out: &mut W) -> Result<i32, CliError> {
    gradcheck_with(seed, GradInstance::analytic, out)
}

#[derive(Debug, Clone)]
pub struct BanditSimArgs {
    pub arms: usize,
    pub plays: usize,
    pub horizon: usize,
    pub changes: usize,
    pub seeds: usize,
    pub out: Option<PathBuf>,
}

pub fn banditsim_csv(report: &BanditSimReport) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "round",
        "regret",
        "cum_regret",
        "uniform_regret",
        "best_inclusion",
    ])
    .map_err(csv_err)?;
    let cum = report.cumulative_regret();
    for t in 0..report.regret.len() {
        w.write_record([
            (t + 1).to_string(),
            fmt_g(report.regret[t]),
            fmt_g(cum[t]),
            fmt_g(report.uniform_regret[t]),
            fmt_g(report.best_inclusion[t]),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Standalone bandit simulation; prints the verdict lines and returns them.
pub fn cmd_banditsim(args: &BanditSimArgs) -> Result<(BanditSimReport, Vec<String>), CliError> {
    if args.seeds == 0 {
        return Err(CliError::Config("seeds: need at least one seed".into()));
    }
    if args.changes >= args.horizon.max(1) {
        return Err(CliError::Config(format!(
            "changes: need 0 <= V < T, got V={}, T={}",
            args.changes, args.horizon
        )));
    }
    let config = BanditSimConfig::new(
        args.arms,
        args.plays,
        args.horizon,
        args.changes,
        args.seeds,
    );
    let report = bandit_sim(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let mut lines = vec![format!(
        "sublinear-proxy: {} (early={}, late={}, uniform={})",
        if report.sublinear_proxy() {
            "pass"
        } else {
            "fail"
        },
        fmt_g(report.early_regret()),
        fmt_g(report.late_regret()),
        fmt_g(report.uniform_regret.iter().sum::<f64>() / report.uniform_regret.len() as f64),
    )];
    if args.changes > 0 {
        lines.push(format!(
            "tracking: final-quarter best-arm inclusion = {}",
            fmt_g(report.final_quarter_tracking())
        ));
    }
    if let Some(path) = &args.out {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| {
                CliError::Config(format!("out: `{}` is not a file path", path.display()))
            })?
            .to_string_lossy()
            .into_owned();
        write_all(dir, &[(name, banditsim_csv(&report)?)])?;
    }
    Ok((report, lines))
}
