//! End-to-end runs: configuration, execution, metrics and reporting.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{BatchStats, Master, Timing};
use crate::fitness::{Evaluation, FitnessId};
use crate::ga::{self, GaConfig, GenerationStats, RunOutcome, DEFAULT_ELITISM};
use crate::moo::{builtin_problem, ObjectiveVector, Problem, WeightVector};
use crate::persistence::{
    read_jsonl, JsonlStore, MemoryStore, ResultRecord, Storage, StorageError, DECISIONS_FILE,
    RESULTS_FILE,
};
use crate::reasoning::{self, FixedRules, LogEntry, ReplayMismatch, RevisionMark, RuleBook};
use crate::sim::{Fault, SimConfig, SimulatedCluster, DEFAULT_EVENT_CAP, DEFAULT_LATENCY_MS, DEFAULT_PER_EVAL_COST_MS};
use crate::tcp::TcpCluster;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_FILE: &str = "run.json";
pub const LEARNER_FILE: &str = "learner.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    #[default]
    Sim,
    Tcp,
}

impl std::str::FromStr for Transport {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Transport::Sim),
            "tcp" => Ok(Transport::Tcp),
            _ => Err(ConfigError::Invalid(format!("unknown transport `{s}`, expected sim or tcp"))),
        }
    }
}

/// Everything a `run` needs. JSON keys match the command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub pop: usize,
    pub gens: u32,
    pub workers: u32,
    pub seed: u64,
    pub sim_seed: u64,
    pub mutation_rate: f64,
    pub mutation_sigma: Option<f64>,
    pub selection_fraction: f64,
    pub elitism: usize,
    /// `None` means uniform weights.
    pub weights: Option<Vec<f64>>,
    pub per_eval_cost_ms: u64,
    pub latency_ms: (u64, u64),
    pub fault: Vec<Fault>,
    pub slices: Option<usize>,
    pub job_timeout_ms: Option<u64>,
    pub event_cap: u64,
    /// `None` uses the built-in rule table.
    pub rules: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub transport: Transport,
    pub buffered: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "sphere-5".into(),
            pop: ga::DEFAULT_POPULATION,
            gens: ga::DEFAULT_GENERATIONS,
            workers: 4,
            seed: 0,
            sim_seed: 0,
            mutation_rate: ga::DEFAULT_MUTATION_RATE,
            mutation_sigma: None,
            selection_fraction: ga::DEFAULT_SELECTION_FRACTION,
            elitism: DEFAULT_ELITISM,
            weights: None,
            per_eval_cost_ms: DEFAULT_PER_EVAL_COST_MS,
            latency_ms: DEFAULT_LATENCY_MS,
            fault: Vec::new(),
            slices: None,
            job_timeout_ms: None,
            event_cap: DEFAULT_EVENT_CAP,
            rules: None,
            out: None,
            transport: Transport::Sim,
            buffered: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn problem(&self) -> crate::Result<Problem> {
        Ok(builtin_problem(&self.problem)?)
    }

    pub fn ga_config(&self, problem: &Problem) -> crate::Result<GaConfig> {
        let weights = match &self.weights {
            Some(w) => WeightVector::new(w.clone())?,
            None => WeightVector::uniform(problem.n_objectives()),
        };
        let config = GaConfig {
            population_size: self.pop,
            generations: self.gens,
            selection_fraction: self.selection_fraction,
            mutation_rate: self.mutation_rate,
            mutation_sigma: self.mutation_sigma,
            elitism_count: self.elitism,
            seed: self.seed,
            weights,
        };
        config.validate(problem)?;
        Ok(config)
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let sim = SimConfig {
            workers: self.workers,
            per_eval_cost_ms: self.per_eval_cost_ms,
            latency_ms: self.latency_ms,
            faults: self.fault.clone(),
            sim_seed: self.sim_seed,
            slices_per_batch: self.slices,
            job_timeout_ms: self.job_timeout_ms,
            event_cap: self.event_cap,
        };
        sim.validate()?;
        Ok(sim)
    }

    pub fn load_rules(&self) -> crate::Result<FixedRules> {
        match &self.rules {
            Some(path) => Ok(FixedRules::load(path)?),
            None => Ok(FixedRules::defaults()),
        }
    }
}

/// One row of `metrics.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub generation: u32,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub jobs_dispatched: u64,
    pub jobs_reassigned: u64,
    pub resumes: u64,
    pub suspends: u64,
    pub makespan_ms: u64,
}

impl MetricsRow {
    fn new(stats: &GenerationStats, batch: &BatchStats) -> Self {
        Self {
            generation: stats.generation,
            best_fitness: stats.best_fitness,
            mean_fitness: stats.mean_fitness,
            jobs_dispatched: batch.jobs_dispatched,
            jobs_reassigned: batch.jobs_reassigned,
            resumes: batch.resumes,
            suspends: batch.suspends,
            makespan_ms: batch.makespan_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub fitness_id: FitnessId,
    pub total_sim_time_ms: u64,
    pub speedup_vs_one_worker: f64,
    pub decisions_logged: u64,
    pub records: u64,
    pub best_generation: u32,
    pub best_job_id: String,
    pub best_fitness: f64,
    pub best_feasible: bool,
    pub best_genome: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

impl RunMetrics {
    pub fn total_suspends(&self) -> u64 {
        self.rows.iter().map(|r| r.suspends).sum()
    }

    pub fn total_resumes(&self) -> u64 {
        self.rows.iter().map(|r| r.resumes).sum()
    }

    pub fn total_reassigned(&self) -> u64 {
        self.rows.iter().map(|r| r.jobs_reassigned).sum()
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub problem: String,
    pub ga: GaConfig,
    pub sim: SimConfig,
    pub transport: Transport,
    pub fitness_id: FitnessId,
    pub timing: Timing,
    pub baseline_total_sim_time_ms: u64,
    /// Rule revisions in force, for replaying `decisions.jsonl`.
    pub rule_revisions: Vec<RevisionMark>,
}

/// A finished run held in memory.
pub struct Execution {
    pub outcome: RunOutcome,
    pub master: Master,
    pub fitness_id: FitnessId,
    pub total_sim_time_ms: u64,
}

impl std::fmt::Debug for Execution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Execution")
            .field("master", &self.master)
            .field("fitness_id", &self.fitness_id)
            .field("total_sim_time_ms", &self.total_sim_time_ms)
            .finish()
    }
}

impl Execution {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.outcome
            .history
            .iter()
            .zip(self.master.history())
            .map(|(s, b)| MetricsRow::new(s, b))
            .collect()
    }

    pub fn summary(&mut self, speedup: f64) -> crate::Result<RunSummary> {
        let best = self.master.best_solution()?;
        Ok(RunSummary {
            run_id: self.master.run_id().to_string(),
            fitness_id: self.fitness_id,
            total_sim_time_ms: self.total_sim_time_ms,
            speedup_vs_one_worker: speedup,
            decisions_logged: self.master.log().len(),
            records: self.master.store_mut().record_count(),
            best_generation: best.generation,
            best_job_id: best.job_id.to_string(),
            best_fitness: best.evaluation.fitness,
            best_feasible: best.evaluation.feasible,
            best_genome: best.genome.into_inner(),
        })
    }
}

pub fn run_id(problem: &str, ga: &GaConfig, sim: &SimConfig) -> String {
    format!("{problem}-seed{}-sim{}-w{}", ga.seed, sim.sim_seed, sim.workers)
}

/// Runs the GA over the chosen transport into `store`.
pub fn execute(
    problem: &Problem,
    ga: &GaConfig,
    sim: &SimConfig,
    rules: &FixedRules,
    transport: Transport,
    store: Box<dyn Storage>,
) -> crate::Result<Execution> {
    ga.validate(problem)?;
    sim.validate()?;
    let rules = Arc::new(RuleBook::new(rules.clone()));
    let master = Master::new(run_id(problem.name(), ga, sim), rules, store);
    match transport {
        Transport::Sim => {
            let mut cluster = SimulatedCluster::new(sim.clone(), master)?;
            let fitness_id = cluster.select_fitness(problem)?;
            let outcome = ga::run(problem, ga, &mut cluster)?;
            let total_sim_time_ms = cluster.last_completion_ms();
            Ok(Execution { outcome, master: cluster.into_master(), fitness_id, total_sim_time_ms })
        }
        Transport::Tcp => {
            let mut cluster = TcpCluster::start(sim, master, problem, &ga.weights)?;
            let fitness_id = cluster.select_fitness(problem)?;
            let outcome = ga::run(problem, ga, &mut cluster)?;
            let total_sim_time_ms = cluster.last_completion_ms();
            Ok(Execution { outcome, master: cluster.shutdown()?, fitness_id, total_sim_time_ms })
        }
    }
}

/// Total time of a fault-free single-worker run with the same seeds.
pub fn baseline_total_ms(
    problem: &Problem,
    ga: &GaConfig,
    sim: &SimConfig,
    rules: &FixedRules,
    transport: Transport,
) -> crate::Result<u64> {
    let base = SimConfig { workers: 1, faults: Vec::new(), slices_per_batch: None, ..sim.clone() };
    Ok(execute(problem, ga, &base, rules, transport, Box::new(MemoryStore::new()))?.total_sim_time_ms)
}

pub fn speedup(baseline_ms: u64, total_ms: u64) -> f64 {
    if total_ms == 0 {
        1.0
    } else {
        baseline_ms as f64 / total_ms as f64
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |e| StorageError::Io { path: path.to_path_buf(), source: e }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StorageError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| StorageError::Schema(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(metrics: &RunMetrics, dir: &Path) -> Result<(), StorageError> {
    let path = dir.join(METRICS_FILE);
    let mut csv = csv::Writer::from_path(&path).map_err(|e| StorageError::Schema(e.to_string()))?;
    for row in &metrics.rows {
        csv.serialize(row).map_err(|e| StorageError::Schema(e.to_string()))?;
    }
    csv.flush().map_err(io_err(&path))?;
    let path = dir.join(SUMMARY_FILE);
    let mut line = serde_json::to_string(&metrics.summary).map_err(|e| StorageError::Schema(e.to_string()))?;
    line.push('\n');
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(io_err(&path))
}

/// Runs one experiment and writes every artifact into `out`.
pub fn run_experiment(
    problem_name: &str,
    ga: &GaConfig,
    sim: &SimConfig,
    rules: &FixedRules,
    out: &Path,
    transport: Transport,
    buffered: bool,
) -> crate::Result<RunMetrics> {
    let problem = builtin_problem(problem_name)?;
    ga.validate(&problem)?;
    sim.validate()?;
    for file in [RESULTS_FILE, DECISIONS_FILE] {
        let p = out.join(file);
        if fs::metadata(&p).is_ok_and(|m| m.len() > 0) {
            return Err(ConfigError::Invalid(format!("{} already holds a run", out.display())).into());
        }
    }
    let store = JsonlStore::open_with(out, buffered)?;
    let mut exec = execute(&problem, ga, sim, rules, transport, Box::new(store))?;
    exec.master.store_mut().sync()?;

    let baseline = if sim.workers == 1 {
        exec.total_sim_time_ms
    } else {
        baseline_total_ms(&problem, ga, sim, rules, transport)?
    };
    let speedup = if sim.workers == 1 { 1.0 } else { speedup(baseline, exec.total_sim_time_ms) };
    let metrics = RunMetrics { rows: exec.rows(), summary: exec.summary(speedup)? };

    let manifest = RunManifest {
        run_id: metrics.summary.run_id.clone(),
        problem: problem_name.to_string(),
        ga: ga.clone(),
        sim: sim.clone(),
        transport,
        fitness_id: exec.fitness_id,
        timing: exec.master.timing(),
        baseline_total_sim_time_ms: baseline,
        rule_revisions: exec.master.log().revisions().to_vec(),
    };
    write_json(&out.join(RUN_FILE), &manifest)?;
    write_json(&out.join(LEARNER_FILE), exec.master.log().rule_fire_counts())?;
    emit_metrics(&metrics, out)?;
    Ok(metrics)
}

/// Runs the experiment described by `config` into `config.out`.
pub fn run_from_config(config: &RunConfig) -> crate::Result<RunMetrics> {
    let problem = config.problem()?;
    let ga = config.ga_config(&problem)?;
    let sim = config.sim_config()?;
    let rules = config.load_rules()?;
    let out = config
        .out
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("an output directory is required".into()))?;
    run_experiment(&config.problem, &ga, &sim, &rules, out, config.transport, config.buffered)
}

/// What `report` found in a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub recomputed: RunSummary,
    pub stored: Option<RunSummary>,
    pub replay_mismatches: Vec<ReplayMismatch>,
    pub record_ids_contiguous: bool,
}

impl Report {
    pub fn is_consistent(&self) -> bool {
        self.stored.as_ref() == Some(&self.recomputed)
            && self.replay_mismatches.is_empty()
            && self.record_ids_contiguous
    }
}

fn job_number(job_id: &str) -> u64 {
    job_id.strip_prefix("job-").and_then(|n| n.parse().ok()).unwrap_or(u64::MAX)
}

fn record_evaluation(r: &ResultRecord) -> crate::Result<Evaluation> {
    Ok(Evaluation {
        objectives: ObjectiveVector::new(r.objectives.clone())?,
        fitness: r.fitness,
        feasible: r.feasible,
        violation: r.violation,
    })
}

/// Rebuilds the run summary from the files in `dir` and checks it against
/// `summary.json` and the decision log.
pub fn report(dir: &Path) -> crate::Result<Report> {
    let records: Vec<ResultRecord> = read_jsonl(&dir.join(RESULTS_FILE))?;
    let entries: Vec<LogEntry> = read_jsonl(&dir.join(DECISIONS_FILE))?;
    let run_path = dir.join(RUN_FILE);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&run_path).map_err(io_err(&run_path))?)
        .map_err(|e| StorageError::Schema(format!("{}: {e}", run_path.display())))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let stored: Option<RunSummary> = match fs::read_to_string(&summary_path) {
        Ok(text) => Some(
            serde_json::from_str(text.trim())
                .map_err(|e| StorageError::Schema(format!("{}: {e}", summary_path.display())))?,
        ),
        Err(_) => None,
    };

    let record_ids_contiguous = records.iter().enumerate().all(|(i, r)| r.record_id == i as u64 + 1);

    // position of each record inside its job, in insertion order
    let mut positions = std::collections::BTreeMap::<&str, usize>::new();
    let mut best: Option<(Evaluation, (u32, u64, usize), &ResultRecord)> = None;
    for r in &records {
        let slot = positions.entry(r.job_id.as_str()).or_default();
        let key = (r.generation, job_number(&r.job_id), *slot);
        *slot += 1;
        let e = record_evaluation(r)?;
        let better = match &best {
            None => true,
            Some((be, bk, _)) => e.rank_cmp(be).then(key.cmp(bk)) == Ordering::Less,
        };
        if better {
            best = Some((e, key, r));
        }
    }
    let (best_eval, _, best_record) = best.ok_or(crate::distribution::DistributionError::NoResults)?;
    let total = records.iter().map(|r| r.sim_time_ms).max().unwrap_or(0);
    let speedup = if manifest.sim.workers == 1 { 1.0 } else { speedup(manifest.baseline_total_sim_time_ms, total) };

    let recomputed = RunSummary {
        run_id: manifest.run_id.clone(),
        fitness_id: manifest.fitness_id,
        total_sim_time_ms: total,
        speedup_vs_one_worker: speedup,
        decisions_logged: entries.len() as u64,
        records: records.len() as u64,
        best_generation: best_record.generation,
        best_job_id: best_record.job_id.clone(),
        best_fitness: best_eval.fitness,
        best_feasible: best_eval.feasible,
        best_genome: best_record.genome.clone(),
    };
    Ok(Report {
        recomputed,
        stored,
        replay_mismatches: reasoning::replay(&entries, &manifest.rule_revisions),
        record_ids_contiguous,
    })
}

/// One row of a worker-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub workers: u32,
    pub total_sim_time_ms: u64,
    pub mean_makespan_ms: f64,
    pub speedup: f64,
}

/// Repeats a fault-free run across worker counts. Speedup is relative to a
/// single-worker run with the same seeds.
pub fn bench_sweep(config: &RunConfig, workers: &[u32]) -> crate::Result<Vec<SweepRow>> {
    if workers.is_empty() || workers.contains(&0) {
        return Err(ConfigError::Invalid("workers sweep needs counts >= 1".into()).into());
    }
    let problem = config.problem()?;
    let ga = config.ga_config(&problem)?;
    let rules = config.load_rules()?;
    let base = SimConfig { faults: Vec::new(), ..config.sim_config()? };
    let baseline = baseline_total_ms(&problem, &ga, &base, &rules, config.transport)?;
    workers
        .iter()
        .map(|&k| {
            let sim = SimConfig { workers: k, ..base.clone() };
            let exec = execute(&problem, &ga, &sim, &rules, config.transport, Box::new(MemoryStore::new()))?;
            let history = exec.master.history();
            let mean = history.iter().map(|b| b.makespan_ms as f64).sum::<f64>() / history.len() as f64;
            Ok(SweepRow {
                workers: k,
                total_sim_time_ms: exec.total_sim_time_ms,
                mean_makespan_ms: mean,
                speedup: if k == 1 { 1.0 } else { speedup(baseline, exec.total_sim_time_ms) },
            })
        })
        .collect()
}
