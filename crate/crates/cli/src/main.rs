use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use galoadshed::experiment::{self, bench_sweep, report, RunConfig, Transport};
use galoadshed::reasoning::{FixedRules, RuleBook, RuleChange};
use galoadshed::sim::Fault;
use galoadshed::Error;

#[derive(Debug, Parser)]
#[command(name = "galoadshed", version, about = "Distributed genetic algorithm on a simulated worker pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts to --out.
    Run(RunArgs),
    /// Repeat a fault-free run across worker counts and print a speedup table.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers_sweep: Vec<u32>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Inspect or validate rule tables.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
    },
    /// Rebuild the summary of a finished run from its files.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum RulesAction {
    /// Print the rules in priority order.
    List {
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Apply a rule file on top of the built-in table, printing each change.
    Reload {
        #[arg(long)]
        rules: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON file with the same keys as these flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    gens: Option<u32>,
    #[arg(long)]
    workers: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sim_seed: Option<u64>,
    #[arg(long)]
    mutation_rate: Option<f64>,
    #[arg(long)]
    mutation_sigma: Option<f64>,
    #[arg(long)]
    selection_fraction: Option<f64>,
    #[arg(long)]
    elitism: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    per_eval_cost_ms: Option<u64>,
    /// `min,max`
    #[arg(long, value_parser = parse_latency)]
    latency_ms: Option<(u64, u64)>,
    /// `worker:ordinal[:ms|:dup]` or `worker@time_ms[:ms|:dup]`; repeatable.
    #[arg(long)]
    fault: Vec<String>,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    job_timeout_ms: Option<u64>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    buffered: bool,
}

fn parse_latency(s: &str) -> Result<(u64, u64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `min,max`")?;
    let parse = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        set!(problem, pop, gens, workers, seed, sim_seed, mutation_rate, selection_fraction, elitism, per_eval_cost_ms);
        if self.mutation_sigma.is_some() {
            c.mutation_sigma = self.mutation_sigma;
        }
        if self.weights.is_some() {
            c.weights = self.weights;
        }
        if let Some(l) = self.latency_ms {
            c.latency_ms = l;
        }
        if !self.fault.is_empty() {
            c.fault = self.fault.iter().map(|f| f.parse::<Fault>()).collect::<Result<_, _>>()?;
        }
        if self.slices.is_some() {
            c.slices = self.slices;
        }
        if self.job_timeout_ms.is_some() {
            c.job_timeout_ms = self.job_timeout_ms;
        }
        if self.rules.is_some() {
            c.rules = self.rules;
        }
        if self.out.is_some() {
            c.out = self.out;
        }
        if let Some(t) = self.transport {
            c.transport = t.parse::<Transport>()?;
        }
        c.buffered |= self.buffered;
        Ok(c)
    }
}

fn load_rules(path: Option<&Path>) -> Result<FixedRules, Error> {
    match path {
        Some(p) => Ok(FixedRules::load(p)?),
        None => Ok(FixedRules::defaults()),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let metrics = experiment::run_from_config(&config)?;
    let s = &metrics.summary;
    println!("run_id: {}", s.run_id);
    println!("fitness: {}", s.fitness_id);
    println!("generations: {}", metrics.rows.len());
    println!("records: {}", s.records);
    println!("decisions_logged: {}", s.decisions_logged);
    println!("total_sim_time_ms: {}", s.total_sim_time_ms);
    println!("speedup_vs_one_worker: {:.3}", s.speedup_vs_one_worker);
    println!(
        "resumes: {}  suspends: {}  reassigned: {}",
        metrics.total_resumes(),
        metrics.total_suspends(),
        metrics.total_reassigned()
    );
    println!("best_fitness: {} (feasible: {})", s.best_fitness, s.best_feasible);
    println!("best_genome: {:?}", s.best_genome);
    Ok(())
}

fn cmd_bench(workers: Vec<u32>, args: RunArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let rows = bench_sweep(&config, &workers)?;
    println!("{:>7}  {:>17}  {:>15}  {:>7}", "workers", "total_sim_time_ms", "mean_makespan_ms", "speedup");
    for r in rows {
        println!(
            "{:>7}  {:>17}  {:>15.1}  {:>7.3}",
            r.workers, r.total_sim_time_ms, r.mean_makespan_ms, r.speedup
        );
    }
    Ok(())
}

fn cmd_rules(action: RulesAction) -> Result<(), Error> {
    match action {
        RulesAction::List { rules } => {
            let table = load_rules(rules.as_deref())?;
            let mut sorted: Vec<_> = table.rules().iter().collect();
            sorted.sort_by_key(|r| r.priority);
            for r in sorted {
                println!(
                    "{:<36} priority {:<4} {} -> {}",
                    r.id,
                    r.priority,
                    serde_json::to_string(&r.pattern).unwrap_or_default(),
                    serde_json::to_string(&r.decision).unwrap_or_default()
                );
            }
        }
        RulesAction::Reload { rules } => {
            let target = FixedRules::load(&rules)?;
            let book = RuleBook::new(FixedRules::defaults());
            let current = book.snapshot();
            let mut changes = Vec::new();
            for r in current.rules() {
                match target.get(&r.id) {
                    None => changes.push(RuleChange::Remove(r.id.clone())),
                    Some(t) if t != r => changes.push(RuleChange::Replace(t.clone())),
                    Some(_) => {}
                }
            }
            for t in target.rules() {
                if current.get(&t.id).is_none() {
                    changes.push(RuleChange::Add(t.clone()));
                }
            }
            if changes.is_empty() {
                println!("no changes; revision {}", book.snapshot().revision());
            }
            for change in changes {
                let label = match &change {
                    RuleChange::Add(r) => format!("add {}", r.id),
                    RuleChange::Remove(id) => format!("remove {id}"),
                    RuleChange::Replace(r) => format!("replace {}", r.id),
                };
                let revision = book.apply(change)?;
                println!("{label} -> revision {revision}");
            }
        }
    }
    Ok(())
}

fn cmd_report(out: &Path) -> Result<bool, Error> {
    let r = report(out)?;
    let s = &r.recomputed;
    println!("run_id: {}", s.run_id);
    println!("records: {}", s.records);
    println!("decisions_logged: {}", s.decisions_logged);
    println!("total_sim_time_ms: {}", s.total_sim_time_ms);
    println!("speedup_vs_one_worker: {:.3}", s.speedup_vs_one_worker);
    println!("best_fitness: {} (feasible: {})", s.best_fitness, s.best_feasible);
    println!("best_genome: {:?}", s.best_genome);
    println!("record_ids_contiguous: {}", r.record_ids_contiguous);
    println!("replay_mismatches: {}", r.replay_mismatches.len());
    match &r.stored {
        Some(stored) if stored == s => println!("summary.json: matches"),
        Some(_) => println!("summary.json: DIFFERS"),
        None => println!("summary.json: missing"),
    }
    Ok(r.is_consistent())
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_config_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bench { workers_sweep, run } => cmd_bench(workers_sweep, run),
        Command::Rules { action } => cmd_rules(action),
        Command::Report { out } => match cmd_report(&out) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: persisted files disagree with the run summary");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
