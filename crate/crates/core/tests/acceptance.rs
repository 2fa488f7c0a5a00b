//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use galoadshed::distribution::DistributionError;
use galoadshed::experiment::{self, bench_sweep, execute, report, RunConfig, RunManifest};
use galoadshed::ga::{run, GaConfig, LocalEvaluator};
use galoadshed::persistence::{read_jsonl, JsonlStore, RecordFilter, ResultRecord, Storage};
use galoadshed::reasoning::{self, Action, LogEntry, KIND_JOB_OVERDUE};
use galoadshed::sim::{Fault, FaultKind, FaultTrigger, SimConfig, SimulatedCluster};
use galoadshed::{
    builtin_problem, DecisionVector, Error, EvaluationProvider, FixedRules, Master, MemoryStore,
    MooError, Problem, RuleBook, WeightVector, WorkerId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn criterion1_distributed_equals_sequential(dirs: &Path) -> Check {
    let start = Instant::now();
    let mut reference: Option<(Vec<f64>, Vec<u64>)> = None;
    for workers in [1u32, 2, 4, 8] {
        let config = RunConfig {
            problem: "sphere-5".into(),
            pop: 40,
            gens: 5,
            elitism: 1,
            seed: 42,
            sim_seed: 7,
            workers,
            out: Some(dirs.join(format!("c1-w{workers}"))),
            ..RunConfig::default()
        };
        let metrics = experiment::run_from_config(&config).map_err(err)?;
        let records: Vec<ResultRecord> =
            read_jsonl(&config.out.unwrap().join("results.jsonl")).map_err(err)?;
        let mut bits: Vec<u64> = records.iter().map(|r| r.fitness.to_bits()).collect();
        bits.sort_unstable();
        let best: Vec<u64> = metrics.summary.best_genome.iter().map(|v| v.to_bits()).collect();
        match &reference {
            None => reference = Some((metrics.summary.best_genome.clone(), bits)),
            Some((g, b)) => {
                let gb: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
                ensure(gb == best, format!("best genome differs at workers={workers}"))?;
                ensure(*b == bits, format!("fitness multiset differs at workers={workers}"))?;
            }
        }
    }
    // same trajectory as the in-process sequential evaluator
    let problem = builtin_problem("sphere-5").map_err(err)?;
    let ga = GaConfig { population_size: 40, generations: 5, elitism_count: 1, seed: 42, ..GaConfig::with_objectives(1) };
    let local = run(&problem, &ga, &mut LocalEvaluator::default()).map_err(err)?;
    let local_best: Vec<u64> = local.best.genome.as_slice().iter().map(|v| v.to_bits()).collect();
    let (g, _) = reference.unwrap();
    ensure(g.iter().map(|v| v.to_bits()).collect::<Vec<_>>() == local_best, "differs from sequential run")?;
    within(start.elapsed(), 5)?;
    Ok(format!("workers 1,2,4,8 bit-identical in {:.2}s", start.elapsed().as_secs_f64()))
}

fn random_fault(rng: &mut ChaCha8Rng, workers: u32) -> Fault {
    let worker = WorkerId(rng.random_range(1..=workers));
    let trigger = if rng.random_bool(0.7) {
        FaultTrigger::JobOrdinal(rng.random_range(1..=4))
    } else {
        FaultTrigger::AtTime(rng.random_range(0..2000))
    };
    let kind = match rng.random_range(0..4) {
        0 => FaultKind::DuplicateResult,
        1 => FaultKind::Stall { duration_ms: Some(rng.random_range(1..3000)) },
        _ => FaultKind::Stall { duration_ms: None },
    };
    Fault { worker, trigger, kind }
}

fn criterion2_exactly_once() -> Check {
    let start = Instant::now();
    let problem = builtin_problem("sphere-5").map_err(err)?;
    let ga = GaConfig { population_size: 20, generations: 3, seed: 1, ..GaConfig::with_objectives(1) };
    let rules = FixedRules::defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut completed, mut stranded) = (0, 0);
    for schedule in 0..1000 {
        let workers = rng.random_range(1..=4u32);
        let lo = rng.random_range(0..20u64);
        let hi = lo + rng.random_range(0..60u64);
        let n_faults = rng.random_range(0..=3usize);
        let faults: Vec<Fault> = (0..n_faults).map(|_| random_fault(&mut rng, workers)).collect();
        let sim = SimConfig {
            workers,
            latency_ms: (lo, hi),
            faults: faults.clone(),
            sim_seed: rng.random(),
            slices_per_batch: Some(rng.random_range(1..=6)),
            ..SimConfig::default()
        };
        let ga = GaConfig { seed: schedule, ..ga.clone() };
        match execute(&problem, &ga, &sim, &rules, experiment::Transport::Sim, Box::new(MemoryStore::new())) {
            Ok(mut exec) => {
                completed += 1;
                let records = exec.master.store_mut().query(&RecordFilter::default()).map_err(err)?;
                ensure(records.len() == 20 * 4, format!("schedule {schedule}: {} records", records.len()))?;
                let mut attempts: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
                let mut per_job: BTreeMap<&str, usize> = BTreeMap::new();
                for r in &records {
                    attempts.entry(&r.job_id).or_default().insert(r.attempt);
                    *per_job.entry(&r.job_id).or_default() += 1;
                }
                for (job, a) in &attempts {
                    ensure(a.len() == 1, format!("schedule {schedule}: {job} accepted for attempts {a:?}"))?;
                    let size = exec
                        .master
                        .table()
                        .job(job.parse().map_err(err)?)
                        .map(|j| j.genomes.len())
                        .unwrap_or(0);
                    ensure(per_job[job] == size, format!("schedule {schedule}: {job} has {} of {size}", per_job[job]))?;
                }
                let jobs = exec.master.table().len();
                ensure(attempts.len() == jobs, format!("schedule {schedule}: {} of {jobs} jobs accepted", attempts.len()))?;
            }
            Err(Error::Distribution(DistributionError::AllWorkersSuspended { .. })) => {
                stranded += 1;
                let stalled: BTreeSet<u32> = faults
                    .iter()
                    .filter(|f| matches!(f.kind, FaultKind::Stall { .. }))
                    .map(|f| f.worker.0)
                    .collect();
                ensure(
                    stalled.len() == workers as usize,
                    format!("schedule {schedule}: stranded with only {stalled:?} of {workers} stalled"),
                )?;
            }
            Err(e) => return Err(format!("schedule {schedule}: {e}")),
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!(
        "1000 schedules, {completed} completed, {stranded} stranded with every worker stalled, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion3_elitism_monotone() -> Check {
    let problem = builtin_problem("sphere-5").map_err(err)?;
    for seed in 1..=20 {
        let ga = GaConfig { generations: 100, seed, ..GaConfig::with_objectives(1) };
        let out = run(&problem, &ga, &mut LocalEvaluator::default()).map_err(err)?;
        for w in out.history.windows(2) {
            ensure(
                w[1].best_fitness <= w[0].best_fitness,
                format!("seed {seed}: best rose at generation {}", w[1].generation),
            )?;
        }
    }
    Ok("20 seeds x 100 generations, best fitness never increases".into())
}

const CONVERGENCE_THRESHOLD: f64 = 1e-2;

fn criterion4_convergence() -> Check {
    let start = Instant::now();
    let problem = builtin_problem("sphere-5").map_err(err)?;
    let mut best = Vec::new();
    for seed in 1..=20 {
        let ga = GaConfig { population_size: 50, generations: 200, seed, ..GaConfig::with_objectives(1) };
        let out = run(&problem, &ga, &mut LocalEvaluator::default()).map_err(err)?;
        best.push(out.best.evaluation.expect("evaluated").fitness);
    }
    best.sort_by(f64::total_cmp);
    let median = (best[9] + best[10]) / 2.0;
    ensure(median <= CONVERGENCE_THRESHOLD, format!("median {median:e} > {CONVERGENCE_THRESHOLD:e}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!("20-seed median {median:.3e} <= {CONVERGENCE_THRESHOLD:e} in {:.2}s", start.elapsed().as_secs_f64()))
}

/// (index, feasible, fitness, violation) of the brute-force winner.
fn brute_force(grid: &[[f64; 2]], w: [f64; 2]) -> usize {
    let scored: Vec<(bool, f64, f64)> = grid
        .iter()
        .map(|x| {
            let g1 = 1.0 - x[0] - x[1];
            let g2 = x[0] - 3.0;
            let violation = g1.max(0.0) + g2.max(0.0);
            (violation == 0.0, w[0] * x[0] + w[1] * x[1], violation)
        })
        .collect();
    let any_feasible = scored.iter().any(|s| s.0);
    let mut best: Option<usize> = None;
    for (i, s) in scored.iter().enumerate() {
        if any_feasible && !s.0 {
            continue;
        }
        let key = if any_feasible { s.1 } else { s.2 };
        match best {
            Some(b) => {
                let bk = if any_feasible { scored[b].1 } else { scored[b].2 };
                if key < bk {
                    best = Some(i);
                }
            }
            None => best = Some(i),
        }
    }
    best.expect("non-empty grid")
}

fn criterion5_weighted_sum_oracle() -> Check {
    let problem = builtin_problem("constrained-box").map_err(err)?;
    let grid: Vec<[f64; 2]> = (0..=10)
        .flat_map(|i| (0..=10).map(move |j| [i as f64 * 0.3, j as f64 * 0.3]))
        .collect();
    let genomes: Vec<DecisionVector> =
        grid.iter().map(|x| DecisionVector::new(x.to_vec()).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let w = [rng.random_range(0.01..1.0), rng.random_range(0.01..1.0)];
        let weights = WeightVector::new(w.to_vec()).map_err(err)?;
        let master = Master::new(
            "oracle",
            Arc::new(RuleBook::new(FixedRules::defaults())),
            Box::new(MemoryStore::new()),
        );
        let mut cluster =
            SimulatedCluster::new(SimConfig { workers: 3, sim_seed: trial, ..SimConfig::default() }, master)
                .map_err(err)?;
        cluster.evaluate_batch(0, &genomes, &problem, &weights).map_err(err)?;
        let got = cluster.master().best_solution().map_err(err)?;
        let want = brute_force(&grid, w);
        ensure(
            got.genome.as_slice() == grid[want],
            format!("weights {w:?}: got {:?}, brute force {:?}", got.genome.as_slice(), grid[want]),
        )?;
    }
    Ok("10 weight vectors on the 11x11 grid match brute force".into())
}

fn with_equalities(n: usize, p: usize) -> Result<Problem, MooError> {
    let mut b = Problem::builder(format!("n{n}-p{p}")).bounds(-1.0, 1.0, n).objective(|x| x[0]);
    for j in 0..p {
        b = b.equality(move |x| x[j % x.len()]);
    }
    b.build()
}

fn criterion6_over_constrained() -> Check {
    for (n, p) in [(3, 3), (2, 5)] {
        match with_equalities(n, p) {
            Err(MooError::OverConstrained { .. }) => {}
            other => return Err(format!("(n={n}, p={p}) gave {:?}", other.map(|_| ()))),
        }
    }
    let dof = with_equalities(5, 2).map_err(err)?.degrees_of_freedom();
    ensure(dof == 3, format!("(5, 2) has {dof} degrees of freedom"))?;
    Ok("(3,3) and (2,5) refused, (5,2) has 3 degrees of freedom".into())
}

fn criterion7_load_relief(dirs: &Path) -> Check {
    let base = RunConfig {
        pop: 40,
        gens: 3,
        per_eval_cost_ms: 100,
        latency_ms: (0, 0),
        seed: 3,
        ..RunConfig::default()
    };
    for (workers, expected) in [(1u32, 4000u64), (4, 1000)] {
        for slices in [None, Some(4)] {
            let config = RunConfig {
                workers,
                slices,
                out: Some(dirs.join(format!("c7-w{workers}-{slices:?}"))),
                ..base.clone()
            };
            let metrics = experiment::run_from_config(&config).map_err(err)?;
            for row in &metrics.rows {
                ensure(
                    row.makespan_ms == expected,
                    format!("k={workers}: generation {} makespan {}", row.generation, row.makespan_ms),
                )?;
            }
        }
    }
    let sweep = bench_sweep(&RunConfig { latency_ms: RunConfig::default().latency_ms, ..base }, &[1, 4])
        .map_err(err)?;
    let (k1, k4) = (&sweep[0], &sweep[1]);
    ensure(k4.speedup >= 3.33, format!("speedup {:.3} < 3.33", k4.speedup))?;
    ensure(
        k4.mean_makespan_ms <= 0.3 * k1.mean_makespan_ms,
        format!("k=4 makespan {} > 0.3 x {}", k4.mean_makespan_ms, k1.mean_makespan_ms),
    )?;
    Ok(format!("makespan 4000/1000 ms exact; sweep speedup {:.3} at k=4", k4.speedup))
}

fn overdue_actions(entries: &[LogEntry]) -> BTreeMap<String, Vec<Action>> {
    let mut by_job: BTreeMap<String, Vec<Action>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.trigger.kind == KIND_JOB_OVERDUE) {
        let key = format!("{}#{}", e.trigger.get("job_id").unwrap_or("?"), e.trigger.get("attempt").unwrap_or("?"));
        by_job.entry(key).or_default().push(e.decision.action);
    }
    by_job
}

fn criterion8_watchdog(dirs: &Path) -> Check {
    let cases: [(u32, Vec<&str>); 3] = [(2, vec!["2:1"]), (4, vec!["2:1", "3:2", "4:1"]), (3, vec!["1@0"])];
    for (i, (workers, faults)) in cases.iter().enumerate() {
        let out = dirs.join(format!("c8-{i}"));
        let config = RunConfig {
            pop: 20,
            gens: 3,
            workers: *workers,
            fault: faults.iter().map(|f| f.parse().unwrap()).collect(),
            out: Some(out.clone()),
            ..RunConfig::default()
        };
        let metrics = experiment::run_from_config(&config).map_err(err)?;
        let injected = faults.len() as u64;
        ensure(
            metrics.total_suspends() == injected && metrics.total_reassigned() == injected,
            format!("case {i}: {} suspends for {injected} stalls", metrics.total_suspends()),
        )?;
        let entries: Vec<LogEntry> = read_jsonl(&out.join("decisions.jsonl")).map_err(err)?;
        let actions = overdue_actions(&entries);
        ensure(actions.len() as u64 == injected, format!("case {i}: overdue for {} attempts", actions.len()))?;
        for (job, a) in actions {
            ensure(
                a == [Action::Resume, Action::SuspendReassign],
                format!("case {i}: {job} decided {a:?}"),
            )?;
        }
    }
    Ok("each unrecoverable stall: one resume, then one suspend-reassign; suspends = stalls".into())
}

fn criterion9_replay(dirs: &Path) -> Check {
    let out = dirs.join("c9");
    let config = RunConfig {
        pop: 20,
        gens: 4,
        workers: 3,
        fault: vec!["2:1".parse().unwrap(), "1:2:dup".parse().unwrap(), "3:1:400".parse().unwrap()],
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    experiment::run_from_config(&config).map_err(err)?;
    let text = std::fs::read_to_string(out.join("decisions.jsonl")).map_err(err)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let e: LogEntry = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        ensure(!e.trigger.kind.is_empty() && !e.rule_id.is_empty(), format!("line {}: incomplete triple", i + 1))?;
        entries.push(e);
    }
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).map_err(err)?).map_err(err)?;
    let mismatches = reasoning::replay(&entries, &manifest.rule_revisions);
    ensure(mismatches.is_empty(), format!("{} replay mismatches", mismatches.len()))?;
    let kinds: BTreeSet<Action> = entries.iter().map(|e| e.decision.action).collect();
    ensure(kinds.len() == 5, format!("only {kinds:?} exercised"))?;

    let mut tampered = entries.clone();
    let victim = tampered.iter_mut().find(|e| e.decision.action == Action::AcceptResult).unwrap();
    victim.decision.action = Action::RejectDuplicate;
    ensure(reasoning::replay(&tampered, &manifest.rule_revisions).len() == 1, "tampered log not detected")?;
    Ok(format!("{} entries replayed, all 5 decision kinds, tampering detected", entries.len()))
}

fn criterion10_round_trip(dirs: &Path) -> Check {
    let mut checked = 0;
    for entry in std::fs::read_dir(dirs).map_err(err)? {
        let dir = entry.map_err(err)?.path();
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).map_err(err)?).map_err(err)?;
        let expected = manifest.ga.population_size as u64 * (manifest.ga.generations as u64 + 1);
        let mut store = JsonlStore::open(&dir).map_err(err)?;
        ensure(store.record_count() == expected, format!("{}: {} records, expected {expected}", dir.display(), store.record_count()))?;
        let ids: Vec<u64> = store.query(&RecordFilter::default()).map_err(err)?.iter().map(|r| r.record_id).collect();
        ensure(ids == (1..=expected).collect::<Vec<_>>(), format!("{}: ids not 1..N", dir.display()))?;
        store.close().map_err(err)?;
        let r = report(&dir).map_err(err)?;
        ensure(r.is_consistent(), format!("{}: report disagrees with summary", dir.display()))?;
        checked += 1;
    }
    ensure(checked >= 10, format!("only {checked} run directories"))?;
    Ok(format!("{checked} run directories reopened; counts, ids and reports agree"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dirs = tmp.path();
    let criteria: Vec<Criterion<'_>> = vec![
        ("1 distributed equals sequential", Box::new(|| criterion1_distributed_equals_sequential(dirs))),
        ("2 exactly-once under faults", Box::new(criterion2_exactly_once)),
        ("3 elitism monotonicity", Box::new(criterion3_elitism_monotone)),
        ("4 convergence", Box::new(criterion4_convergence)),
        ("5 weighted-sum oracle", Box::new(criterion5_weighted_sum_oracle)),
        ("6 over-constrained guard", Box::new(criterion6_over_constrained)),
        ("7 load-relief law", Box::new(|| criterion7_load_relief(dirs))),
        ("8 watchdog semantics", Box::new(|| criterion8_watchdog(dirs))),
        ("9 audit replay", Box::new(|| criterion9_replay(dirs))),
        ("10 persistence round-trip", Box::new(|| criterion10_round_trip(dirs))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
