use std::collections::BTreeMap;
use std::sync::Arc;

use galoadshed::distribution::wire::{self, Message, WireResult};
use galoadshed::distribution::{partition_ranges, JobState, RejectReason};
use galoadshed::fitness::FitnessId;
use galoadshed::ga::{EvaluationProvider, LocalEvaluator};
use galoadshed::moo::degrees_of_freedom;
use galoadshed::persistence::{JsonlStore, NewResultRecord, RecordFilter, Storage};
use galoadshed::sim::{Fault, FaultKind, FaultTrigger, SimConfig, SimulatedCluster};
use galoadshed::{
    builtin_problem, scalarize_weighted_sum, DecisionVector, FixedRules, Job, JobId, JobResult,
    JobTable, Master, MemoryStore, MooError, ObjectiveVector, Problem, RuleBook, WeightVector,
    WorkerId,
};
use proptest::prelude::*;

/// Neumaier-compensated sum of the products.
fn compensated_dot(w: &[f64], f: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for (a, b) in w.iter().zip(f) {
        let x = a * b;
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn weights_and_objectives() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|k| {
        (
            prop::collection::vec(0.001f64..10.0, k),
            prop::collection::vec(-1e3f64..1e3, k),
        )
    })
}

fn constrained(c: f64) -> Problem {
    Problem::builder("offset-box")
        .bounds(0.0, 3.0, 2)
        .objective(|x| x[0] + x[1])
        .inequality(move |x| c - x[0] - x[1])
        .build()
        .unwrap()
}

fn sphere_genomes(n: usize, seed: u64) -> Vec<DecisionVector> {
    (0..n)
        .map(|i| {
            let v = (i as f64 + seed as f64 * 0.37).sin() * 9.0;
            DecisionVector::new(vec![v, -v / 2.0, 1.5, v / 3.0, 0.25]).unwrap()
        })
        .collect()
}

fn fault_strategy(workers: u32) -> impl Strategy<Value = Fault> {
    (
        1..=workers,
        prop_oneof![
            (1u32..4).prop_map(FaultTrigger::JobOrdinal),
            (0u64..1500).prop_map(FaultTrigger::AtTime)
        ],
        prop_oneof![
            Just(FaultKind::Stall { duration_ms: None }),
            (1u64..2000).prop_map(|d| FaultKind::Stall { duration_ms: Some(d) }),
            Just(FaultKind::DuplicateResult),
        ],
    )
        .prop_map(|(w, trigger, kind)| Fault { worker: WorkerId(w), trigger, kind })
}

fn schedule_strategy() -> impl Strategy<Value = (SimConfig, usize)> {
    (1u32..5).prop_flat_map(|workers| {
        (
            Just(workers),
            0u64..30,
            0u64..50,
            prop::collection::vec(fault_strategy(workers), 0..=3),
            any::<u64>(),
            1usize..7,
            2usize..30,
        )
            .prop_map(|(workers, lo, spread, faults, seed, slices, pop)| {
                (
                    SimConfig {
                        workers,
                        latency_ms: (lo, lo + spread),
                        faults,
                        sim_seed: seed,
                        slices_per_batch: Some(slices),
                        ..SimConfig::default()
                    },
                    pop,
                )
            })
    })
}

fn record(i: usize) -> NewResultRecord {
    NewResultRecord {
        run_id: "prop".into(),
        generation: (i / 4) as u32,
        job_id: format!("job-{}", i / 2 + 1),
        attempt: 1,
        worker_id: "w1".into(),
        genome: vec![i as f64 * 0.1],
        objectives: vec![i as f64 * 0.01],
        fitness: i as f64 * 0.01,
        feasible: !i.is_multiple_of(3),
        violation: if i.is_multiple_of(3) { 0.5 } else { 0.0 },
        sim_time_ms: i as u64,
    }
}

proptest! {
    #[test]
    fn scalarization_matches_compensated_sum((w, f) in weights_and_objectives()) {
        let got = scalarize_weighted_sum(
            &WeightVector::new(w.clone()).unwrap(),
            &ObjectiveVector::new(f.clone()).unwrap(),
        ).unwrap();
        let oracle = compensated_dot(&w, &f);
        let scale: f64 = w.iter().zip(&f).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1.0);
        prop_assert!((got - oracle).abs() <= 1e-12 * scale, "{got} vs {oracle}");
    }

    #[test]
    fn positive_weight_scaling_keeps_the_argmin(
        (w, _) in weights_and_objectives(),
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let k = w.len();
        let points: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..k).map(|j| ((seed as f64) * 1e-3 + (i * 7 + j * 3) as f64).sin() * 50.0).collect())
            .collect();
        let score = |w: &[f64], p: &[f64]| {
            scalarize_weighted_sum(&WeightVector::new(w.to_vec()).unwrap(), &ObjectiveVector::new(p.to_vec()).unwrap()).unwrap()
        };
        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
        let argmin = |w: &[f64]| {
            (0..points.len()).min_by(|&a, &b| score(w, &points[a]).total_cmp(&score(w, &points[b]))).unwrap()
        };
        let (a, b) = (argmin(&w), argmin(&scaled));
        let (fa, fb) = (score(&w, &points[a]), score(&w, &points[b]));
        prop_assert!((fa - fb).abs() <= 1e-9 * fa.abs().max(1.0));
    }

    #[test]
    fn loosening_a_constraint_never_loses_feasibility(
        x0 in 0.0f64..3.0, x1 in 0.0f64..3.0, c1 in -1.0f64..6.0, dc in 0.0f64..3.0,
    ) {
        let x = DecisionVector::new(vec![x0, x1]).unwrap();
        let loose = constrained(c1).check_feasibility(&x).unwrap();
        let tight = constrained(c1 + dc).check_feasibility(&x).unwrap();
        prop_assert!(!tight.is_feasible() || loose.is_feasible());
        prop_assert!(loose.total_violation() <= tight.total_violation());
    }

    #[test]
    fn over_constrained_always_fails(n in 1usize..6, extra in 0usize..5) {
        let p = n + extra;
        prop_assert_eq!(degrees_of_freedom(n, p), Err(MooError::OverConstrained { vars: n, equalities: p }));
        let mut b = Problem::builder("eq").bounds(-1.0, 1.0, n).objective(|x| x[0]);
        for _ in 0..p {
            b = b.equality(|x| x[0]);
        }
        let is_over_constrained = matches!(b.build(), Err(MooError::OverConstrained { .. }));
        prop_assert!(is_over_constrained);
    }

    #[test]
    fn under_constrained_degrees_of_freedom(n in 1usize..10, p_frac in 0.0f64..1.0) {
        let p = ((n as f64) * p_frac) as usize % n;
        prop_assert_eq!(degrees_of_freedom(n, p), Ok(n - p));
    }

    #[test]
    fn partition_conserves_and_balances(n in 0usize..500, k in 1usize..40) {
        let ranges = partition_ranges(n, k);
        prop_assert_eq!(ranges.len(), k.min(n));
        prop_assert_eq!(ranges.iter().map(|r| r.len()).sum::<usize>(), n);
        let mut next = 0;
        for r in &ranges {
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty());
            next = r.end;
        }
        if let (Some(max), Some(min)) = (ranges.iter().map(|r| r.len()).max(), ranges.iter().map(|r| r.len()).min()) {
            prop_assert!(max - min <= 1);
        }
    }

    #[test]
    fn wire_round_trip_is_bit_exact(
        objectives in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..5),
        fitness in prop::num::f64::NORMAL,
        violation in 0.0f64..1e9,
        attempt in 1u32..100,
    ) {
        let msg = Message::JobResult {
            job_id: "job-7".into(),
            attempt,
            worker_id: "w3".into(),
            results: vec![WireResult { objectives: objectives.clone(), fitness, feasible: violation == 0.0, violation }],
        };
        let back = wire::decode(&wire::encode(&msg)).unwrap();
        prop_assert_eq!(&back, &msg);
        if let Message::JobResult { results, .. } = back {
            let bits: Vec<u64> = results[0].objectives.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = objectives.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
            prop_assert_eq!(results[0].fitness.to_bits(), fitness.to_bits());
        }
    }

    #[test]
    fn job_table_accepts_each_job_exactly_once(ops in prop::collection::vec((0u8..4, 1u64..5, 1u32..4), 1..80)) {
        let mut table = JobTable::new();
        for id in 1..5 {
            table.enqueue_job(Job {
                job_id: JobId(id),
                generation: 0,
                slice_index: id as usize,
                genomes: vec![DecisionVector::new(vec![0.0]).unwrap()],
                fitness_id: FitnessId::WeightedSum,
                deadline_ms: None,
                attempt: 1,
            }).unwrap();
        }
        let mut accepted: BTreeMap<u64, u32> = BTreeMap::new();
        for (op, id, attempt) in ops {
            match op {
                0 => { table.dispatch_next(0); }
                1 => { let _ = table.cancel_and_requeue(JobId(id)); }
                _ => {
                    let r = table.accept(JobResult {
                        job_id: JobId(id),
                        attempt,
                        worker_id: WorkerId(1),
                        evaluations: Vec::new(),
                        completed_at_ms: 0,
                    });
                    if r.is_ok() {
                        prop_assert!(accepted.insert(id, attempt).is_none(), "job {} accepted twice", id);
                    } else if accepted.contains_key(&id) {
                        prop_assert_eq!(r, Err(RejectReason::AlreadyAccepted));
                    }
                }
            }
        }
        for (id, attempt) in accepted {
            prop_assert_eq!(table.state(JobId(id)), Some(JobState::Accepted));
            prop_assert_eq!(table.accepted(JobId(id)).unwrap().attempt, attempt);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn randomized_schedules_accept_exactly_once_and_realign((config, pop) in schedule_strategy()) {
        let problem = builtin_problem("sphere-5").unwrap();
        let weights = WeightVector::uniform(1);
        let master = Master::new("prop", Arc::new(RuleBook::new(FixedRules::defaults())), Box::new(MemoryStore::new()));
        let mut cluster = SimulatedCluster::new(config.clone(), master).unwrap();
        let mut local = LocalEvaluator::new(FitnessId::ScalarDirect);
        for generation in 0..3 {
            let genomes = sphere_genomes(pop, generation as u64);
            match cluster.evaluate_batch(generation, &genomes, &problem, &weights) {
                Ok(got) => {
                    let want = local.evaluate_batch(generation, &genomes, &problem, &weights).unwrap();
                    prop_assert_eq!(got, want);
                }
                Err(galoadshed::Error::Distribution(galoadshed::DistributionError::AllWorkersSuspended { .. })) => {
                    prop_assert!(cluster.master().workers().all_suspended());
                    return Ok(());
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
        let records = cluster.master_mut().store_mut().query(&RecordFilter::default()).unwrap();
        prop_assert_eq!(records.len(), pop * 3);
        let mut per_job: BTreeMap<String, (u32, usize)> = BTreeMap::new();
        for r in &records {
            let e = per_job.entry(r.job_id.clone()).or_insert((r.attempt, 0));
            prop_assert_eq!(e.0, r.attempt, "{} has results from two attempts", &r.job_id);
            e.1 += 1;
        }
        let table = cluster.master().table();
        prop_assert_eq!(per_job.len(), table.len());
        for (job, (_, count)) in per_job {
            prop_assert_eq!(count, table.job(job.parse().unwrap()).unwrap().genomes.len());
        }
    }

    #[test]
    fn reopened_store_preserves_lines_and_ids(n in 1usize..40, m in 0usize..10) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = JsonlStore::open(dir.path()).unwrap();
        for i in 0..n {
            prop_assert_eq!(store.insert(record(i)).unwrap(), i as u64 + 1);
        }
        store.close().unwrap();
        let before = std::fs::read(dir.path().join("results.jsonl")).unwrap();

        let mut store = JsonlStore::open(dir.path()).unwrap();
        prop_assert_eq!(store.next_record_id(), n as u64 + 1);
        for i in 0..m {
            store.insert(record(n + i)).unwrap();
        }
        store.close().unwrap();
        let after = std::fs::read(dir.path().join("results.jsonl")).unwrap();
        prop_assert_eq!(&after[..before.len()], &before[..]);

        let mut store = JsonlStore::open(dir.path()).unwrap();
        let ids: Vec<u64> = store.query(&RecordFilter::default()).unwrap().iter().map(|r| r.record_id).collect();
        prop_assert_eq!(ids, (1..=(n + m) as u64).collect::<Vec<_>>());
        let g0 = store.query(&RecordFilter::generation(0)).unwrap();
        prop_assert!(g0.iter().all(|r| r.generation == 0));
        prop_assert_eq!(g0.len(), (n + m).min(4));
    }
}
