use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::job::{Job, JobId, JobResult, JobTable, RejectReason, WorkerId};
use super::repository::{self, WorkerRepository};
use super::wire::Message;
use super::{partition_ranges, BestSolution, DistributionError, Envelope};
use crate::fitness::{Evaluation, FitnessId};
use crate::moo::{DecisionVector, Problem};
use crate::persistence::{NewResultRecord, Storage};
use crate::reasoning::{
    self, Action, DecisionLog, Inference, RuleBook, Trigger, KIND_JOB_OVERDUE, KIND_RESULT_RECEIVED,
};

/// Deadline parameters for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub job_timeout_ms: u64,
    pub generation_budget_ms: u64,
}

impl Timing {
    /// Budget of ten job timeouts.
    pub fn from_timeout(job_timeout_ms: u64) -> Self {
        Self { job_timeout_ms, generation_budget_ms: 10 * job_timeout_ms }
    }
}

/// Per-generation load figures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub generation: u32,
    pub slices: usize,
    pub jobs_dispatched: u64,
    pub jobs_reassigned: u64,
    pub resumes: u64,
    pub suspends: u64,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub makespan_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collected {
    Accepted,
    Rejected(RejectReason),
}

#[derive(Debug)]
struct Batch {
    jobs: Vec<JobId>,
    stats: BatchStats,
}

/// The server: job table, worker repository, watchdog and decision log.
pub struct Master {
    run_id: String,
    table: JobTable,
    workers: WorkerRepository,
    rules: Arc<RuleBook>,
    log: DecisionLog,
    store: Box<dyn Storage>,
    next_job_id: u64,
    timing: Timing,
    batch: Option<Batch>,
    history: Vec<BatchStats>,
}

impl std::fmt::Debug for Master {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Master")
            .field("run_id", &self.run_id)
            .field("jobs", &self.table.len())
            .field("workers", &self.workers.len())
            .field("decisions", &self.log.len())
            .finish()
    }
}

impl Master {
    pub fn new(run_id: impl Into<String>, rules: Arc<RuleBook>, store: Box<dyn Storage>) -> Self {
        Self {
            run_id: run_id.into(),
            table: JobTable::new(),
            workers: WorkerRepository::new(),
            rules,
            log: DecisionLog::new(),
            store,
            next_job_id: 1,
            timing: Timing::from_timeout(1),
            batch: None,
            history: Vec::new(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn table(&self) -> &JobTable {
        &self.table
    }

    pub fn workers(&self) -> &WorkerRepository {
        &self.workers
    }

    pub fn log(&self) -> &DecisionLog {
        &self.log
    }

    pub fn history(&self) -> &[BatchStats] {
        &self.history
    }

    pub fn timing(&self) -> Timing {
        self.timing
    }

    pub fn store_mut(&mut self) -> &mut dyn Storage {
        self.store.as_mut()
    }

    pub fn into_store(self) -> Box<dyn Storage> {
        self.store
    }

    pub fn register_worker(&mut self, id: WorkerId, now_ms: u64) {
        self.workers.register(id, now_ms);
    }

    fn decide(&mut self, now_ms: u64, trigger: Trigger) -> crate::Result<Inference> {
        let rules = self.rules.snapshot();
        Ok(self.log.decide(&mut *self.store, &rules, now_ms, trigger)?)
    }

    /// Picks the fitness function for `problem` through the rule table.
    pub fn select_fitness(&mut self, problem: &Problem, now_ms: u64) -> crate::Result<FitnessId> {
        let rules = self.rules.snapshot();
        Ok(reasoning::select_fitness_function(
            &rules,
            reasoning::problem_descriptor(problem),
            &mut self.log,
            &mut *self.store,
            now_ms,
        )?)
    }

    /// Partitions `genomes` into `slices` jobs and queues them.
    pub fn begin_batch(
        &mut self,
        generation: u32,
        genomes: &[DecisionVector],
        fitness_id: FitnessId,
        slices: usize,
        timing: Timing,
        now_ms: u64,
    ) -> crate::Result<Vec<JobId>> {
        if self.batch.is_some() {
            return Err(DistributionError::BatchInProgress.into());
        }
        if self.workers.is_empty() {
            return Err(DistributionError::NoWorkers.into());
        }
        self.timing = timing;
        let ranges = partition_ranges(genomes.len(), slices.max(1));
        let mut jobs = Vec::with_capacity(ranges.len());
        for (slice_index, range) in ranges.into_iter().enumerate() {
            let job_id = JobId(self.next_job_id);
            self.next_job_id += 1;
            self.table.enqueue_job(Job {
                job_id,
                generation,
                slice_index,
                genomes: genomes[range].to_vec(),
                fitness_id,
                deadline_ms: None,
                attempt: 1,
            })?;
            jobs.push(job_id);
        }
        self.batch = Some(Batch {
            stats: BatchStats {
                generation,
                slices: jobs.len(),
                started_at_ms: now_ms,
                ..Default::default()
            },
            jobs: jobs.clone(),
        });
        Ok(jobs)
    }

    pub fn dispatch(&mut self, now_ms: u64) -> Vec<Envelope> {
        let out = repository::dispatch(
            &mut self.table,
            &mut self.workers,
            now_ms,
            self.timing.job_timeout_ms,
        );
        if let Some(b) = self.batch.as_mut() {
            b.stats.jobs_dispatched += out.len() as u64;
        }
        out
    }

    pub fn batch_complete(&self) -> bool {
        self.batch.as_ref().is_some_and(|b| {
            b.jobs
                .iter()
                .all(|id| self.table.accepted(*id).is_some())
        })
    }

    /// Work is queued but every worker is suspended.
    pub fn stranded(&self) -> bool {
        self.batch.is_some() && self.table.queue_len() > 0 && self.workers.all_suspended()
    }

    /// Closes a complete batch and returns its evaluations in genome order.
    pub fn finish_batch(&mut self, now_ms: u64) -> crate::Result<Vec<Evaluation>> {
        if !self.batch_complete() {
            if self.stranded() {
                return Err(DistributionError::AllWorkersSuspended {
                    queued: self.table.queue_len(),
                }
                .into());
            }
            return Err(DistributionError::Transport("batch not complete".into()).into());
        }
        let mut batch = self.batch.take().expect("checked");
        let mut out = Vec::new();
        for id in &batch.jobs {
            out.extend(self.table.accepted(*id).expect("complete").evaluations.iter().cloned());
        }
        batch.stats.finished_at_ms = now_ms;
        batch.stats.makespan_ms = now_ms - batch.stats.started_at_ms;
        self.history.push(batch.stats);
        Ok(out)
    }

    /// Handles one inbound message and returns anything to send back.
    pub fn handle(&mut self, message: Message, now_ms: u64) -> crate::Result<Vec<Envelope>> {
        match message {
            Message::Register { worker_id } => {
                let id: WorkerId = worker_id.parse()?;
                self.workers.register(id, now_ms);
                Ok(Vec::new())
            }
            Message::Heartbeat { worker_id, .. } => {
                let id: WorkerId = worker_id.parse()?;
                self.workers.heartbeat(id, now_ms);
                Ok(Vec::new())
            }
            Message::JobResult { job_id, attempt, worker_id, results } => {
                let (Ok(job), Ok(worker)) = (job_id.parse::<JobId>(), worker_id.parse::<WorkerId>()) else {
                    self.reject(now_ms, &job_id, attempt, &worker_id, RejectReason::UnknownJob)?;
                    return Ok(Vec::new());
                };
                let evaluations: Result<Vec<Evaluation>, _> =
                    results.into_iter().map(Evaluation::try_from).collect();
                let expected = self.table.job(job).map(|j| j.genomes.len());
                match evaluations {
                    Ok(evaluations) if Some(evaluations.len()) == expected || expected.is_none() => {
                        let result = JobResult {
                            job_id: job,
                            attempt,
                            worker_id: worker,
                            evaluations,
                            completed_at_ms: now_ms,
                        };
                        self.collect_result(result, now_ms)?;
                        Ok(Vec::new())
                    }
                    _ => self.on_failure(job, attempt, now_ms, "malformed result"),
                }
            }
            Message::JobFailed { job_id, attempt, .. } => {
                let job: JobId = job_id.parse()?;
                self.on_failure(job, attempt, now_ms, "failed")
            }
            other => Err(DistributionError::Wire(format!(
                "master cannot handle {}",
                super::wire::encode(&other)
            ))
            .into()),
        }
    }

    fn reject(
        &mut self,
        now_ms: u64,
        job_id: &str,
        attempt: u32,
        worker_id: &str,
        reason: RejectReason,
    ) -> crate::Result<()> {
        let trigger = Trigger::new(KIND_RESULT_RECEIVED)
            .with("job_id", job_id)
            .with("attempt", attempt)
            .with("worker_id", worker_id)
            .with("state", "stale")
            .with("reason", reject_label(reason));
        let inference = self.decide(now_ms, trigger)?;
        if inference.decision.action != Action::RejectDuplicate {
            return Err(DistributionError::UnsafeDecision {
                action: inference.decision.action,
                context: format!("stale result for {job_id} attempt {attempt}"),
            }
            .into());
        }
        Ok(())
    }

    /// Accepts the result iff it belongs to the live attempt. Either way the
    /// verdict is decided through the rule table and logged.
    pub fn collect_result(&mut self, result: JobResult, now_ms: u64) -> crate::Result<Collected> {
        let job_label = result.job_id.to_string();
        let worker_label = result.worker_id.to_string();
        if let Err(reason) = self.table.check_result(result.job_id, result.attempt) {
            self.reject(now_ms, &job_label, result.attempt, &worker_label, reason)?;
            return Ok(Collected::Rejected(reason));
        }
        let trigger = Trigger::new(KIND_RESULT_RECEIVED)
            .with("job_id", &job_label)
            .with("attempt", result.attempt)
            .with("worker_id", &worker_label)
            .with("state", "live");
        let inference = self.decide(now_ms, trigger)?;
        if inference.decision.action != Action::AcceptResult {
            return Err(DistributionError::UnsafeDecision {
                action: inference.decision.action,
                context: format!("live result for {job_label}"),
            }
            .into());
        }

        let holder = self.workers.holder_of(result.job_id, result.attempt);
        let job = self.table.job(result.job_id).expect("checked").clone();
        for (genome, e) in job.genomes.iter().zip(&result.evaluations) {
            self.store.insert(NewResultRecord {
                run_id: self.run_id.clone(),
                generation: job.generation,
                job_id: job_label.clone(),
                attempt: result.attempt,
                worker_id: worker_label.clone(),
                genome: genome.as_slice().to_vec(),
                objectives: e.objectives.as_slice().to_vec(),
                fitness: e.fitness,
                feasible: e.feasible,
                violation: e.violation,
                sim_time_ms: now_ms,
            })?;
        }
        self.table.accept(result).expect("checked");
        if let Some(w) = holder {
            self.workers.release(w);
        }
        Ok(Collected::Accepted)
    }

    fn on_failure(
        &mut self,
        job: JobId,
        attempt: u32,
        now_ms: u64,
        cause: &str,
    ) -> crate::Result<Vec<Envelope>> {
        match self.workers.holder_of(job, attempt) {
            Some(w) if self.table.check_result(job, attempt).is_ok() => {
                Ok(self.overdue(w, now_ms, cause)?.map(|(_, env)| env).into_iter().collect())
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Raises `job-overdue` for every busy worker past its deadline.
    pub fn watchdog_tick(&mut self, now_ms: u64) -> crate::Result<(Vec<Action>, Vec<Envelope>)> {
        let mut actions = Vec::new();
        let mut out = Vec::new();
        for w in self.workers.overdue(now_ms) {
            if let Some((action, env)) = self.overdue(w, now_ms, "deadline")? {
                actions.push(action);
                out.push(env);
            }
        }
        Ok((actions, out))
    }

    fn overdue(
        &mut self,
        worker: WorkerId,
        now_ms: u64,
        cause: &str,
    ) -> crate::Result<Option<(Action, Envelope)>> {
        let rec = self.workers.get(worker).expect("overdue worker exists").clone();
        let Some((job, attempt)) = rec.current_job else {
            return Ok(None);
        };
        let started = self.batch.as_ref().map_or(now_ms, |b| b.stats.started_at_ms);
        let elapsed = now_ms.saturating_sub(started);
        let available = rec.extensions_used == 0
            && elapsed + self.timing.job_timeout_ms <= self.timing.generation_budget_ms;
        let trigger = Trigger::new(KIND_JOB_OVERDUE)
            .with("budget", if available { "available" } else { "exhausted" })
            .with("job_id", job)
            .with("attempt", attempt)
            .with("worker_id", worker)
            .with("deadline_ms", rec.deadline_ms)
            .with("cause", cause);
        let inference = self.decide(now_ms, trigger)?;
        match inference.decision.action {
            Action::Resume => {
                if rec.extensions_used >= 1 {
                    return Err(DistributionError::UnsafeDecision {
                        action: Action::Resume,
                        context: format!("{job} on {worker} already extended once"),
                    }
                    .into());
                }
                let base = if cause == "deadline" { rec.deadline_ms } else { now_ms };
                let new_deadline = base.max(now_ms.saturating_sub(self.timing.job_timeout_ms))
                    + self.timing.job_timeout_ms;
                let r = self.workers.get_mut(worker).expect("exists");
                r.deadline_ms = new_deadline;
                r.extensions_used = 1;
                self.table.extend_deadline(job, new_deadline);
                if let Some(b) = self.batch.as_mut() {
                    b.stats.resumes += 1;
                }
                Ok(Some((Action::Resume, Envelope {
                    to: worker,
                    message: Message::Resume { job_id: job.to_string(), new_deadline_ms: new_deadline },
                })))
            }
            Action::SuspendReassign => {
                self.workers.suspend(worker);
                self.table.cancel_and_requeue(job)?;
                if let Some(b) = self.batch.as_mut() {
                    b.stats.suspends += 1;
                    b.stats.jobs_reassigned += 1;
                }
                Ok(Some((Action::SuspendReassign, Envelope {
                    to: worker,
                    message: Message::Suspend { worker_id: worker.to_string() },
                })))
            }
            other => Err(DistributionError::UnsafeDecision {
                action: other,
                context: format!("overdue {job} on {worker}"),
            }
            .into()),
        }
    }

    pub fn best_solution(&self) -> Result<BestSolution, DistributionError> {
        super::best_solution(&self.table)
    }
}

fn reject_label(reason: RejectReason) -> &'static str {
    match reason {
        RejectReason::UnknownJob => "unknown-job",
        RejectReason::AlreadyAccepted => "already-accepted",
        RejectReason::StaleAttempt => "stale-attempt",
        RejectReason::NotDispatched => "not-dispatched",
    }
}
