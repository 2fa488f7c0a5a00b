use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::job::{JobId, JobTable, WorkerId};
use super::wire::Message;
use super::Envelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkerStatus {
    Idle,
    Busy,
    Suspended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRecord {
    pub worker_id: WorkerId,
    pub status: WorkerStatus,
    pub current_job: Option<(JobId, u32)>,
    pub assigned_at_ms: u64,
    pub deadline_ms: u64,
    pub extensions_used: u32,
    pub last_seen_ms: u64,
}

impl WorkerRecord {
    fn new(worker_id: WorkerId, now_ms: u64) -> Self {
        Self {
            worker_id,
            status: WorkerStatus::Idle,
            current_job: None,
            assigned_at_ms: 0,
            deadline_ms: 0,
            extensions_used: 0,
            last_seen_ms: now_ms,
        }
    }

    fn release(&mut self) {
        self.status = WorkerStatus::Idle;
        self.current_job = None;
        self.extensions_used = 0;
    }
}

/// Registry of worker records. Owns deadline bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct WorkerRepository {
    workers: BTreeMap<WorkerId, WorkerRecord>,
}

impl WorkerRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_workers(count: u32) -> Self {
        let mut repo = Self::new();
        for i in 1..=count {
            repo.register(WorkerId(i), 0);
        }
        repo
    }

    /// Adds a worker, or refreshes its last-seen time if already known.
    pub fn register(&mut self, id: WorkerId, now_ms: u64) {
        self.workers
            .entry(id)
            .and_modify(|w| w.last_seen_ms = now_ms)
            .or_insert_with(|| WorkerRecord::new(id, now_ms));
    }

    pub fn heartbeat(&mut self, id: WorkerId, now_ms: u64) {
        if let Some(w) = self.workers.get_mut(&id) {
            w.last_seen_ms = now_ms;
        }
    }

    pub fn get(&self, id: WorkerId) -> Option<&WorkerRecord> {
        self.workers.get(&id)
    }

    pub fn get_mut(&mut self, id: WorkerId) -> Option<&mut WorkerRecord> {
        self.workers.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.workers.values()
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn all_suspended(&self) -> bool {
        self.workers.values().all(|w| w.status == WorkerStatus::Suspended)
    }

    /// Who holds the given attempt, if anyone.
    pub fn holder_of(&self, job: JobId, attempt: u32) -> Option<WorkerId> {
        self.workers
            .values()
            .find(|w| w.current_job == Some((job, attempt)))
            .map(|w| w.worker_id)
    }

    /// Busy workers whose deadline has been reached, lowest id first.
    pub fn overdue(&self, now_ms: u64) -> Vec<WorkerId> {
        self.workers
            .values()
            .filter(|w| w.status == WorkerStatus::Busy && now_ms >= w.deadline_ms)
            .map(|w| w.worker_id)
            .collect()
    }

    pub fn release(&mut self, id: WorkerId) {
        if let Some(w) = self.workers.get_mut(&id) {
            if w.status != WorkerStatus::Suspended {
                w.release();
            }
        }
    }

    pub fn suspend(&mut self, id: WorkerId) {
        if let Some(w) = self.workers.get_mut(&id) {
            w.status = WorkerStatus::Suspended;
            w.current_job = None;
        }
    }
}

/// Pairs the lowest-id idle worker with the FIFO-head job until one side
/// runs out. Emits one `JOB_ASSIGN` per pairing.
pub fn dispatch(
    table: &mut JobTable,
    workers: &mut WorkerRepository,
    now_ms: u64,
    job_timeout_ms: u64,
) -> Vec<Envelope> {
    let mut out = Vec::new();
    let idle: Vec<WorkerId> = workers
        .iter()
        .filter(|w| w.status == WorkerStatus::Idle)
        .map(|w| w.worker_id)
        .collect();
    for worker_id in idle {
        let deadline = now_ms + job_timeout_ms;
        let Some(job) = table.dispatch_next(deadline) else { break };
        let record = workers.get_mut(worker_id).expect("listed above");
        record.status = WorkerStatus::Busy;
        record.current_job = Some((job.job_id, job.attempt));
        record.assigned_at_ms = now_ms;
        record.deadline_ms = deadline;
        record.extensions_used = 0;
        out.push(Envelope {
            to: worker_id,
            message: Message::JobAssign {
                job_id: job.job_id.to_string(),
                attempt: job.attempt,
                generation: job.generation,
                fitness_id: job.fitness_id.to_string(),
                genomes: job.genomes.iter().map(|g| g.as_slice().to_vec()).collect(),
            },
        });
    }
    out
}
