use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DistributionError;
use crate::fitness::{Evaluation, FitnessId};
use crate::moo::DecisionVector;

/// Run-scoped job identifier, rendered as `job-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job-{}", self.0)
    }
}

impl FromStr for JobId {
    type Err = DistributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("job-")
            .and_then(|n| n.parse().ok())
            .map(JobId)
            .ok_or_else(|| DistributionError::Wire(format!("bad job id `{s}`")))
    }
}

/// Worker identifier, rendered as `w<n>`. Lower ids are dispatched first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

impl FromStr for WorkerId {
    type Err = DistributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('w')
            .and_then(|n| n.parse().ok())
            .map(WorkerId)
            .ok_or_else(|| DistributionError::Wire(format!("bad worker id `{s}`")))
    }
}

/// One population slice bound for one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub job_id: JobId,
    pub generation: u32,
    pub slice_index: usize,
    pub genomes: Vec<DecisionVector>,
    pub fitness_id: FitnessId,
    pub deadline_ms: Option<u64>,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobResult {
    pub job_id: JobId,
    pub attempt: u32,
    pub worker_id: WorkerId,
    pub evaluations: Vec<Evaluation>,
    pub completed_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobState {
    Queued,
    Dispatched,
    Accepted,
    Cancelled,
}

impl JobState {
    fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Dispatched) | (Dispatched, Accepted) | (Dispatched, Cancelled) | (Cancelled, Queued)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    UnknownJob,
    AlreadyAccepted,
    StaleAttempt,
    NotDispatched,
}

#[derive(Debug, Clone)]
struct Entry {
    job: Job,
    state: JobState,
    accepted: Option<JobResult>,
}

/// Job states, the FIFO queue and the accepted-result ledger.
#[derive(Debug, Clone, Default)]
pub struct JobTable {
    entries: BTreeMap<JobId, Entry>,
    queue: VecDeque<JobId>,
}

impl JobTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue_job(&mut self, job: Job) -> Result<JobId, DistributionError> {
        let id = job.job_id;
        if self.entries.contains_key(&id) {
            return Err(DistributionError::DuplicateJobId(id));
        }
        if job.genomes.is_empty() {
            return Err(DistributionError::EmptyJob(id));
        }
        self.entries.insert(id, Entry { job, state: JobState::Queued, accepted: None });
        self.queue.push_back(id);
        Ok(id)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queued(&self) -> impl Iterator<Item = JobId> + '_ {
        self.queue.iter().copied()
    }

    pub fn state(&self, id: JobId) -> Option<JobState> {
        self.entries.get(&id).map(|e| e.state)
    }

    pub fn job(&self, id: JobId) -> Option<&Job> {
        self.entries.get(&id).map(|e| &e.job)
    }

    pub fn accepted(&self, id: JobId) -> Option<&JobResult> {
        self.entries.get(&id).and_then(|e| e.accepted.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn transition(&mut self, id: JobId, next: JobState) -> Result<&mut Entry, DistributionError> {
        let entry = self.entries.get_mut(&id).ok_or(DistributionError::UnknownJob(id))?;
        if !entry.state.can_become(next) {
            return Err(DistributionError::IllegalTransition { job: id, from: entry.state, to: next });
        }
        entry.state = next;
        Ok(entry)
    }

    /// Takes the FIFO head and marks it dispatched with the given deadline.
    pub fn dispatch_next(&mut self, deadline_ms: u64) -> Option<&Job> {
        let id = self.queue.pop_front()?;
        let entry = self.transition(id, JobState::Dispatched).expect("queued jobs are dispatchable");
        entry.job.deadline_ms = Some(deadline_ms);
        Some(&entry.job)
    }

    pub fn extend_deadline(&mut self, id: JobId, deadline_ms: u64) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.job.deadline_ms = Some(deadline_ms);
        }
    }

    /// Cancels the live attempt and queues the job again with `attempt + 1`.
    /// Returns the new attempt number.
    pub fn cancel_and_requeue(&mut self, id: JobId) -> Result<u32, DistributionError> {
        self.transition(id, JobState::Cancelled)?;
        let entry = self.transition(id, JobState::Queued)?;
        entry.job.attempt += 1;
        entry.job.deadline_ms = None;
        let attempt = entry.job.attempt;
        self.queue.push_back(id);
        Ok(attempt)
    }

    /// Whether a result for (`id`, `attempt`) would be accepted.
    pub fn check_result(&self, id: JobId, attempt: u32) -> Result<(), RejectReason> {
        let entry = self.entries.get(&id).ok_or(RejectReason::UnknownJob)?;
        match entry.state {
            JobState::Accepted => Err(RejectReason::AlreadyAccepted),
            JobState::Dispatched if entry.job.attempt == attempt => Ok(()),
            JobState::Dispatched => Err(RejectReason::StaleAttempt),
            _ if entry.job.attempt != attempt => Err(RejectReason::StaleAttempt),
            _ => Err(RejectReason::NotDispatched),
        }
    }

    /// Records the result when it belongs to the live attempt.
    pub fn accept(&mut self, result: JobResult) -> Result<(), RejectReason> {
        self.check_result(result.job_id, result.attempt)?;
        let entry = self
            .transition(result.job_id, JobState::Accepted)
            .expect("checked above");
        entry.accepted = Some(result);
        Ok(())
    }

    /// Every accepted result with its job, in job-id order.
    pub fn accepted_results(&self) -> impl Iterator<Item = (&Job, &JobResult)> {
        self.entries
            .values()
            .filter_map(|e| e.accepted.as_ref().map(|r| (&e.job, r)))
    }
}
