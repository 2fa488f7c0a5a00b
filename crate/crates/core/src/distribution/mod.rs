//! Master/worker distribution of fitness evaluation.
//!
//! The master side is a sans-IO state machine ([`Master`]): it consumes
//! messages and watchdog ticks stamped with a caller-supplied time and
//! returns the messages to send. The simulator and the TCP transport both
//! drive the same machine.

mod job;
mod master;
mod repository;
pub mod wire;
mod worker;

use std::ops::Range;

use thiserror::Error;

pub use job::{Job, JobId, JobResult, JobState, JobTable, RejectReason, WorkerId};
pub use master::{BatchStats, Collected, Master, Timing};
pub use repository::{dispatch, WorkerRecord, WorkerRepository, WorkerStatus};
pub use wire::Message;
pub use worker::{do_job, handle_assignment};

use crate::fitness::Evaluation;
use crate::moo::DecisionVector;
use crate::reasoning::Action;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("duplicate job id {0}")]
    DuplicateJobId(JobId),
    #[error("job {0} has no genomes")]
    EmptyJob(JobId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("illegal transition for {job}: {from:?} -> {to:?}")]
    IllegalTransition { job: JobId, from: JobState, to: JobState },
    #[error("all workers suspended with {queued} job(s) still queued")]
    AllWorkersSuspended { queued: usize },
    #[error("no workers registered")]
    NoWorkers,
    #[error("rule decision {action:?} cannot be applied: {context}")]
    UnsafeDecision { action: Action, context: String },
    #[error("evaluation failed: {0}")]
    EvaluationFailure(String),
    #[error("no accepted results")]
    NoResults,
    #[error("wire: {0}")]
    Wire(String),
    #[error("a batch is already in progress")]
    BatchInProgress,
    #[error("transport: {0}")]
    Transport(String),
}

/// Message addressed to one worker.
impl From<wire::WireError> for DistributionError {
    fn from(e: wire::WireError) -> Self {
        DistributionError::Wire(e.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub to: WorkerId,
    pub message: Message,
}

/// Index ranges splitting `n` items into `min(k, n)` contiguous slices whose
/// sizes differ by at most one, larger slices first.
pub fn partition_ranges(n: usize, k: usize) -> Vec<Range<usize>> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let s = k.min(n);
    let (base, extra) = (n / s, n % s);
    let mut start = 0;
    (0..s)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn partition_population(genomes: &[DecisionVector], k: usize) -> Vec<&[DecisionVector]> {
    partition_ranges(genomes.len(), k)
        .into_iter()
        .map(|r| &genomes[r])
        .collect()
}

/// The winning individual and where it was evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSolution {
    pub generation: u32,
    pub job_id: JobId,
    pub index: usize,
    pub genome: DecisionVector,
    pub evaluation: Evaluation,
}

/// Lowest fitness among feasible evaluations, else lowest total violation;
/// ties go to the earliest (generation, job id, genome index).
pub fn best_solution(table: &JobTable) -> Result<BestSolution, DistributionError> {
    table
        .accepted_results()
        .flat_map(|(job, result)| {
            job.genomes
                .iter()
                .zip(&result.evaluations)
                .enumerate()
                .map(move |(index, (genome, evaluation))| (job, index, genome, evaluation))
        })
        .min_by(|a, b| {
            a.3.rank_cmp(b.3)
                .then((a.0.generation, a.0.job_id, a.1).cmp(&(b.0.generation, b.0.job_id, b.1)))
        })
        .map(|(job, index, genome, evaluation)| BestSolution {
            generation: job.generation,
            job_id: job.job_id,
            index,
            genome: genome.clone(),
            evaluation: evaluation.clone(),
        })
        .ok_or(DistributionError::NoResults)
}
