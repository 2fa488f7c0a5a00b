use super::job::{Job, JobResult, WorkerId};
use super::wire::{Message, WireResult};
use super::DistributionError;
use crate::fitness::FitnessId;
use crate::moo::{DecisionVector, Problem, WeightVector};

/// Evaluates every genome of the job in order.
pub fn do_job(
    worker_id: WorkerId,
    job: &Job,
    problem: &Problem,
    weights: &WeightVector,
    completed_at_ms: u64,
) -> Result<JobResult, DistributionError> {
    let evaluations = job
        .genomes
        .iter()
        .map(|g| job.fitness_id.evaluate(problem, weights, g))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DistributionError::EvaluationFailure(e.to_string()))?;
    Ok(JobResult {
        job_id: job.job_id,
        attempt: job.attempt,
        worker_id,
        evaluations,
        completed_at_ms,
    })
}

/// Worker-side handling of a `JOB_ASSIGN`: replies with `JOB_RESULT`, or
/// `JOB_FAILED` when the payload is unusable or evaluation fails. Returns
/// `None` for any other message.
pub fn handle_assignment(
    worker_id: WorkerId,
    message: &Message,
    problem: &Problem,
    weights: &WeightVector,
) -> Option<Message> {
    let Message::JobAssign { job_id, attempt, fitness_id, genomes, .. } = message else {
        return None;
    };
    let failed = |reason: String| Message::JobFailed {
        job_id: job_id.clone(),
        attempt: *attempt,
        worker_id: worker_id.to_string(),
        reason,
    };
    let fitness: FitnessId = match fitness_id.parse() {
        Ok(f) => f,
        Err(e) => return Some(failed(format!("{e}"))),
    };
    let mut results = Vec::with_capacity(genomes.len());
    for g in genomes {
        let evaluation = DecisionVector::new(g.clone())
            .and_then(|g| fitness.evaluate(problem, weights, &g));
        match evaluation {
            Ok(e) => results.push(WireResult::from(&e)),
            Err(e) => return Some(failed(e.to_string())),
        }
    }
    Some(Message::JobResult {
        job_id: job_id.clone(),
        attempt: *attempt,
        worker_id: worker_id.to_string(),
        results,
    })
}
