//! Line-delimited JSON messages exchanged between master and workers.
//!
//! One object per line, UTF-8. Unknown fields are ignored; an unknown
//! `type` is a decode error.

use serde::{Deserialize, Serialize};

use crate::fitness::Evaluation;
use crate::moo::ObjectiveVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResult {
    pub objectives: Vec<f64>,
    pub fitness: f64,
    pub feasible: bool,
    pub violation: f64,
}

impl From<&Evaluation> for WireResult {
    fn from(e: &Evaluation) -> Self {
        Self {
            objectives: e.objectives.as_slice().to_vec(),
            fitness: e.fitness,
            feasible: e.feasible,
            violation: e.violation,
        }
    }
}

impl TryFrom<WireResult> for Evaluation {
    type Error = crate::moo::MooError;

    fn try_from(w: WireResult) -> Result<Self, Self::Error> {
        Ok(Evaluation {
            objectives: ObjectiveVector::new(w.objectives)?,
            fitness: w.fitness,
            feasible: w.feasible,
            violation: w.violation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        worker_id: String,
    },
    JobAssign {
        job_id: String,
        attempt: u32,
        generation: u32,
        fitness_id: String,
        genomes: Vec<Vec<f64>>,
    },
    JobResult {
        job_id: String,
        attempt: u32,
        worker_id: String,
        results: Vec<WireResult>,
    },
    /// Worker could not evaluate its job; the master treats it as overdue.
    JobFailed {
        job_id: String,
        attempt: u32,
        worker_id: String,
        reason: String,
    },
    Suspend {
        worker_id: String,
    },
    Resume {
        job_id: String,
        new_deadline_ms: u64,
    },
    Heartbeat {
        worker_id: String,
        sim_time_ms: u64,
    },
}

#[derive(Debug, thiserror::Error)]
#[error("bad message: {0}")]
pub struct WireError(pub String);

/// Serializes without the trailing newline.
pub fn encode(message: &Message) -> String {
    serde_json::to_string(message).expect("messages always serialize")
}

pub fn decode(line: &str) -> Result<Message, WireError> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| WireError(e.to_string()))
}
