//! Master/worker genetic algorithm for multi-objective problems, with
//! rule-driven fitness selection, deadline watchdog, exactly-once result
//! collection and append-only JSONL storage.

pub mod distribution;
pub mod error;
pub mod experiment;
pub mod fitness;
pub mod ga;
pub mod moo;
pub mod persistence;
pub mod reasoning;
pub mod sim;
pub mod tcp;

pub use distribution::{
    best_solution, partition_population, BestSolution, DistributionError, Job, JobId, JobResult,
    JobTable, Master, Message, Timing, WorkerId,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ConfigError, RunConfig, RunMetrics, RunSummary, Transport};
pub use fitness::{Evaluation, FitnessId};
pub use ga::{EvaluationProvider, GaConfig, LocalEvaluator, RunOutcome};
pub use moo::{
    builtin_problem, scalarize_weighted_sum, DecisionVector, FeasibilityReport, MooError,
    ObjectiveVector, Problem, WeightVector,
};
pub use persistence::{JsonlStore, MemoryStore, RecordFilter, ResultRecord, Storage, StorageError};
pub use reasoning::{Action, Decision, FixedRules, LogEntry, ReasoningError, Rule, RuleBook, Trigger};
pub use sim::{Fault, SimConfig, SimError, SimulatedCluster, VirtualClock};
