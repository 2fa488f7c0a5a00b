//! Fitness strategies and the per-genome evaluation payload shared by the
//! local evaluator, the workers and the persistence layer.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::moo::{self, DecisionVector, MooError, ObjectiveVector, Problem, WeightVector};

/// The fitness functions the rule engine can pick between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitnessId {
    /// Single-objective problems: the lone (weighted) objective.
    ScalarDirect,
    /// Weighted sum of all objectives.
    WeightedSum,
    /// Weighted sum; intended for constrained problems where the
    /// feasibility verdict drives best-solution selection.
    WeightedSumFeasibility,
}

impl FitnessId {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitnessId::ScalarDirect => "scalar-direct",
            FitnessId::WeightedSum => "weighted-sum",
            FitnessId::WeightedSumFeasibility => "weighted-sum-feasibility",
        }
    }

    /// Evaluates one genome: objectives, scalar fitness and feasibility.
    pub fn evaluate(
        &self,
        problem: &Problem,
        weights: &WeightVector,
        genome: &DecisionVector,
    ) -> Result<Evaluation, MooError> {
        if *self == FitnessId::ScalarDirect && problem.n_objectives() != 1 {
            return Err(MooError::InvalidProblem(format!(
                "scalar-direct fitness needs exactly one objective, `{}` has {}",
                problem.name(),
                problem.n_objectives()
            )));
        }
        let objectives = problem.evaluate_objectives(genome)?;
        let fitness = moo::scalarize_weighted_sum(weights, &objectives)?;
        if !fitness.is_finite() {
            return Err(MooError::NonFiniteObjective { index: 0 });
        }
        let report = problem.check_feasibility(genome)?;
        Ok(Evaluation {
            objectives,
            fitness,
            feasible: report.is_feasible(),
            violation: report.total_violation(),
        })
    }
}

impl fmt::Display for FitnessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownFitnessId(pub String);

impl fmt::Display for UnknownFitnessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown fitness function `{}`", self.0)
    }
}

impl std::error::Error for UnknownFitnessId {}

impl FromStr for FitnessId {
    type Err = UnknownFitnessId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scalar-direct" => Ok(FitnessId::ScalarDirect),
            "weighted-sum" => Ok(FitnessId::WeightedSum),
            "weighted-sum-feasibility" => Ok(FitnessId::WeightedSumFeasibility),
            other => Err(UnknownFitnessId(other.to_string())),
        }
    }
}

/// What a worker reports back for one genome. This is exactly what travels
/// over the wire, so local and remote evaluation produce equal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub objectives: ObjectiveVector,
    pub fitness: f64,
    pub feasible: bool,
    pub violation: f64,
}

impl Evaluation {
    /// Best-solution ordering: feasible first, then fitness (feasible) or
    /// total violation (infeasible). Callers chain a positional tie-break.
    pub fn rank_cmp(&self, other: &Evaluation) -> Ordering {
        match (self.feasible, other.feasible) {
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            (true, true) => self.fitness.total_cmp(&other.fitness),
            (false, false) => self.violation.total_cmp(&other.violation),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moo::builtin_problem;

    fn eval(fitness: f64, feasible: bool, violation: f64) -> Evaluation {
        Evaluation {
            objectives: ObjectiveVector::new(vec![fitness]).unwrap(),
            fitness,
            feasible,
            violation,
        }
    }

    #[test]
    fn ids_round_trip_through_strings() {
        for id in [FitnessId::ScalarDirect, FitnessId::WeightedSum, FitnessId::WeightedSumFeasibility] {
            assert_eq!(id.as_str().parse::<FitnessId>().unwrap(), id);
            assert_eq!(serde_json::to_string(&id).unwrap(), format!("\"{}\"", id.as_str()));
        }
        assert!("nope".parse::<FitnessId>().is_err());
    }

    #[test]
    fn sphere_optimum_is_zero_and_feasible() {
        let p = builtin_problem("sphere-4").unwrap();
        let e = FitnessId::ScalarDirect
            .evaluate(&p, &WeightVector::uniform(1), &DecisionVector::new(vec![0.0; 4]).unwrap())
            .unwrap();
        assert_eq!(e.fitness, 0.0);
        assert!(e.feasible);
        assert_eq!(e.violation, 0.0);
    }

    #[test]
    fn scalar_direct_rejects_multi_objective() {
        let p = builtin_problem("two-parabolas").unwrap();
        let r = FitnessId::ScalarDirect.evaluate(
            &p,
            &WeightVector::uniform(2),
            &DecisionVector::new(vec![0.0]).unwrap(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn constrained_box_violation_total() {
        let p = builtin_problem("constrained-box").unwrap();
        let w = WeightVector::new(vec![1.0, 1.0]).unwrap();
        let e = FitnessId::WeightedSumFeasibility
            .evaluate(&p, &w, &DecisionVector::new(vec![0.2, 0.3]).unwrap())
            .unwrap();
        assert!(!e.feasible);
        assert!((e.violation - 0.5).abs() < 1e-15);
        assert_eq!(e.fitness, 0.5);
    }

    #[test]
    fn rank_prefers_feasible_then_lower() {
        assert_eq!(eval(3.0, true, 0.0).rank_cmp(&eval(1.0, false, 0.2)), Ordering::Less);
        assert_eq!(eval(1.0, true, 0.0).rank_cmp(&eval(2.0, true, 0.0)), Ordering::Less);
        assert_eq!(eval(0.0, false, 0.5).rank_cmp(&eval(9.0, false, 0.1)), Ordering::Greater);
        assert_eq!(eval(2.0, true, 0.0).rank_cmp(&eval(2.0, true, 0.0)), Ordering::Equal);
    }
}
