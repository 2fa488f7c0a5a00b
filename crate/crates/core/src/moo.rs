//! Multi-objective problem model: decision vectors, objectives, constraints,
//! weighted-sum scalarization and the built-in problem registry.
//!
//! Everything here is minimized. A [`Problem`] is immutable once built and
//! cheap to clone (objective and constraint functions are reference counted),
//! so it can be shared with any number of evaluators.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tolerance applied to equality constraints `h_j(x) = 0`.
pub const DEFAULT_EQ_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MooError {
    #[error("over-constrained: {equalities} equality constraints for {vars} decision variables")]
    OverConstrained { vars: usize, equalities: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("objective {index} returned a non-finite value")]
    NonFiniteObjective { index: usize },
    #[error("decision vector contains a non-finite value at position {index}")]
    NonFiniteValue { index: usize },
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid problem definition: {0}")]
    InvalidProblem(String),
}

pub type Result<T, E = MooError> = std::result::Result<T, E>;

/// A candidate solution `x = [x_1, ..., x_n]`. All components are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DecisionVector(Vec<f64>);

impl DecisionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(MooError::NonFiniteValue { index });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for DecisionVector {
    type Error = MooError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DecisionVector> for Vec<f64> {
    fn from(v: DecisionVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for DecisionVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Values of the `k` objectives at one decision vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ObjectiveVector(Vec<f64>);

impl ObjectiveVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(MooError::NonFiniteObjective { index });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ObjectiveVector {
    type Error = MooError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ObjectiveVector> for Vec<f64> {
    fn from(v: ObjectiveVector) -> Self {
        v.0
    }
}

/// Non-negative weights, at least one strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MooError::InvalidWeights("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MooError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(MooError::InvalidWeights(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(Self(weights))
    }

    /// All-ones weights of length `k`.
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = MooError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(v: WeightVector) -> Self {
        v.0
    }
}

/// `Σ w_i · f_i`.
pub fn scalarize_weighted_sum(weights: &WeightVector, objectives: &ObjectiveVector) -> Result<f64> {
    if weights.len() != objectives.len() {
        return Err(MooError::DimensionMismatch {
            expected: weights.len(),
            found: objectives.len(),
        });
    }
    Ok(weights
        .as_slice()
        .iter()
        .zip(objectives.as_slice())
        .map(|(w, f)| w * f)
        .sum())
}

/// Number of free variables left after `equalities` equality constraints.
pub fn degrees_of_freedom(vars: usize, equalities: usize) -> Result<usize> {
    if equalities >= vars {
        return Err(MooError::OverConstrained { vars, equalities });
    }
    Ok(vars - equalities)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    Inequality,
    Equality,
    Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    pub index: usize,
    pub magnitude: f64,
}

/// Result of [`Problem::check_feasibility`]. Feasible iff no violations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn feasible() -> Self {
        Self::default()
    }

    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            violations: violations.into_iter().filter(|v| v.magnitude > 0.0).collect(),
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn total_violation(&self) -> f64 {
        self.violations.iter().fold(0.0, |acc, v| acc + v.magnitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(MooError::InvalidProblem(format!(
                "bad bound interval [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn excess(&self, v: f64) -> f64 {
        if v < self.lo {
            self.lo - v
        } else if v > self.hi {
            v - self.hi
        } else {
            0.0
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A minimization problem with objectives, `g_i(x) ≤ 0`, `h_j(x) = 0` and
/// per-variable bounds.
#[derive(Clone)]
pub struct Problem {
    name: String,
    bounds: Vec<Bounds>,
    objectives: Vec<ScalarFn>,
    inequalities: Vec<ScalarFn>,
    equalities: Vec<ScalarFn>,
    eq_tolerance: f64,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("n_vars", &self.n_vars())
            .field("objectives", &self.objectives.len())
            .field("inequalities", &self.inequalities.len())
            .field("equalities", &self.equalities.len())
            .field("eq_tolerance", &self.eq_tolerance)
            .finish()
    }
}

impl Problem {
    pub fn builder(name: impl Into<String>) -> ProblemBuilder {
        ProblemBuilder {
            name: name.into(),
            bounds: Vec::new(),
            objectives: Vec::new(),
            inequalities: Vec::new(),
            equalities: Vec::new(),
            eq_tolerance: DEFAULT_EQ_TOLERANCE,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_vars(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_objectives(&self) -> usize {
        self.objectives.len()
    }

    pub fn n_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    pub fn n_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn is_constrained(&self) -> bool {
        !self.inequalities.is_empty() || !self.equalities.is_empty()
    }

    pub fn bounds(&self) -> &[Bounds] {
        &self.bounds
    }

    pub fn eq_tolerance(&self) -> f64 {
        self.eq_tolerance
    }

    /// Same problem with a different equality tolerance.
    pub fn with_eq_tolerance(&self, eq_tolerance: f64) -> Result<Self> {
        if !(eq_tolerance >= 0.0 && eq_tolerance.is_finite()) {
            return Err(MooError::InvalidProblem("eq_tolerance must be finite and >= 0".into()));
        }
        Ok(Self {
            eq_tolerance,
            ..self.clone()
        })
    }

    pub fn degrees_of_freedom(&self) -> usize {
        // p < n is enforced at construction.
        self.n_vars() - self.n_equalities()
    }

    fn check_dim(&self, x: &DecisionVector) -> Result<()> {
        if x.len() != self.n_vars() {
            return Err(MooError::DimensionMismatch {
                expected: self.n_vars(),
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn evaluate_objectives(&self, x: &DecisionVector) -> Result<ObjectiveVector> {
        self.check_dim(x)?;
        let values = self.objectives.iter().map(|f| f(x.as_slice())).collect();
        ObjectiveVector::new(values)
    }

    pub fn check_feasibility(&self, x: &DecisionVector) -> Result<FeasibilityReport> {
        self.check_dim(x)?;
        let xs = x.as_slice();
        let mut violations = Vec::new();
        for (index, g) in self.inequalities.iter().enumerate() {
            let v = g(xs);
            let magnitude = if v.is_nan() { f64::INFINITY } else { v.max(0.0) };
            violations.push(Violation { kind: ConstraintKind::Inequality, index, magnitude });
        }
        for (index, h) in self.equalities.iter().enumerate() {
            let v = h(xs);
            let magnitude = if v.is_nan() {
                f64::INFINITY
            } else {
                (v.abs() - self.eq_tolerance).max(0.0)
            };
            violations.push(Violation { kind: ConstraintKind::Equality, index, magnitude });
        }
        for (index, (b, v)) in self.bounds.iter().zip(xs).enumerate() {
            violations.push(Violation { kind: ConstraintKind::Bound, index, magnitude: b.excess(*v) });
        }
        Ok(FeasibilityReport::from_violations(violations))
    }
}

pub struct ProblemBuilder {
    name: String,
    bounds: Vec<Bounds>,
    objectives: Vec<ScalarFn>,
    inequalities: Vec<ScalarFn>,
    equalities: Vec<ScalarFn>,
    eq_tolerance: f64,
}

impl ProblemBuilder {
    pub fn bounds(mut self, lo: f64, hi: f64, count: usize) -> Self {
        for _ in 0..count {
            self.bounds.push(Bounds { lo, hi });
        }
        self
    }

    pub fn bound(mut self, lo: f64, hi: f64) -> Self {
        self.bounds.push(Bounds { lo, hi });
        self
    }

    pub fn objective(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.objectives.push(Arc::new(f));
        self
    }

    /// Adds `g(x) ≤ 0`.
    pub fn inequality(mut self, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.inequalities.push(Arc::new(g));
        self
    }

    /// Adds `h(x) = 0`.
    pub fn equality(mut self, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.equalities.push(Arc::new(h));
        self
    }

    pub fn eq_tolerance(mut self, tol: f64) -> Self {
        self.eq_tolerance = tol;
        self
    }

    pub fn build(self) -> Result<Problem> {
        let n = self.bounds.len();
        if n == 0 {
            return Err(MooError::InvalidProblem("at least one decision variable required".into()));
        }
        if self.objectives.is_empty() {
            return Err(MooError::InvalidProblem("at least one objective required".into()));
        }
        for b in &self.bounds {
            Bounds::new(b.lo, b.hi)?;
        }
        if !(self.eq_tolerance >= 0.0 && self.eq_tolerance.is_finite()) {
            return Err(MooError::InvalidProblem("eq_tolerance must be finite and >= 0".into()));
        }
        degrees_of_freedom(n, self.equalities.len())?;
        Ok(Problem {
            name: self.name,
            bounds: self.bounds,
            objectives: self.objectives,
            inequalities: self.inequalities,
            equalities: self.equalities,
            eq_tolerance: self.eq_tolerance,
        })
    }
}

/// Looks up a problem in the built-in registry.
///
/// * `sphere-N`: `f = Σ x_j²`, `N ≥ 1` variables in `[-10, 10]`.
/// * `two-parabolas`: `f1 = x²`, `f2 = (x - 2)²`, `x ∈ [-5, 5]`.
/// * `constrained-box`: `f1 = x1`, `f2 = x2`, `1 - x1 - x2 ≤ 0`,
///   `x1 - 3 ≤ 0`, `x ∈ [0, 3]²`.
pub fn builtin_problem(name: &str) -> Result<Problem> {
    let unknown = || MooError::UnknownProblem(name.to_string());
    match name {
        "two-parabolas" => Problem::builder(name)
            .bound(-5.0, 5.0)
            .objective(|x| x[0] * x[0])
            .objective(|x| (x[0] - 2.0) * (x[0] - 2.0))
            .build(),
        "constrained-box" => Problem::builder(name)
            .bounds(0.0, 3.0, 2)
            .objective(|x| x[0])
            .objective(|x| x[1])
            .inequality(|x| 1.0 - x[0] - x[1])
            .inequality(|x| x[0] - 3.0)
            .build(),
        _ => {
            let n: usize = name
                .strip_prefix("sphere-")
                .and_then(|s| s.parse().ok())
                .filter(|n| *n >= 1)
                .ok_or_else(unknown)?;
            Problem::builder(name)
                .bounds(-10.0, 10.0, n)
                .objective(|x| x.iter().map(|v| v * v).sum())
                .build()
        }
    }
}
