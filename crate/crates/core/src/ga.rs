//! Generational GA: uniform initialization, truncation selection,
//! single-point crossover, Gaussian per-gene mutation and elitism.
//!
//! The loop owns the only random stream. Fitness evaluation is delegated to
//! an [`EvaluationProvider`] that receives a whole generation at once and
//! must return results aligned with its input, so a distributed provider
//! cannot change the trajectory of a seeded run.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{Evaluation, FitnessId};
use crate::moo::{DecisionVector, ObjectiveVector, Problem, WeightVector};

pub const DEFAULT_POPULATION: usize = 50;
pub const DEFAULT_GENERATIONS: u32 = 100;
pub const DEFAULT_SELECTION_FRACTION: f64 = 0.5;
pub const DEFAULT_MUTATION_RATE: f64 = 0.1;
/// Mutation step as a fraction of each variable's bound width when no
/// explicit sigma is configured.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.05;
pub const DEFAULT_ELITISM: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaError {
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("population member {0} has no fitness")]
    UnevaluatedPopulation(usize),
    #[error("genome length mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("evaluator returned {found} results for {expected} genomes")]
    MisalignedResults { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: u32,
    pub selection_fraction: f64,
    pub mutation_rate: f64,
    /// Gaussian step in problem units. `None` means 5% of each bound width.
    pub mutation_sigma: Option<f64>,
    pub elitism_count: usize,
    pub seed: u64,
    pub weights: WeightVector,
}

impl GaConfig {
    /// Defaults for a problem with `objectives` objectives (uniform weights).
    pub fn with_objectives(objectives: usize) -> Self {
        Self {
            population_size: DEFAULT_POPULATION,
            generations: DEFAULT_GENERATIONS,
            selection_fraction: DEFAULT_SELECTION_FRACTION,
            mutation_rate: DEFAULT_MUTATION_RATE,
            mutation_sigma: None,
            elitism_count: DEFAULT_ELITISM,
            seed: 0,
            weights: WeightVector::uniform(objectives),
        }
    }

    /// `max(2, floor(selection_fraction · population_size))`, capped at the
    /// population size.
    pub fn selection_count(&self) -> usize {
        let c = (self.selection_fraction * self.population_size as f64).floor() as usize;
        c.max(2).min(self.population_size)
    }

    pub fn validate(&self, problem: &Problem) -> Result<(), GaError> {
        let bad = |m: &str| Err(GaError::InvalidConfig(m.to_string()));
        if self.population_size < 2 {
            return bad("population_size must be >= 2");
        }
        if self.generations < 1 {
            return bad("generations must be >= 1");
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return bad("selection_fraction must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate must be in [0, 1]");
        }
        if let Some(s) = self.mutation_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad("mutation_sigma must be > 0");
            }
        }
        if self.elitism_count >= self.population_size {
            return bad("elitism_count must be < population_size");
        }
        if self.weights.len() != problem.n_objectives() {
            return Err(GaError::InvalidConfig(format!(
                "{} weights for {} objectives",
                self.weights.len(),
                problem.n_objectives()
            )));
        }
        Ok(())
    }

    fn sigma_for(&self, problem: &Problem, gene: usize) -> f64 {
        self.mutation_sigma
            .unwrap_or_else(|| DEFAULT_SIGMA_FRACTION * problem.bounds()[gene].width())
    }
}

/// Seeded generator owned by the GA loop.
#[derive(Debug, Clone)]
pub struct GaRng(ChaCha8Rng);

impl GaRng {
    pub fn seed_from(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    fn index(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genome: DecisionVector,
    pub evaluation: Option<Evaluation>,
    pub birth_generation: u32,
}

impl Individual {
    pub fn new(genome: DecisionVector, birth_generation: u32) -> Self {
        Self { genome, evaluation: None, birth_generation }
    }

    pub fn fitness(&self) -> Option<f64> {
        self.evaluation.as_ref().map(|e| e.fitness)
    }

    pub fn objectives(&self) -> Option<&ObjectiveVector> {
        self.evaluation.as_ref().map(|e| &e.objectives)
    }

    pub fn is_feasible(&self) -> Option<bool> {
        self.evaluation.as_ref().map(|e| e.feasible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<Individual>,
    pub generation: u32,
}

impl Population {
    fn fitnesses(&self) -> Result<Vec<f64>, GaError> {
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| m.fitness().ok_or(GaError::UnevaluatedPopulation(i)))
            .collect()
    }

    pub fn genomes(&self) -> Vec<DecisionVector> {
        self.members.iter().map(|m| m.genome.clone()).collect()
    }
}

/// Evaluates whole generations. Results must be aligned with `genomes`.
pub trait EvaluationProvider {
    fn evaluate_batch(
        &mut self,
        generation: u32,
        genomes: &[DecisionVector],
        problem: &Problem,
        weights: &WeightVector,
    ) -> crate::Result<Vec<Evaluation>>;
}

/// In-process sequential evaluator.
#[derive(Debug, Clone, Copy)]
pub struct LocalEvaluator {
    pub fitness: FitnessId,
}

impl LocalEvaluator {
    pub fn new(fitness: FitnessId) -> Self {
        Self { fitness }
    }
}

impl Default for LocalEvaluator {
    fn default() -> Self {
        Self::new(FitnessId::WeightedSum)
    }
}

impl EvaluationProvider for LocalEvaluator {
    fn evaluate_batch(
        &mut self,
        _generation: u32,
        genomes: &[DecisionVector],
        problem: &Problem,
        weights: &WeightVector,
    ) -> crate::Result<Vec<Evaluation>> {
        genomes
            .iter()
            .map(|g| self.fitness.evaluate(problem, weights, g).map_err(Into::into))
            .collect()
    }
}

pub fn random_population(
    problem: &Problem,
    config: &GaConfig,
    rng: &mut GaRng,
) -> Result<Population, GaError> {
    config.validate(problem)?;
    let members = (0..config.population_size)
        .map(|_| {
            let values = problem
                .bounds()
                .iter()
                .map(|b| rng.0.random_range(b.lo..=b.hi))
                .collect();
            Individual::new(DecisionVector::new(values).expect("bounds are finite"), 0)
        })
        .collect();
    Ok(Population { members, generation: 0 })
}

/// Indices of the truncation-selected parents, ordered by (fitness, index).
pub fn select_parent_indices(
    population: &Population,
    config: &GaConfig,
) -> Result<Vec<usize>, GaError> {
    let fitness = population.fitnesses()?;
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    let c = config.selection_count().min(order.len());
    order.truncate(c);
    Ok(order)
}

pub fn select_parents<'p>(
    population: &'p Population,
    config: &GaConfig,
) -> Result<Vec<&'p Individual>, GaError> {
    Ok(select_parent_indices(population, config)?
        .into_iter()
        .map(|i| &population.members[i])
        .collect())
}

/// `a[0..cut] ++ b[cut..]`.
pub fn crossover_at(a: &DecisionVector, b: &DecisionVector, cut: usize) -> Result<DecisionVector, GaError> {
    if a.len() != b.len() {
        return Err(GaError::DimensionMismatch(a.len(), b.len()));
    }
    let cut = cut.min(a.len());
    let mut child = a.as_slice()[..cut].to_vec();
    child.extend_from_slice(&b.as_slice()[cut..]);
    Ok(DecisionVector::new(child).expect("parents are finite"))
}

/// Single-point crossover with the cut drawn from `1..n` (`n = 1` copies `a`).
pub fn crossover(a: &Individual, b: &Individual, rng: &mut GaRng) -> Result<DecisionVector, GaError> {
    let n = a.genome.len();
    if n != b.genome.len() {
        return Err(GaError::DimensionMismatch(n, b.genome.len()));
    }
    if n <= 1 {
        return Ok(a.genome.clone());
    }
    let cut = rng.0.random_range(1..n);
    crossover_at(&a.genome, &b.genome, cut)
}

pub fn mutate(
    genome: &DecisionVector,
    problem: &Problem,
    config: &GaConfig,
    rng: &mut GaRng,
) -> DecisionVector {
    let values = genome
        .as_slice()
        .iter()
        .zip(problem.bounds())
        .enumerate()
        .map(|(i, (&v, bounds))| {
            if rng.0.random::<f64>() < config.mutation_rate {
                let z: f64 = rng.0.sample(StandardNormal);
                bounds.clamp(v + z * config.sigma_for(problem, i))
            } else {
                v
            }
        })
        .collect();
    DecisionVector::new(values).expect("clamped genes are finite")
}

fn evaluate_into<E>(
    members: &mut [Individual],
    generation: u32,
    problem: &Problem,
    weights: &WeightVector,
    evaluator: &mut E,
    keep_existing: bool,
) -> crate::Result<()>
where
    E: EvaluationProvider + ?Sized,
{
    let genomes: Vec<DecisionVector> = members.iter().map(|m| m.genome.clone()).collect();
    let results = evaluator.evaluate_batch(generation, &genomes, problem, weights)?;
    if results.len() != members.len() {
        return Err(GaError::MisalignedResults {
            expected: members.len(),
            found: results.len(),
        }
        .into());
    }
    for (m, r) in members.iter_mut().zip(results) {
        if !(keep_existing && m.evaluation.is_some()) {
            m.evaluation = Some(r);
        }
    }
    Ok(())
}

/// Evaluates every member of a freshly initialized population.
pub fn evaluate_population<E>(
    population: &mut Population,
    problem: &Problem,
    config: &GaConfig,
    evaluator: &mut E,
) -> crate::Result<()>
where
    E: EvaluationProvider + ?Sized,
{
    evaluate_into(
        &mut population.members,
        population.generation,
        problem,
        &config.weights,
        evaluator,
        false,
    )
}

/// Produces the next evaluated generation.
///
/// The whole new population, elites included, is sent to the evaluator so
/// every generation is persisted in full. Elites keep their copied
/// evaluation.
pub fn step_generation<E>(
    population: &Population,
    problem: &Problem,
    config: &GaConfig,
    rng: &mut GaRng,
    evaluator: &mut E,
) -> crate::Result<Population>
where
    E: EvaluationProvider + ?Sized,
{
    let pool = select_parents(population, config)?;
    let next_gen = population.generation + 1;

    let mut members: Vec<Individual> = Vec::with_capacity(config.population_size);
    if config.elitism_count > 0 {
        let fitness = population.fitnesses()?;
        let mut order: Vec<usize> = (0..fitness.len()).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
        members.extend(
            order
                .into_iter()
                .take(config.elitism_count)
                .map(|i| population.members[i].clone()),
        );
    }

    while members.len() < config.population_size {
        let a = rng.index(pool.len());
        let mut b = rng.index(pool.len());
        if b == a && pool.len() > 1 {
            b = rng.index(pool.len());
        }
        let child = crossover(pool[a], pool[b], rng)?;
        let child = mutate(&child, problem, config, rng);
        members.push(Individual::new(child, next_gen));
    }

    evaluate_into(&mut members, next_gen, problem, &config.weights, evaluator, true)?;
    Ok(Population { members, generation: next_gen })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: u32,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub feasible_count: usize,
}

impl GenerationStats {
    fn of(population: &Population) -> Result<Self, GaError> {
        let fitness = population.fitnesses()?;
        let best = fitness.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = fitness.iter().sum::<f64>() / fitness.len() as f64;
        let feasible_count = population
            .members
            .iter()
            .filter(|m| m.is_feasible() == Some(true))
            .count();
        Ok(Self {
            generation: population.generation,
            best_fitness: best,
            mean_fitness: mean,
            feasible_count,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Best individual ever observed, feasibility first.
    pub best: Individual,
    /// Generation in which `best` was first observed.
    pub best_generation: u32,
    /// One row per generation, generation 0 included.
    pub history: Vec<GenerationStats>,
    pub final_population: Population,
}

pub fn run<E>(problem: &Problem, config: &GaConfig, evaluator: &mut E) -> crate::Result<RunOutcome>
where
    E: EvaluationProvider + ?Sized,
{
    let mut rng = GaRng::seed_from(config.seed);
    let mut population = random_population(problem, config, &mut rng)?;
    evaluate_population(&mut population, problem, config, evaluator)?;

    let mut history = vec![GenerationStats::of(&population)?];
    let mut best = best_of(&population)?;

    for _ in 0..config.generations {
        population = step_generation(&population, problem, config, &mut rng, evaluator)?;
        history.push(GenerationStats::of(&population)?);
        let candidate = best_of(&population)?;
        let current = best.1.evaluation.as_ref().expect("evaluated");
        let challenger = candidate.1.evaluation.as_ref().expect("evaluated");
        if challenger.rank_cmp(current).is_lt() {
            best = candidate;
        }
    }

    Ok(RunOutcome {
        best: best.1,
        best_generation: best.0,
        history,
        final_population: population,
    })
}

fn best_of(population: &Population) -> Result<(u32, Individual), GaError> {
    population.fitnesses()?;
    let best = population
        .members
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            let (ea, eb) = (a.evaluation.as_ref().unwrap(), b.evaluation.as_ref().unwrap());
            ea.rank_cmp(eb).then(ia.cmp(ib))
        })
        .map(|(_, m)| m.clone())
        .expect("population is non-empty");
    Ok((population.generation, best))
}
