//! Discrete-event simulation of the worker pool on a virtual clock.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::wire::{self, Message};
use crate::distribution::{handle_assignment, DistributionError, Envelope, Master, Timing, WorkerId};
use crate::experiment::ConfigError;
use crate::fitness::{Evaluation, FitnessId};
use crate::ga::EvaluationProvider;
use crate::moo::{DecisionVector, Problem, WeightVector};

pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;
pub const DEFAULT_LATENCY_MS: (u64, u64) = (1, 5);
pub const DEFAULT_PER_EVAL_COST_MS: u64 = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("livelock detected: more than {cap} events processed")]
    LivelockDetected { cap: u64 },
}

/// Event queue ordered by (time, insertion order).
#[derive(Debug, Clone)]
pub struct VirtualClock<E> {
    now_ms: u64,
    next_seq: u64,
    processed: u64,
    queue: BTreeMap<(u64, u64), E>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        Self { now_ms: 0, next_seq: 0, processed: 0, queue: BTreeMap::new() }
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Events popped so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Schedules `event` at `time_ms`, or now if that is in the past.
    pub fn schedule_at(&mut self, time_ms: u64, event: E) {
        let t = time_ms.max(self.now_ms);
        self.queue.insert((t, self.next_seq), event);
        self.next_seq += 1;
    }

    pub fn schedule_in(&mut self, delay_ms: u64, event: E) {
        self.schedule_at(self.now_ms + delay_ms, event);
    }

    /// Pops the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(u64, E)> {
        let ((t, _), e) = self.queue.pop_first()?;
        self.now_ms = t;
        self.processed += 1;
        Some((t, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Pops events until the queue is empty or `handler` stops. Returns the
/// clock time at the end.
pub fn simulate<E, F>(clock: &mut VirtualClock<E>, cap: u64, mut handler: F) -> crate::Result<u64>
where
    F: FnMut(&mut VirtualClock<E>, E) -> crate::Result<Flow>,
{
    let mut handled = 0u64;
    while let Some((_, event)) = clock.pop() {
        handled += 1;
        if handled > cap {
            return Err(SimError::LivelockDetected { cap }.into());
        }
        if handler(clock, event)? == Flow::Stop {
            break;
        }
    }
    Ok(clock.now_ms())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTrigger {
    /// The worker's n-th assignment, counting from 1.
    JobOrdinal(u32),
    /// Any evaluation still running at this simulated time.
    AtTime(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// `None` never completes; `Some(d)` completes `d` ms late.
    Stall { duration_ms: Option<u64> },
    /// The result is delivered twice.
    DuplicateResult,
}

/// Injected fault, written `<worker>:<ordinal>[:<ms>|:dup]` or
/// `<worker>@<time_ms>[:<ms>|:dup]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fault {
    pub worker: WorkerId,
    pub trigger: FaultTrigger,
    pub kind: FaultKind,
}

impl Fault {
    pub fn stall_on(worker: u32, ordinal: u32) -> Self {
        Self {
            worker: WorkerId(worker),
            trigger: FaultTrigger::JobOrdinal(ordinal),
            kind: FaultKind::Stall { duration_ms: None },
        }
    }

    /// True when the fault makes an evaluation never complete.
    pub fn is_permanent_stall(&self) -> bool {
        self.kind == FaultKind::Stall { duration_ms: None }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.trigger {
            FaultTrigger::JobOrdinal(n) => write!(f, "{}:{n}", self.worker.0)?,
            FaultTrigger::AtTime(t) => write!(f, "{}@{t}", self.worker.0)?,
        }
        match self.kind {
            FaultKind::Stall { duration_ms: None } => Ok(()),
            FaultKind::Stall { duration_ms: Some(d) } => write!(f, ":{d}"),
            FaultKind::DuplicateResult => write!(f, ":dup"),
        }
    }
}

impl FromStr for Fault {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Invalid(format!("bad fault `{s}`, expected worker:ordinal[:ms|:dup]"));
        let (head, kind) = match s.matches(':').count() {
            0 | 1 if s.contains('@') => match s.split_once(':') {
                Some((h, k)) => (h, Some(k)),
                None => (s, None),
            },
            1 => (s, None),
            2 => {
                let (h, k) = s.rsplit_once(':').ok_or_else(bad)?;
                (h, Some(k))
            }
            _ => return Err(bad()),
        };
        let (worker, trigger) = if let Some((w, t)) = head.split_once('@') {
            (w, FaultTrigger::AtTime(t.parse().map_err(|_| bad())?))
        } else {
            let (w, n) = head.split_once(':').ok_or_else(bad)?;
            let n: u32 = n.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            (w, FaultTrigger::JobOrdinal(n))
        };
        let worker: u32 = worker.trim_start_matches('w').parse().map_err(|_| bad())?;
        if worker == 0 {
            return Err(bad());
        }
        let kind = match kind {
            None => FaultKind::Stall { duration_ms: None },
            Some("dup") => FaultKind::DuplicateResult,
            Some(d) => FaultKind::Stall { duration_ms: Some(d.parse().map_err(|_| bad())?) },
        };
        Ok(Fault { worker: WorkerId(worker), trigger, kind })
    }
}

impl TryFrom<String> for Fault {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Fault> for String {
    fn from(f: Fault) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub workers: u32,
    pub per_eval_cost_ms: u64,
    /// Uniform (min, max) latency of every message, each way.
    pub latency_ms: (u64, u64),
    pub faults: Vec<Fault>,
    pub sim_seed: u64,
    /// Jobs per generation. `None` means one per worker.
    pub slices_per_batch: Option<usize>,
    /// `None` derives the timeout from slice size, cost and latency.
    pub job_timeout_ms: Option<u64>,
    pub event_cap: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            per_eval_cost_ms: DEFAULT_PER_EVAL_COST_MS,
            latency_ms: DEFAULT_LATENCY_MS,
            faults: Vec::new(),
            sim_seed: 0,
            slices_per_batch: None,
            job_timeout_ms: None,
            event_cap: DEFAULT_EVENT_CAP,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        if self.latency_ms.0 > self.latency_ms.1 {
            return Err(ConfigError::Invalid(format!(
                "latency min {} exceeds max {}",
                self.latency_ms.0, self.latency_ms.1
            )));
        }
        if self.slices_per_batch == Some(0) {
            return Err(ConfigError::Invalid("slices_per_batch must be >= 1".into()));
        }
        if self.job_timeout_ms == Some(0) {
            return Err(ConfigError::Invalid("job_timeout_ms must be >= 1".into()));
        }
        if let Some(f) = self.faults.iter().find(|f| f.worker.0 > self.workers) {
            return Err(ConfigError::Invalid(format!(
                "fault `{f}` names a worker outside 1..={}",
                self.workers
            )));
        }
        Ok(())
    }

    pub fn slices(&self, population: usize) -> usize {
        self.slices_per_batch
            .unwrap_or(self.workers as usize)
            .clamp(1, population.max(1))
    }

    /// `max(1, 4 · largest slice · cost + 2 · max latency)` unless set.
    pub fn timing(&self, population: usize) -> Timing {
        let slices = self.slices(population);
        let max_slice = population.div_ceil(slices) as u64;
        let timeout = self
            .job_timeout_ms
            .unwrap_or((4 * max_slice * self.per_eval_cost_ms + 2 * self.latency_ms.1).max(1));
        Timing::from_timeout(timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Endpoint {
    Master,
    Worker(WorkerId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Deliver { to: Endpoint, line: String },
    EvalDone { worker: WorkerId },
    Tick { epoch: u64 },
}

#[derive(Debug, Default)]
struct SimWorker {
    assignments: u32,
    current: Option<Message>,
    duplicate_next: bool,
    failed: bool,
}

/// Evaluation provider that runs each batch through a [`Master`] and
/// simulated workers, with every message passing through the wire codec.
pub struct SimulatedCluster {
    config: SimConfig,
    master: Master,
    clock: VirtualClock<Event>,
    rng: ChaCha8Rng,
    workers: BTreeMap<WorkerId, SimWorker>,
    faults: Vec<(Fault, bool)>,
    fitness: Option<FitnessId>,
    epoch: u64,
    last_completion_ms: u64,
}

impl fmt::Debug for SimulatedCluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulatedCluster")
            .field("config", &self.config)
            .field("master", &self.master)
            .field("now_ms", &self.clock.now_ms())
            .finish()
    }
}

impl SimulatedCluster {
    /// Registers `config.workers` workers with `master` at time 0.
    pub fn new(config: SimConfig, mut master: Master) -> crate::Result<Self> {
        config.validate()?;
        let mut workers = BTreeMap::new();
        for i in 1..=config.workers {
            let id = WorkerId(i);
            let line = wire::encode(&Message::Register { worker_id: id.to_string() });
            master.handle(wire::decode(&line)?, 0)?;
            workers.insert(id, SimWorker::default());
        }
        let faults = config.faults.iter().map(|f| (*f, false)).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.sim_seed),
            config,
            master,
            clock: VirtualClock::new(),
            workers,
            faults,
            fitness: None,
            epoch: 0,
            last_completion_ms: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    pub fn master_mut(&mut self) -> &mut Master {
        &mut self.master
    }

    pub fn into_master(self) -> Master {
        self.master
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Completion time of the most recent batch.
    pub fn last_completion_ms(&self) -> u64 {
        self.last_completion_ms
    }

    pub fn fitness(&self) -> Option<FitnessId> {
        self.fitness
    }

    /// Chooses the fitness function through the rule table.
    pub fn select_fitness(&mut self, problem: &Problem) -> crate::Result<FitnessId> {
        let id = self.master.select_fitness(problem, self.clock.now_ms())?;
        self.fitness = Some(id);
        Ok(id)
    }

    fn latency(&mut self) -> u64 {
        let (lo, hi) = self.config.latency_ms;
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        }
    }

    fn send(&mut self, clock: &mut VirtualClock<Event>, envelopes: Vec<Envelope>) {
        for env in envelopes {
            let delay = self.latency();
            clock.schedule_in(
                delay,
                Event::Deliver { to: Endpoint::Worker(env.to), line: wire::encode(&env.message) },
            );
        }
    }

    fn tick_interval(&self) -> u64 {
        (self.master.timing().job_timeout_ms / 4).max(1)
    }

    /// Completion delay for a job of `size` genomes started at `now`, after
    /// faults. `None` means it never completes.
    fn completion_delay(&mut self, worker: WorkerId, size: usize, now: u64) -> Option<u64> {
        let ordinal = self.workers[&worker].assignments;
        let mut delay = Some(size as u64 * self.config.per_eval_cost_ms);
        let mut duplicate = false;
        for (fault, used) in self.faults.iter_mut().filter(|(f, _)| f.worker == worker) {
            if *used {
                continue;
            }
            let hit = match fault.trigger {
                FaultTrigger::JobOrdinal(n) => n == ordinal,
                FaultTrigger::AtTime(t) => delay.is_none_or(|d| now + d >= t),
            };
            if !hit {
                continue;
            }
            match fault.kind {
                FaultKind::Stall { duration_ms: None } => {
                    delay = None;
                    // a worker that dies at a time stays dead
                    *used = matches!(fault.trigger, FaultTrigger::JobOrdinal(_));
                }
                FaultKind::Stall { duration_ms: Some(d) } => {
                    delay = delay.map(|x| x + d);
                    *used = true;
                }
                FaultKind::DuplicateResult => {
                    duplicate = true;
                    *used = true;
                }
            }
        }
        if duplicate {
            self.workers.get_mut(&worker).expect("known worker").duplicate_next = true;
        }
        delay
    }

    fn start_job(&mut self, clock: &mut VirtualClock<Event>, worker: WorkerId) {
        let size = match &self.workers[&worker].current {
            Some(Message::JobAssign { genomes, .. }) => genomes.len(),
            _ => return,
        };
        if let Some(d) = self.completion_delay(worker, size, clock.now_ms()) {
            clock.schedule_in(d, Event::EvalDone { worker });
        }
    }

    fn on_worker_message(&mut self, clock: &mut VirtualClock<Event>, worker: WorkerId, message: Message) {
        let w = self.workers.get_mut(&worker).expect("known worker");
        match message {
            Message::JobAssign { .. } => {
                w.assignments += 1;
                w.failed = false;
                w.current = Some(message);
                self.start_job(clock, worker);
            }
            Message::Resume { job_id, .. } => {
                let same_job =
                    matches!(&w.current, Some(Message::JobAssign { job_id: j, .. }) if *j == job_id);
                if same_job && w.failed {
                    w.failed = false;
                    self.start_job(clock, worker);
                }
            }
            _ => {}
        }
    }

    fn on_eval_done(
        &mut self,
        clock: &mut VirtualClock<Event>,
        worker: WorkerId,
        problem: &Problem,
        weights: &WeightVector,
    ) {
        let w = self.workers.get_mut(&worker).expect("known worker");
        let Some(assign) = w.current.take() else {
            return;
        };
        let reply = handle_assignment(worker, &assign, problem, weights).expect("assignment");
        let copies = if std::mem::take(&mut w.duplicate_next) { 2 } else { 1 };
        if matches!(reply, Message::JobFailed { .. }) {
            w.failed = true;
            w.current = Some(assign);
        }
        let line = wire::encode(&reply);
        for _ in 0..copies {
            let delay = self.latency();
            clock.schedule_in(delay, Event::Deliver { to: Endpoint::Master, line: line.clone() });
        }
    }

    fn step(
        &mut self,
        clock: &mut VirtualClock<Event>,
        event: Event,
        problem: &Problem,
        weights: &WeightVector,
    ) -> crate::Result<Flow> {
        let now = clock.now_ms();
        match event {
            Event::Deliver { to: Endpoint::Master, line } => {
                let out = self.master.handle(wire::decode(&line)?, now)?;
                self.send(clock, out);
                let out = self.master.dispatch(now);
                self.send(clock, out);
            }
            Event::Deliver { to: Endpoint::Worker(id), line } => {
                self.on_worker_message(clock, id, wire::decode(&line)?);
            }
            Event::EvalDone { worker } => self.on_eval_done(clock, worker, problem, weights),
            Event::Tick { epoch } => {
                if epoch != self.epoch {
                    return Ok(Flow::Continue);
                }
                let (_, out) = self.master.watchdog_tick(now)?;
                self.send(clock, out);
                let out = self.master.dispatch(now);
                self.send(clock, out);
                clock.schedule_in(self.tick_interval(), Event::Tick { epoch });
            }
        }
        if self.master.batch_complete() {
            return Ok(Flow::Stop);
        }
        if self.master.stranded() {
            return Err(DistributionError::AllWorkersSuspended {
                queued: self.master.table().queue_len(),
            }
            .into());
        }
        Ok(Flow::Continue)
    }
}

impl EvaluationProvider for SimulatedCluster {
    fn evaluate_batch(
        &mut self,
        generation: u32,
        genomes: &[DecisionVector],
        problem: &Problem,
        weights: &WeightVector,
    ) -> crate::Result<Vec<Evaluation>> {
        let fitness = match self.fitness {
            Some(f) => f,
            None => self.select_fitness(problem)?,
        };
        let mut clock = std::mem::take(&mut self.clock);
        let result = self.run_batch(&mut clock, generation, genomes, fitness, problem, weights);
        self.clock = clock;
        result
    }
}

impl SimulatedCluster {
    fn run_batch(
        &mut self,
        clock: &mut VirtualClock<Event>,
        generation: u32,
        genomes: &[DecisionVector],
        fitness: FitnessId,
        problem: &Problem,
        weights: &WeightVector,
    ) -> crate::Result<Vec<Evaluation>> {
        let now = clock.now_ms();
        let slices = self.config.slices(genomes.len());
        let timing = self.config.timing(genomes.len());
        self.master.begin_batch(generation, genomes, fitness, slices, timing, now)?;
        self.epoch += 1;
        clock.schedule_in(self.tick_interval(), Event::Tick { epoch: self.epoch });
        let out = self.master.dispatch(now);
        self.send(clock, out);
        let cap = self.config.event_cap;
        let end = simulate(clock, cap, |clock, event| self.step(clock, event, problem, weights))?;
        if !self.master.batch_complete() {
            return Err(DistributionError::Transport("event queue drained before the batch completed".into()).into());
        }
        self.last_completion_ms = end;
        self.master.finish_batch(end)
    }
}
