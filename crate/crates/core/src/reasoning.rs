//! Rule-based plan selection: triggers, prioritized rules, decisions and the
//! Trigger-Rule-Decision log.
//!
//! A [`FixedRules`] set is immutable; every change produces a new set with
//! the next revision number. [`RuleBook`] hands out shared snapshots so an
//! inference that started under one revision finishes under it, while a
//! single writer installs new revisions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::FitnessId;
use crate::moo::Problem;
use crate::persistence::StorageError;

pub const WILDCARD: &str = "*";

pub const KIND_PROBLEM_SUBMITTED: &str = "problem-submitted";
pub const KIND_JOB_OVERDUE: &str = "job-overdue";
pub const KIND_RESULT_RECEIVED: &str = "result-received";

/// The rule table used when no rules file is given.
pub const DEFAULT_RULES_JSON: &str = include_str!("../config/default-rules.json");

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("no rule matches trigger `{0}`")]
    NoApplicableRule(String),
    #[error("duplicate rule id `{0}`")]
    DuplicateRuleId(String),
    #[error("unknown rule id `{0}`")]
    UnknownRuleId(String),
    #[error("malformed decision from rule `{rule_id}`: {reason}")]
    MalformedDecision { rule_id: String, reason: String },
    #[error("invalid rules: {0}")]
    InvalidRules(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

type Result<T, E = ReasoningError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub kind: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl Trigger {
    pub fn new(kind: impl Into<String>) -> Self {
        Self { kind: kind.into(), attributes: BTreeMap::new() }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.attributes.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        for (k, v) in &self.attributes {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// Descriptor raised when a problem is submitted to the server.
pub fn problem_descriptor(problem: &Problem) -> Trigger {
    Trigger::new(KIND_PROBLEM_SUBMITTED)
        .with("problem", problem.name())
        .with("objectives", problem.n_objectives())
        .with("constrained", problem.is_constrained())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    SelectFitness,
    Resume,
    SuspendReassign,
    AcceptResult,
    RejectDuplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

impl Decision {
    pub fn new(action: Action) -> Self {
        Self { action, parameters: BTreeMap::new() }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.parameters.insert(key.into(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    /// Lower wins.
    pub priority: i64,
    pub pattern: Trigger,
    pub decision: Decision,
}

impl Rule {
    /// Kind must be equal; every pattern attribute must be present in the
    /// trigger with an equal value, or be the wildcard.
    pub fn matches(&self, trigger: &Trigger) -> bool {
        self.pattern.kind == trigger.kind
            && self.pattern.attributes.iter().all(|(k, v)| {
                trigger
                    .attributes
                    .get(k)
                    .is_some_and(|tv| v == WILDCARD || v == tv)
            })
    }
}

#[derive(Debug, Clone)]
pub enum RuleChange {
    Add(Rule),
    Remove(String),
    Replace(Rule),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inference {
    pub decision: Decision,
    pub rule_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedRules {
    rules: Vec<Rule>,
    revision: u64,
}

impl FixedRules {
    pub fn empty() -> Self {
        Self { rules: Vec::new(), revision: 0 }
    }

    /// A freshly loaded rule set (revision 1).
    pub fn from_rules(rules: Vec<Rule>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &rules {
            if r.pattern.kind.is_empty() {
                return Err(ReasoningError::InvalidRules(format!("rule `{}` has an empty kind", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(ReasoningError::DuplicateRuleId(r.id.clone()));
            }
        }
        Ok(Self { rules, revision: 1 })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let rules: Vec<Rule> =
            serde_json::from_str(json).map_err(|e| ReasoningError::InvalidRules(e.to_string()))?;
        Self::from_rules(rules)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReasoningError::InvalidRules(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn defaults() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("bundled rule table is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rules).expect("rules serialize")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// Lowest priority among matching rules wins, ties go to the smallest id.
    pub fn infer(&self, trigger: &Trigger) -> Result<Inference> {
        self.rules
            .iter()
            .filter(|r| r.matches(trigger))
            .min_by(|a, b| a.priority.cmp(&b.priority).then_with(|| a.id.cmp(&b.id)))
            .map(|r| Inference { decision: r.decision.clone(), rule_id: r.id.clone() })
            .ok_or_else(|| ReasoningError::NoApplicableRule(trigger.to_string()))
    }

    pub fn update(&self, change: RuleChange) -> Result<FixedRules> {
        let mut rules = self.rules.clone();
        match change {
            RuleChange::Add(rule) => {
                if self.get(&rule.id).is_some() {
                    return Err(ReasoningError::DuplicateRuleId(rule.id));
                }
                rules.push(rule);
            }
            RuleChange::Remove(id) => {
                let pos = rules
                    .iter()
                    .position(|r| r.id == id)
                    .ok_or(ReasoningError::UnknownRuleId(id))?;
                rules.remove(pos);
            }
            RuleChange::Replace(rule) => {
                let slot = rules
                    .iter_mut()
                    .find(|r| r.id == rule.id)
                    .ok_or_else(|| ReasoningError::UnknownRuleId(rule.id.clone()))?;
                *slot = rule;
            }
        }
        Ok(FixedRules { rules, revision: self.revision + 1 })
    }
}

/// Shared, revisioned access to the live rule set. Earlier revisions stay
/// queryable until [`RuleBook::release`] is called.
#[derive(Debug)]
pub struct RuleBook {
    inner: RwLock<BookState>,
}

#[derive(Debug)]
struct BookState {
    current: Arc<FixedRules>,
    retained: BTreeMap<u64, Arc<FixedRules>>,
}

impl RuleBook {
    pub fn new(rules: FixedRules) -> Self {
        let current = Arc::new(rules);
        let mut retained = BTreeMap::new();
        retained.insert(current.revision(), current.clone());
        Self { inner: RwLock::new(BookState { current, retained }) }
    }

    pub fn snapshot(&self) -> Arc<FixedRules> {
        self.inner.read().expect("rule book lock").current.clone()
    }

    pub fn revision(&self, revision: u64) -> Option<Arc<FixedRules>> {
        self.inner.read().expect("rule book lock").retained.get(&revision).cloned()
    }

    /// Applies a change and returns the new revision number.
    pub fn apply(&self, change: RuleChange) -> Result<u64> {
        let mut state = self.inner.write().expect("rule book lock");
        let next = Arc::new(state.current.update(change)?);
        let rev = next.revision();
        state.retained.insert(rev, next.clone());
        state.current = next;
        Ok(rev)
    }

    /// Drops a retained non-current revision.
    pub fn release(&self, revision: u64) {
        let mut state = self.inner.write().expect("rule book lock");
        if state.current.revision() != revision {
            state.retained.remove(&revision);
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub sequence_no: u64,
    pub sim_time_ms: u64,
    pub trigger: Trigger,
    pub rule_id: String,
    pub decision: Decision,
}

/// Where log entries go once sequenced.
pub trait LogSink {
    fn append_log_entry(&mut self, entry: &LogEntry) -> Result<u64, StorageError>;
}

/// Rule revision in force from a given sequence number onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionMark {
    pub from_sequence_no: u64,
    pub rules: FixedRules,
}

/// Sequencer for the decision log, plus the learner hook: a count of how
/// often each rule fired.
#[derive(Debug, Clone, Default)]
pub struct DecisionLog {
    next_sequence_no: u64,
    fired: BTreeMap<String, u64>,
    revisions: Vec<RevisionMark>,
}

impl DecisionLog {
    pub fn new() -> Self {
        Self { next_sequence_no: 1, ..Default::default() }
    }

    pub fn len(&self) -> u64 {
        self.next_sequence_no - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rule_fire_counts(&self) -> &BTreeMap<String, u64> {
        &self.fired
    }

    pub fn revisions(&self) -> &[RevisionMark] {
        &self.revisions
    }

    pub fn append(
        &mut self,
        sink: &mut dyn LogSink,
        sim_time_ms: u64,
        trigger: Trigger,
        rule_id: String,
        decision: Decision,
    ) -> Result<LogEntry> {
        let entry = LogEntry {
            sequence_no: self.next_sequence_no,
            sim_time_ms,
            trigger,
            rule_id,
            decision,
        };
        sink.append_log_entry(&entry)?;
        self.next_sequence_no += 1;
        *self.fired.entry(entry.rule_id.clone()).or_default() += 1;
        Ok(entry)
    }

    /// Infers under `rules` and logs the Trigger-Rule-Decision triple.
    pub fn decide(
        &mut self,
        sink: &mut dyn LogSink,
        rules: &FixedRules,
        sim_time_ms: u64,
        trigger: Trigger,
    ) -> Result<Inference> {
        if self.revisions.last().map(|m| m.rules.revision()) != Some(rules.revision()) {
            self.revisions.push(RevisionMark {
                from_sequence_no: self.next_sequence_no,
                rules: rules.clone(),
            });
        }
        let inference = rules.infer(&trigger)?;
        self.append(
            sink,
            sim_time_ms,
            trigger,
            inference.rule_id.clone(),
            inference.decision.clone(),
        )?;
        Ok(inference)
    }
}

/// Picks the fitness function for a `problem-submitted` descriptor.
pub fn select_fitness_function(
    rules: &FixedRules,
    descriptor: Trigger,
    log: &mut DecisionLog,
    sink: &mut dyn LogSink,
    sim_time_ms: u64,
) -> Result<FitnessId> {
    let Inference { decision, rule_id } = log.decide(sink, rules, sim_time_ms, descriptor)?;
    let malformed = |reason: String| ReasoningError::MalformedDecision { rule_id: rule_id.clone(), reason };
    if decision.action != Action::SelectFitness {
        return Err(malformed(format!("expected select-fitness, got {:?}", decision.action)));
    }
    let id = decision
        .parameters
        .get("fitness_id")
        .ok_or_else(|| malformed("missing fitness_id".into()))?;
    id.parse().map_err(|e: crate::fitness::UnknownFitnessId| malformed(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayMismatch {
    pub sequence_no: u64,
    pub expected: Option<Inference>,
    pub recorded: Inference,
}

/// Re-runs every logged trigger against the revision that was in force and
/// reports entries whose rule or decision differ.
pub fn replay(entries: &[LogEntry], revisions: &[RevisionMark]) -> Vec<ReplayMismatch> {
    entries
        .iter()
        .filter_map(|e| {
            let rules = revisions
                .iter()
                .rev()
                .find(|m| m.from_sequence_no <= e.sequence_no)
                .map(|m| &m.rules);
            let expected = rules.and_then(|r| r.infer(&e.trigger).ok());
            let recorded = Inference { decision: e.decision.clone(), rule_id: e.rule_id.clone() };
            (expected.as_ref() != Some(&recorded)).then_some(ReplayMismatch {
                sequence_no: e.sequence_no,
                expected,
                recorded,
            })
        })
        .collect()
}
