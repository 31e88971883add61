//! A small assembly world for checking flattened plans: parts exist or not,
//! pairs of parts get joined, and a goal names the joints that must exist.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::ExecutableStep;

/// Unordered pair of canonical part names, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[String; 2]", into = "[String; 2]")]
pub struct Joint(String, String);

impl Joint {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Joint(a, b)
        } else {
            Joint(b, a)
        }
    }

    pub fn parts(&self) -> (&str, &str) {
        (&self.0, &self.1)
    }
}

impl From<[String; 2]> for Joint {
    fn from([a, b]: [String; 2]) -> Self {
        Joint::new(a, b)
    }
}

impl From<Joint> for [String; 2] {
    fn from(j: Joint) -> Self {
        [j.0, j.1]
    }
}

impl fmt::Display for Joint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}+{:?}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub available_parts: BTreeMap<String, u32>,
    pub holding: BTreeMap<String, Option<String>>,
    pub assemblies: BTreeSet<Joint>,
}

impl WorldState {
    fn is_held(&self, part: &str) -> bool {
        self.holding.values().any(|h| h.as_deref() == Some(part))
    }

    fn in_assembly(&self, part: &str) -> bool {
        self.assemblies.iter().any(|j| j.0 == part || j.1 == part)
    }

    fn count(&self, part: &str) -> u32 {
        self.available_parts.get(part).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub required_joints: BTreeSet<Joint>,
}

impl GoalSpec {
    pub fn new(joints: impl IntoIterator<Item = Joint>) -> Self {
        Self {
            required_joints: joints.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AliasMode {
    #[default]
    Resolve,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepFailure {
    #[error("missing-part: {0:?} is not available")]
    MissingPart(String),
    #[error("already-joined: {0} is already joined")]
    AlreadyJoined(Joint),
    #[error("insufficient-count: joining {0:?} to itself needs two of it")]
    InsufficientCount(String),
    #[error("bad-parameters: {0}")]
    BadParameters(String),
    #[error("unknown-action: no semantics for {0:?}")]
    UnknownAction(String),
}

impl StepFailure {
    pub fn kind(&self) -> &'static str {
        match self {
            StepFailure::MissingPart(_) => "missing-part",
            StepFailure::AlreadyJoined(_) => "already-joined",
            StepFailure::InsufficientCount(_) => "insufficient-count",
            StepFailure::BadParameters(_) => "bad-parameters",
            StepFailure::UnknownAction(_) => "unknown-action",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step {index}: {failure}")]
pub struct PreconditionFailure {
    pub index: usize,
    pub failure: StepFailure,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario: {0}")]
    Invalid(String),
}

/// Scenario file. `subassemblies` names parts that come into being once
/// their two components are joined.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub parts: BTreeMap<String, u32>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    pub goal: Vec<Joint>,
    #[serde(default)]
    pub holdings: BTreeMap<String, Option<String>>,
    #[serde(default)]
    pub subassemblies: BTreeMap<String, Joint>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.check()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn is_part(&self, name: &str) -> bool {
        self.parts.contains_key(name)
            || self.subassemblies.contains_key(name)
            || self.holdings.values().any(|h| h.as_deref() == Some(name))
    }

    fn check(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        for held in self.holdings.values().flatten() {
            if self.parts.contains_key(held) {
                return invalid(format!("{held:?} is both held and listed as available"));
            }
        }
        for (alias, target) in &self.aliases {
            if self.is_part(alias) {
                return invalid(format!("alias {alias:?} is also a part name"));
            }
            if !self.is_part(target) {
                return invalid(format!("alias {alias:?} points at unknown part {target:?}"));
            }
        }
        let joints = self.goal.iter().chain(self.subassemblies.values());
        for joint in joints {
            for part in [&joint.0, &joint.1] {
                if !self.is_part(part) {
                    return invalid(format!("joint {joint} names unknown part {part:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> WorldState {
        WorldState {
            available_parts: self.parts.clone(),
            holding: self.holdings.clone(),
            assemblies: BTreeSet::new(),
        }
    }

    pub fn goal_spec(&self) -> GoalSpec {
        GoalSpec::new(self.goal.iter().cloned())
    }
}

type Transition = fn(&Simulator, &WorldState, &BTreeMap<String, String>) -> Result<WorldState, StepFailure>;

/// Preconditions and effects per terminal task word.
#[derive(Clone)]
pub struct ActionSemantics {
    actions: BTreeMap<String, Transition>,
}

impl fmt::Debug for ActionSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.actions.keys()).finish()
    }
}

impl Default for ActionSemantics {
    /// Ships `AssembleParts(part_a, part_b)`.
    fn default() -> Self {
        let mut actions: BTreeMap<String, Transition> = BTreeMap::new();
        actions.insert("AssembleParts".into(), assemble_parts);
        Self { actions }
    }
}

impl ActionSemantics {
    pub fn register(&mut self, action: impl Into<String>, transition: Transition) {
        self.actions.insert(action.into(), transition);
    }

    pub fn knows(&self, action: &str) -> bool {
        self.actions.contains_key(action)
    }
}

fn assemble_parts(
    sim: &Simulator,
    state: &WorldState,
    params: &BTreeMap<String, String>,
) -> Result<WorldState, StepFailure> {
    let get = |key: &str| {
        params
            .get(key)
            .ok_or_else(|| StepFailure::BadParameters(format!("AssembleParts needs {key:?}")))
    };
    let a = sim.canonical(get("part_a")?.trim());
    let b = sim.canonical(get("part_b")?.trim());
    for part in [&a, &b] {
        if !sim.exists(state, part) {
            return Err(StepFailure::MissingPart(part.clone()));
        }
    }
    if a == b && state.count(&a) < 2 {
        return Err(StepFailure::InsufficientCount(a));
    }
    let joint = Joint::new(a, b);
    if state.assemblies.contains(&joint) {
        return Err(StepFailure::AlreadyJoined(joint));
    }
    let mut next = state.clone();
    next.assemblies.insert(joint);
    Ok(next)
}

pub struct Simulator {
    scenario: Scenario,
    semantics: ActionSemantics,
    alias_mode: AliasMode,
}

impl Simulator {
    pub fn new(scenario: Scenario, alias_mode: AliasMode) -> Self {
        Self {
            scenario,
            semantics: ActionSemantics::default(),
            alias_mode,
        }
    }

    pub fn with_semantics(mut self, semantics: ActionSemantics) -> Self {
        self.semantics = semantics;
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn canonical(&self, name: &str) -> String {
        match self.alias_mode {
            AliasMode::Resolve => self
                .scenario
                .aliases
                .get(name)
                .cloned()
                .unwrap_or_else(|| name.to_string()),
            AliasMode::Strict => name.to_string(),
        }
    }

    /// Available, held, already joined, or a subassembly whose components
    /// are joined.
    pub fn exists(&self, state: &WorldState, part: &str) -> bool {
        state.count(part) > 0
            || state.is_held(part)
            || state.in_assembly(part)
            || self
                .scenario
                .subassemblies
                .get(part)
                .is_some_and(|j| state.assemblies.contains(j))
    }

    pub fn apply_step(&self, state: &WorldState, step: &ExecutableStep) -> Result<WorldState, StepFailure> {
        let transition = self
            .semantics
            .actions
            .get(&step.action)
            .ok_or_else(|| StepFailure::UnknownAction(step.action.clone()))?;
        transition(self, state, &step.parameters)
    }

    pub fn check_plan(&self, initial: &WorldState, goal: &GoalSpec, plan: &[ExecutableStep]) -> Verdict {
        let mut state = initial.clone();
        for (index, step) in plan.iter().enumerate() {
            match self.apply_step(&state, step) {
                Ok(next) => state = next,
                Err(failure) => {
                    return Verdict::failure(Some(index), PreconditionFailure { index, failure }.to_string())
                }
            }
        }
        let unmet: Vec<String> = goal
            .required_joints
            .difference(&state.assemblies)
            .map(Joint::to_string)
            .collect();
        if unmet.is_empty() {
            Verdict::success()
        } else {
            Verdict::failure(None, format!("goal-unmet: missing {}", unmet.join(", ")))
        }
    }

    /// Runs `plan` from the scenario's own initial state against its goal.
    pub fn check(&self, plan: &[ExecutableStep]) -> Verdict {
        self.check_plan(&self.scenario.initial_state(), &self.scenario.goal_spec(), plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// `{verdict, failed_step, reason}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub verdict: Outcome,
    pub failed_step: Option<usize>,
    pub reason: Option<String>,
}

impl Verdict {
    pub fn success() -> Self {
        Self {
            verdict: Outcome::Success,
            failed_step: None,
            reason: None,
        }
    }

    pub fn failure(failed_step: Option<usize>, reason: impl Into<String>) -> Self {
        Self {
            verdict: Outcome::Failure,
            failed_step,
            reason: Some(reason.into()),
        }
    }

    pub fn is_success(&self) -> bool {
        self.verdict == Outcome::Success
    }
}

pub fn assemble(a: &str, b: &str) -> ExecutableStep {
    ExecutableStep {
        action: "AssembleParts".into(),
        parameters: BTreeMap::from([("part_a".into(), a.into()), ("part_b".into(), b.into())]),
        robot: None,
    }
}
