//! Manager, planners and allocator: split an instruction into total task
//! words, grow one tree per total task word, then bind leaves to robots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::{
    has_errors, lookup, validate_knowledge_base, Diagnostic, KbError, KnowledgeBase, ParamType,
};
use crate::llm::LlmClient;
use crate::prompt::PromptTemplate;
use crate::tree::{flatten, ExecutableStep, Expander, ExpansionLimits, ExpansionLog, Origin, TaskNode, TreeError};

#[derive(Debug, Clone, Error)]
pub enum OrchestrationError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("manager configuration: {0}")]
    ManagerConfig(String),
    #[error("knowledge base {name:?} is invalid:\n{}", render_diagnostics(.diagnostics))]
    InvalidKnowledgeBase { name: String, diagnostics: Vec<Diagnostic> },
    #[error("NoPlanner: no planner registered for {action:?}")]
    NoPlanner { action: String },
    #[error("NoCapableRobot: no available robot can execute {action:?} (step {step})")]
    NoCapableRobot { action: String, step: usize },
    #[error("robot fleet: {0}")]
    InvalidFleet(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl From<KbError> for OrchestrationError {
    fn from(e: KbError) -> Self {
        OrchestrationError::Tree(TreeError::UnknownTaskWord(e))
    }
}

fn render_diagnostics(diagnostics: &[Diagnostic]) -> String {
    diagnostics
        .iter()
        .map(|d| format!("  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn check_kb(name: &str, kb: &KnowledgeBase) -> Result<(), OrchestrationError> {
    let diagnostics = validate_knowledge_base(kb);
    if has_errors(&diagnostics) {
        return Err(OrchestrationError::InvalidKnowledgeBase {
            name: name.to_string(),
            diagnostics,
        });
    }
    Ok(())
}

/// Grows trees for the total task words it serves, using its own map.
#[derive(Debug, Clone)]
pub struct Planner {
    pub name: String,
    pub kb: Arc<KnowledgeBase>,
    pub limits: ExpansionLimits,
    pub template: PromptTemplate,
}

impl Planner {
    pub fn new(name: impl Into<String>, kb: Arc<KnowledgeBase>) -> Self {
        Self {
            name: name.into(),
            kb,
            limits: ExpansionLimits::default(),
            template: PromptTemplate::default(),
        }
    }

    pub fn with_limits(mut self, limits: ExpansionLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }
}

/// The manager knowledge base has one non-terminal entry word whose
/// possible subtasks are the total task words. The instruction is bound to
/// one of the entry word's parameters.
#[derive(Debug, Clone)]
pub struct Manager {
    kb: Arc<KnowledgeBase>,
    entry: String,
    instruction_parameter: String,
    planners: BTreeMap<String, Arc<Planner>>,
    template: PromptTemplate,
}

impl Manager {
    /// Uses the only non-terminal word of `kb` as the entry word.
    pub fn new(kb: Arc<KnowledgeBase>) -> Result<Self, OrchestrationError> {
        let entries: Vec<&str> = kb.words().filter(|w| !w.is_terminal).map(|w| w.name.as_str()).collect();
        match entries.as_slice() {
            [one] => {
                let one = one.to_string();
                Self::with_entry(kb, &one)
            }
            [] => Err(OrchestrationError::ManagerConfig("no non-terminal entry word".into())),
            many => Err(OrchestrationError::ManagerConfig(format!(
                "several non-terminal words ({}); name the entry word",
                many.join(", ")
            ))),
        }
    }

    pub fn with_entry(kb: Arc<KnowledgeBase>, entry: &str) -> Result<Self, OrchestrationError> {
        let word = lookup(&kb, entry)?;
        if word.is_terminal {
            return Err(OrchestrationError::ManagerConfig(format!(
                "entry word {entry:?} is terminal"
            )));
        }
        let instruction_parameter = word
            .parameter("task_description")
            .or_else(|| word.parameters.iter().find(|p| p.type_tag == ParamType::Str))
            .map(|p| p.name.clone())
            .ok_or_else(|| {
                OrchestrationError::ManagerConfig(format!(
                    "entry word {entry:?} has no text parameter for the instruction"
                ))
            })?;
        Ok(Self {
            entry: entry.to_string(),
            instruction_parameter,
            kb,
            planners: BTreeMap::new(),
            template: PromptTemplate::default(),
        })
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn register(&mut self, total_task_word: impl Into<String>, planner: Arc<Planner>) {
        self.planners.insert(total_task_word.into(), planner);
    }

    /// Registers `planner` for every total task word its map defines.
    pub fn register_serving(&mut self, planner: Arc<Planner>) -> usize {
        let served: Vec<String> = self
            .total_task_words()
            .into_iter()
            .filter(|w| planner.kb.contains(w))
            .collect();
        for word in &served {
            self.planners.insert(word.clone(), planner.clone());
        }
        served.len()
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn entry(&self) -> &str {
        &self.entry
    }

    pub fn total_task_words(&self) -> Vec<String> {
        self.kb
            .get(&self.entry)
            .map(|w| w.possible_subtasks.clone())
            .unwrap_or_default()
    }

    pub fn planners(&self) -> impl Iterator<Item = (&str, &Planner)> {
        self.planners.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Every map must pass validation and every total task word must have a
    /// planner whose map defines it.
    pub fn validate(&self) -> Result<(), OrchestrationError> {
        check_kb("manager", &self.kb)?;
        let mut checked = BTreeSet::new();
        for planner in self.planners.values() {
            if checked.insert(planner.name.clone()) {
                check_kb(&planner.name, &planner.kb)?;
            }
        }
        for word in self.total_task_words() {
            let planner = self
                .planners
                .get(&word)
                .ok_or_else(|| OrchestrationError::NoPlanner { action: word.clone() })?;
            if !planner.kb.contains(&word) {
                return Err(OrchestrationError::ManagerConfig(format!(
                    "planner {:?} does not define {word:?}",
                    planner.name
                )));
            }
        }
        Ok(())
    }
}

pub fn find_planner<'a>(manager: &'a Manager, root: &TaskNode) -> Result<&'a Planner, OrchestrationError> {
    manager
        .planners
        .get(&root.action)
        .map(Arc::as_ref)
        .ok_or_else(|| OrchestrationError::NoPlanner {
            action: root.action.clone(),
        })
}

/// Asks the model for the one-layer sequence of total task words. `state`
/// is passed through as general information.
pub fn initialize_base_list(
    manager: &Manager,
    client: &LlmClient,
    instruction: &str,
    state: &str,
) -> Result<Vec<TaskNode>, OrchestrationError> {
    initialize_logged(manager, client, instruction, state, &mut Vec::new())
}

fn initialize_logged(
    manager: &Manager,
    client: &LlmClient,
    instruction: &str,
    state: &str,
    log: &mut Vec<ExpansionLog>,
) -> Result<Vec<TaskNode>, OrchestrationError> {
    if instruction.trim().is_empty() {
        return Err(OrchestrationError::EmptyInstruction);
    }
    let params = BTreeMap::from([(manager.instruction_parameter.clone(), instruction.to_string())]);
    let root = TaskNode::root(&manager.kb, &manager.entry, params)?;
    let mut expander =
        Expander::new(&manager.kb, client, state, ExpansionLimits::default()).with_template(manager.template.clone());
    let result = expander.expand_node(&root);
    log.extend(expander.into_log());
    let mut roots = result?;
    for root in &mut roots {
        root.depth = 0;
        root.origin = Origin::Root;
    }
    Ok(roots)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationPolicy {
    #[default]
    RoundRobin,
    CapabilityFirst,
}

impl FromStr for AllocationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round-robin" => Ok(Self::RoundRobin),
            "capability-first" => Ok(Self::CapabilityFirst),
            other => Err(format!("unknown allocation policy {other:?}")),
        }
    }
}

impl fmt::Display for AllocationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RoundRobin => "round-robin",
            Self::CapabilityFirst => "capability-first",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotState {
    pub id: String,
    pub executable_actions: BTreeSet<String>,
    #[serde(default)]
    pub busy: bool,
}

impl RobotState {
    pub fn new<I, S>(id: impl Into<String>, actions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            id: id.into(),
            executable_actions: actions.into_iter().map(Into::into).collect(),
            busy: false,
        }
    }

    pub fn can_execute(&self, action: &str) -> bool {
        !self.busy && self.executable_actions.contains(action)
    }
}

#[derive(Debug, Clone)]
pub struct Allocator {
    robots: Vec<RobotState>,
    policy: AllocationPolicy,
}

impl Allocator {
    pub fn new(robots: Vec<RobotState>, policy: AllocationPolicy) -> Result<Self, OrchestrationError> {
        let mut seen = BTreeSet::new();
        for robot in &robots {
            if !seen.insert(robot.id.as_str()) {
                return Err(OrchestrationError::InvalidFleet(format!(
                    "duplicate robot id {:?}",
                    robot.id
                )));
            }
            if robot.executable_actions.is_empty() {
                return Err(OrchestrationError::InvalidFleet(format!(
                    "robot {:?} has no executable actions",
                    robot.id
                )));
            }
        }
        Ok(Self { robots, policy })
    }

    /// Fleet file: a JSON list of `{id, executable_actions, busy}`.
    pub fn from_json(text: &str, policy: AllocationPolicy) -> Result<Self, OrchestrationError> {
        let robots = serde_json::from_str(text).map_err(|e| OrchestrationError::InvalidFleet(e.to_string()))?;
        Self::new(robots, policy)
    }

    pub fn load(path: impl AsRef<Path>, policy: AllocationPolicy) -> Result<Self, OrchestrationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestrationError::InvalidFleet(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, policy)
    }

    /// One robot per terminal word of `kb`, able to do everything.
    pub fn single_universal(kb: &KnowledgeBase) -> Self {
        let actions: Vec<&str> = kb.words().filter(|w| w.is_terminal).map(|w| w.name.as_str()).collect();
        Self {
            robots: vec![RobotState::new("robot-1", actions)],
            policy: AllocationPolicy::RoundRobin,
        }
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn policy(&self) -> AllocationPolicy {
        self.policy
    }

    pub fn with_policy(mut self, policy: AllocationPolicy) -> Self {
        self.policy = policy;
        self
    }
}

/// Assigns a robot to every terminal leaf, visiting leaves in flatten order.
pub fn allocate_robot(allocator: &Allocator, mut roots: Vec<TaskNode>) -> Result<Vec<TaskNode>, OrchestrationError> {
    flatten(&roots)?;
    let robots = &allocator.robots;
    let mut by_capability: Vec<usize> = (0..robots.len()).collect();
    by_capability.sort_by(|&a, &b| {
        let (ra, rb) = (&robots[a], &robots[b]);
        (ra.executable_actions.len(), &ra.id).cmp(&(rb.executable_actions.len(), &rb.id))
    });
    let mut cursor = 0;
    let mut step = 0;
    let mut failure = None;
    for root in &mut roots {
        root.visit_mut(&mut |node| {
            if failure.is_some() || !node.is_leaf() {
                return;
            }
            let chosen = match allocator.policy {
                AllocationPolicy::RoundRobin => (0..robots.len())
                    .map(|k| (cursor + k) % robots.len())
                    .find(|&i| robots[i].can_execute(&node.action))
                    .inspect(|&i| cursor = i + 1),
                AllocationPolicy::CapabilityFirst => by_capability
                    .iter()
                    .copied()
                    .find(|&i| robots[i].can_execute(&node.action)),
            };
            match chosen {
                Some(i) => node.assigned_robot = Some(robots[i].id.clone()),
                None => {
                    failure = Some(OrchestrationError::NoCapableRobot {
                        action: node.action.clone(),
                        step,
                    })
                }
            }
            step += 1;
        });
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(roots),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BaseList,
    Planning,
    Allocation,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::BaseList => 1,
            Stage::Planning => 2,
            Stage::Allocation => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::BaseList => "base list",
            Stage::Planning => "planning",
            Stage::Allocation => "allocation",
        };
        write!(f, "stage {} ({name})", self.number())
    }
}

/// A pipeline failure with everything produced up to that point.
#[derive(Debug, Clone, Error)]
#[error("{stage}: {error}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub error: OrchestrationError,
    pub forest: Vec<TaskNode>,
    pub log: Vec<ExpansionLog>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub forest: Vec<TaskNode>,
    pub plan: Vec<ExecutableStep>,
    pub log: Vec<ExpansionLog>,
}

/// Base list, then every tree, then allocation. Roots are expanded in
/// order so the transcript order is reproducible.
pub fn generate_task_tree(
    instruction: &str,
    state: &str,
    manager: &Manager,
    client: &LlmClient,
    allocator: &Allocator,
) -> Result<PipelineOutput, PipelineError> {
    let mut log = Vec::new();
    let fail = |stage, error, forest, log| PipelineError {
        stage,
        error,
        forest,
        log,
    };
    let roots = match initialize_logged(manager, client, instruction, state, &mut log) {
        Ok(r) => r,
        Err(e) => return Err(fail(Stage::BaseList, e, Vec::new(), log)),
    };
    let mut forest: Vec<TaskNode> = Vec::with_capacity(roots.len());
    let mut pending = roots.into_iter();
    while let Some(mut root) = pending.next() {
        let planner = match find_planner(manager, &root) {
            Ok(p) => p,
            Err(e) => {
                forest.push(root);
                forest.extend(pending);
                return Err(fail(Stage::Planning, e, forest, log));
            }
        };
        match lookup(&planner.kb, &root.action) {
            Ok(spec) => root.is_terminal = spec.is_terminal,
            Err(e) => {
                forest.push(root);
                forest.extend(pending);
                return Err(fail(Stage::Planning, e.into(), forest, log));
            }
        }
        let general_info = root.parameters.get("task_description").cloned().unwrap_or_default();
        let mut expander =
            Expander::new(&planner.kb, client, &general_info, planner.limits).with_template(planner.template.clone());
        let result = expander.expand_tree(root);
        log.extend(expander.into_log());
        match result {
            Ok(tree) => forest.push(tree),
            Err(failure) => {
                forest.push(*failure.partial);
                forest.extend(pending);
                return Err(fail(Stage::Planning, failure.error.into(), forest, log));
            }
        }
    }
    let forest = match allocate_robot(allocator, forest.clone()) {
        Ok(f) => f,
        Err(e) => return Err(fail(Stage::Allocation, e, forest, log)),
    };
    let plan = flatten(&forest).expect("allocated forest is complete");
    Ok(PipelineOutput { forest, plan, log })
}
