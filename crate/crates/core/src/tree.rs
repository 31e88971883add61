//! Task trees: repeated expansion of open (non-terminal) leaves through the
//! model until every leaf is an executable command, and flattening of the
//! finished forest into the executable step sequence.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::{lookup, KbError, KnowledgeBase};
use crate::llm::{AttemptRecord, BackendError, CompletionError, LlmClient};
use crate::prompt::{
    check_response, parse_output, resolve_subtask_parameters, PromptError, PromptTemplate, SubtaskStep,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionLimits {
    pub max_depth: usize,
    pub max_nodes: usize,
    pub max_expansions: usize,
}

impl Default for ExpansionLimits {
    fn default() -> Self {
        Self {
            max_depth: 8,
            max_nodes: 512,
            max_expansions: 256,
        }
    }
}

impl ExpansionLimits {
    pub fn new(max_depth: usize, max_nodes: usize, max_expansions: usize) -> Result<Self, TreeError> {
        if max_depth == 0 || max_nodes == 0 || max_expansions == 0 {
            return Err(TreeError::InvalidLimits);
        }
        Ok(Self {
            max_depth,
            max_nodes,
            max_expansions,
        })
    }

    pub fn with_max_depth(self, max_depth: usize) -> Self {
        Self { max_depth, ..self }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Origin {
    #[default]
    Root,
    ExpandedFrom(usize),
}

/// An instantiated task word. Serializes as
/// `{action, parameters, is_terminal, children, assigned_robot}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub action: String,
    pub parameters: BTreeMap<String, String>,
    pub is_terminal: bool,
    pub children: Vec<TaskNode>,
    pub assigned_robot: Option<String>,
    #[serde(skip)]
    pub depth: usize,
    #[serde(skip)]
    pub id: usize,
    #[serde(skip)]
    pub origin: Origin,
}

impl TaskNode {
    /// A root for `action`, taking the terminal flag from `kb`.
    pub fn root(kb: &KnowledgeBase, action: &str, parameters: BTreeMap<String, String>) -> Result<Self, TreeError> {
        let spec = lookup(kb, action)?;
        Ok(Self {
            action: action.to_string(),
            parameters,
            is_terminal: spec.is_terminal,
            children: Vec::new(),
            assigned_robot: None,
            depth: 0,
            id: 0,
            origin: Origin::Root,
        })
    }

    fn child_of(&self, kb: &KnowledgeBase, step: &SubtaskStep, id: usize) -> Result<Self, TreeError> {
        let spec = lookup(kb, &step.action)?;
        Ok(Self {
            action: step.action.clone(),
            parameters: step.parameters.clone(),
            is_terminal: spec.is_terminal,
            children: Vec::new(),
            assigned_robot: None,
            depth: self.depth + 1,
            id,
            origin: Origin::ExpandedFrom(self.id),
        })
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn is_open(&self) -> bool {
        self.is_leaf() && !self.is_terminal
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TaskNode::node_count).sum::<usize>()
    }

    /// Depth-first, left to right.
    pub fn leaves(&self) -> Vec<&TaskNode> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |n| out.push(n));
        out
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a TaskNode)) {
        if self.is_leaf() {
            f(self);
        }
        for child in &self.children {
            child.visit_leaves(f);
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a TaskNode)) {
        f(self);
        for child in &self.children {
            child.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut TaskNode)) {
        f(self);
        for child in &mut self.children {
            child.visit_mut(f);
        }
    }

    pub fn get(&self, path: &[usize]) -> Option<&TaskNode> {
        path.iter().try_fold(self, |node, &i| node.children.get(i))
    }

    pub fn get_mut(&mut self, path: &[usize]) -> Option<&mut TaskNode> {
        path.iter().try_fold(self, |node, &i| node.children.get_mut(i))
    }

    pub fn is_complete(&self) -> bool {
        open_leaves(self).is_empty()
    }

    /// Recomputes depth, preorder ids and origins from the structure.
    pub fn renumber(&mut self) -> usize {
        fn walk(node: &mut TaskNode, depth: usize, parent: Option<usize>, next: &mut usize) {
            node.depth = depth;
            node.id = *next;
            node.origin = parent.map_or(Origin::Root, Origin::ExpandedFrom);
            *next += 1;
            let id = node.id;
            for child in &mut node.children {
                walk(child, depth + 1, Some(id), next);
            }
        }
        let mut next = 0;
        walk(self, 0, None, &mut next);
        next
    }

    pub fn without_robots(&self) -> TaskNode {
        let mut copy = self.clone();
        copy.visit_mut(&mut |n| n.assigned_robot = None);
        copy
    }
}

pub fn open_leaves(root: &TaskNode) -> Vec<&TaskNode> {
    root.leaves().into_iter().filter(|n| !n.is_terminal).collect()
}

/// Child-index paths of the open leaves, in [`open_leaves`] order.
pub fn open_leaf_paths(root: &TaskNode) -> Vec<Vec<usize>> {
    fn walk(node: &TaskNode, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if node.is_open() {
            out.push(path.clone());
        }
        for (i, child) in node.children.iter().enumerate() {
            path.push(i);
            walk(child, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(root, &mut Vec::new(), &mut out);
    out
}

/// Pretty JSON array of trees, as written to `tree.json`.
pub fn forest_to_json(roots: &[TaskNode]) -> String {
    let mut text = serde_json::to_string_pretty(roots).expect("forest serializes");
    text.push('\n');
    text
}

pub fn forest_from_json(text: &str) -> serde_json::Result<Vec<TaskNode>> {
    let mut roots: Vec<TaskNode> = serde_json::from_str(text)?;
    for root in &mut roots {
        root.renumber();
    }
    Ok(roots)
}

/// Location of the first structural difference between two forests, e.g.
/// `tree[0]/1/0 (AssembleParts): parameters differ`.
pub fn first_divergence(expected: &[TaskNode], actual: &[TaskNode]) -> Option<String> {
    fn node(a: &TaskNode, b: &TaskNode, at: String) -> Option<String> {
        let here = |what: &str| Some(format!("{at} ({}): {what}", a.action));
        if a.action != b.action {
            return Some(format!("{at}: action {:?} became {:?}", a.action, b.action));
        }
        if a.parameters != b.parameters {
            return here("parameters differ");
        }
        if a.is_terminal != b.is_terminal {
            return here("terminal flag differs");
        }
        if a.assigned_robot != b.assigned_robot {
            return here("assigned robot differs");
        }
        for (i, (ca, cb)) in a.children.iter().zip(&b.children).enumerate() {
            if let Some(d) = node(ca, cb, format!("{at}/{i}")) {
                return Some(d);
            }
        }
        if a.children.len() != b.children.len() {
            return here(&format!("{} children became {}", a.children.len(), b.children.len()));
        }
        None
    }
    for (i, (a, b)) in expected.iter().zip(actual).enumerate() {
        if let Some(d) = node(a, b, format!("tree[{i}]")) {
            return Some(d);
        }
    }
    (expected.len() != actual.len()).then(|| format!("forest had {} trees, now {}", expected.len(), actual.len()))
}

#[derive(Debug, Clone, Error)]
pub enum TreeError {
    #[error(transparent)]
    UnknownTaskWord(#[from] KbError),
    #[error("expansion of {action:?} failed validation after {} attempts", .attempts.len())]
    ValidationExhausted {
        action: String,
        attempts: Vec<AttemptRecord>,
    },
    #[error("{action:?} at depth {depth} cannot expand: depth limit {max_depth}")]
    DepthLimit {
        action: String,
        depth: usize,
        max_depth: usize,
    },
    #[error("tree exceeds {limit} nodes")]
    NodeBudgetExceeded { limit: usize },
    #[error("tree exceeds {limit} expansions")]
    ExpansionBudgetExceeded { limit: usize },
    #[error("{action:?} is not an open leaf")]
    NotExpandable { action: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("expanding {action:?}: {error}")]
    Backend { action: String, error: BackendError },
    #[error("tree is incomplete: {action:?} is a non-terminal leaf")]
    IncompleteTree { action: String },
    #[error("expansion limits must be strictly positive")]
    InvalidLimits,
}

/// A failed [`expand_tree`], with the tree as it stood at the failure.
#[derive(Debug, Clone)]
pub struct ExpandFailure {
    pub error: TreeError,
    pub partial: Box<TaskNode>,
}

impl fmt::Display for ExpandFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (tree had {} nodes)", self.error, self.partial.node_count())
    }
}

impl std::error::Error for ExpandFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Record of one node expansion, including every attempt.
#[derive(Debug, Clone)]
pub struct ExpansionLog {
    pub node_id: usize,
    pub action: String,
    pub depth: usize,
    pub history: Vec<AttemptRecord>,
}

/// Drives expansion of one tree at a time against one knowledge base.
pub struct Expander<'a> {
    kb: &'a KnowledgeBase,
    client: &'a LlmClient,
    general_info: &'a str,
    limits: ExpansionLimits,
    template: PromptTemplate,
    next_id: usize,
    expansions: usize,
    log: Vec<ExpansionLog>,
}

impl<'a> Expander<'a> {
    pub fn new(kb: &'a KnowledgeBase, client: &'a LlmClient, general_info: &'a str, limits: ExpansionLimits) -> Self {
        Self {
            kb,
            client,
            general_info,
            limits,
            template: PromptTemplate::default(),
            next_id: 1,
            expansions: 0,
            log: Vec::new(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn log(&self) -> &[ExpansionLog] {
        &self.log
    }

    pub fn into_log(self) -> Vec<ExpansionLog> {
        self.log
    }

    pub fn expansions(&self) -> usize {
        self.expansions
    }

    /// Asks the model for `node`'s subtasks and returns the new children
    /// (not yet attached).
    pub fn expand_node(&mut self, node: &TaskNode) -> Result<Vec<TaskNode>, TreeError> {
        if !node.is_open() {
            return Err(TreeError::NotExpandable {
                action: node.action.clone(),
            });
        }
        if node.depth >= self.limits.max_depth {
            return Err(TreeError::DepthLimit {
                action: node.action.clone(),
                depth: node.depth,
                max_depth: self.limits.max_depth,
            });
        }
        let kb = self.kb;
        let spec = lookup(kb, &node.action)?;
        let resolved = resolve_subtask_parameters(kb, spec);
        let remaining = self.limits.max_depth - node.depth;
        let prompt = self
            .template
            .build(&resolved, &node.parameters, self.general_info, Some(remaining))?;
        let outcome = self
            .client
            .complete_validated(&prompt, |text| check_response(kb, spec, text).map(|(_, report)| report));
        let validated = match outcome {
            Ok(v) => v,
            Err(CompletionError::Backend(error)) => {
                return Err(TreeError::Backend {
                    action: node.action.clone(),
                    error,
                })
            }
            Err(CompletionError::ValidationExhausted { attempts }) => {
                self.record(node, attempts.clone());
                return Err(exhausted_error(kb, &node.action, attempts));
            }
        };
        self.record(node, validated.history);
        let seq = parse_output(&validated.response).expect("validated response parses");
        seq.steps
            .iter()
            .map(|step| {
                let child = node.child_of(kb, step, self.next_id);
                self.next_id += 1;
                child
            })
            .collect()
    }

    fn record(&mut self, node: &TaskNode, history: Vec<AttemptRecord>) {
        self.log.push(ExpansionLog {
            node_id: node.id,
            action: node.action.clone(),
            depth: node.depth,
            history,
        });
    }

    /// Expands open leaves, sweep by sweep in depth-first order, until none
    /// remain.
    pub fn expand_tree(&mut self, mut root: TaskNode) -> Result<TaskNode, ExpandFailure> {
        let fail = |error: TreeError, root: TaskNode| ExpandFailure {
            error,
            partial: Box::new(root),
        };
        if let Err(e) = lookup(self.kb, &root.action) {
            return Err(fail(e.into(), root));
        }
        self.next_id = root.renumber();
        let mut nodes = root.node_count();
        loop {
            let sweep = open_leaf_paths(&root);
            if sweep.is_empty() {
                return Ok(root);
            }
            for path in sweep {
                if self.expansions >= self.limits.max_expansions {
                    let limit = self.limits.max_expansions;
                    return Err(fail(TreeError::ExpansionBudgetExceeded { limit }, root));
                }
                let node = root.get(&path).expect("path from open_leaf_paths");
                let children = match self.expand_node(node) {
                    Ok(c) => c,
                    Err(e) => return Err(fail(e, root)),
                };
                self.expansions += 1;
                nodes += children.len();
                root.get_mut(&path).expect("path still valid").children = children;
                if nodes > self.limits.max_nodes {
                    let limit = self.limits.max_nodes;
                    return Err(fail(TreeError::NodeBudgetExceeded { limit }, root));
                }
            }
        }
    }
}

/// After exhausted retries, an action the knowledge base does not know is
/// reported as such; anything else as a validation failure.
fn exhausted_error(kb: &KnowledgeBase, action: &str, attempts: Vec<AttemptRecord>) -> TreeError {
    let unknown = attempts
        .last()
        .and_then(|a| parse_output(&a.response).ok())
        .and_then(|seq| seq.steps.into_iter().find(|s| !kb.contains(&s.action)));
    match unknown {
        Some(step) => lookup(kb, &step.action)
            .map(|_| unreachable!())
            .unwrap_or_else(TreeError::from),
        None => TreeError::ValidationExhausted {
            action: action.to_string(),
            attempts,
        },
    }
}

pub fn expand_node(
    kb: &KnowledgeBase,
    client: &LlmClient,
    node: &TaskNode,
    general_info: &str,
    limits: ExpansionLimits,
) -> Result<Vec<TaskNode>, TreeError> {
    Expander::new(kb, client, general_info, limits).expand_node(node)
}

pub fn expand_tree(
    kb: &KnowledgeBase,
    client: &LlmClient,
    root: TaskNode,
    general_info: &str,
    limits: ExpansionLimits,
) -> Result<TaskNode, ExpandFailure> {
    Expander::new(kb, client, general_info, limits).expand_tree(root)
}

/// One executable command of the final plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutableStep {
    pub action: String,
    pub parameters: BTreeMap<String, String>,
    pub robot: Option<String>,
}

/// Leaves of every tree, depth-first left to right, trees in order.
pub fn flatten(roots: &[TaskNode]) -> Result<Vec<ExecutableStep>, TreeError> {
    let mut out = Vec::new();
    for root in roots {
        for leaf in root.leaves() {
            if !leaf.is_terminal {
                return Err(TreeError::IncompleteTree {
                    action: leaf.action.clone(),
                });
            }
            out.push(ExecutableStep {
                action: leaf.action.clone(),
                parameters: leaf.parameters.clone(),
                robot: leaf.assigned_robot.clone(),
            });
        }
    }
    Ok(out)
}
