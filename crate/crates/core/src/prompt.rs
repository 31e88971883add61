//! Prompt envelopes, response parsing and response validation.
//!
//! A prompt carries one task word as a JSON envelope (task, introduction,
//! task_parameters, possible_subtasks, subtask_descriptions,
//! subtask_parameters, possible_subtask_sequences, rules). The model answers
//! with `{"subtask_sequence": [{"action": ..., "parameters": {...}}, ...]}`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::knowledge_base::{KnowledgeBase, ParamType, ParameterSpec, TaskWordSpec};

pub const PREAMBLE_V1: &str = include_str!("../templates/preamble.v1.txt");
pub const TEMPLATE_VERSION: &str = "v1";

const ENVELOPE_HEADING: &str = "## Task envelope";
const BUDGET_HEADING: &str = "## Decomposition budget";
const GENERAL_HEADING: &str = "## General information";
const EXAMPLES_HEADING: &str = "## Examples";
const DEPTH_KEY: &str = "remaining_depth:";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("task word {0:?} is terminal and is never expanded")]
    TerminalTask(String),
    #[error("parameter {parameter:?} is not declared by task word {task:?}")]
    UnknownParameter { task: String, parameter: String },
}

/// The input envelope sent to the model for one expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnvelope {
    pub task: String,
    pub introduction: String,
    pub task_parameters: BTreeMap<String, String>,
    pub possible_subtasks: Vec<String>,
    pub subtask_descriptions: Vec<String>,
    pub subtask_parameters: BTreeMap<String, Vec<ParameterSpec>>,
    pub possible_subtask_sequences: Vec<Vec<String>>,
    #[serde(default)]
    pub rules: String,
}

impl PromptEnvelope {
    /// Sorted keys, two-space indentation.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("envelope serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }
}

/// Copies `spec` with every possible subtask's parameter list made explicit,
/// so the envelope tells the model what to fill for each subtask.
pub fn resolve_subtask_parameters(kb: &KnowledgeBase, spec: &TaskWordSpec) -> TaskWordSpec {
    let mut resolved = spec.clone();
    for sub in &spec.possible_subtasks {
        if !resolved.subtask_parameters.contains_key(sub) {
            if let Some(params) = kb.subtask_parameters(spec, sub) {
                resolved.subtask_parameters.insert(sub.clone(), params.to_vec());
            }
        }
    }
    resolved
}

pub fn build_envelope(
    spec: &TaskWordSpec,
    instantiated: &BTreeMap<String, String>,
) -> Result<PromptEnvelope, PromptError> {
    if spec.is_terminal {
        return Err(PromptError::TerminalTask(spec.name.clone()));
    }
    if let Some(unknown) = instantiated.keys().find(|k| spec.parameter(k).is_none()) {
        return Err(PromptError::UnknownParameter {
            task: spec.name.clone(),
            parameter: unknown.clone(),
        });
    }
    Ok(PromptEnvelope {
        task: spec.name.clone(),
        introduction: spec.introduction.clone(),
        task_parameters: instantiated.clone(),
        possible_subtasks: spec.possible_subtasks.clone(),
        subtask_descriptions: spec.subtask_descriptions.clone(),
        subtask_parameters: spec.subtask_parameters.clone(),
        possible_subtask_sequences: spec.possible_subtask_sequences.clone(),
        rules: spec.rules.clone(),
    })
}

/// Fixed preamble plus optional few-shot examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub preamble: String,
    pub examples: Option<String>,
    pub example_repeats: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            preamble: PREAMBLE_V1.to_string(),
            examples: None,
            example_repeats: 1,
        }
    }
}

impl PromptTemplate {
    pub fn with_examples(mut self, examples: impl Into<String>, repeats: usize) -> Self {
        self.examples = Some(examples.into());
        self.example_repeats = repeats;
        self
    }

    pub fn render(&self, envelope: &PromptEnvelope, general_info: &str, remaining_depth: Option<usize>) -> String {
        let mut out = String::new();
        out.push_str(self.preamble.trim_end());
        out.push_str("\n\n");
        if let Some(examples) = &self.examples {
            out.push_str(EXAMPLES_HEADING);
            out.push('\n');
            for _ in 0..self.example_repeats {
                out.push_str(examples.trim_end());
                out.push_str("\n\n");
            }
        }
        out.push_str(ENVELOPE_HEADING);
        out.push_str("\n```json\n");
        out.push_str(&envelope.to_canonical_json());
        out.push_str("\n```\n\n");
        if let Some(depth) = remaining_depth {
            out.push_str(BUDGET_HEADING);
            out.push('\n');
            out.push_str(&format!(
                "{DEPTH_KEY} {depth}\nEvery subtask that is not an executable command must be \
                 fully decomposed within this many further levels.\n\n"
            ));
        }
        out.push_str(GENERAL_HEADING);
        out.push('\n');
        out.push_str(general_info);
        out.push('\n');
        out
    }

    pub fn build(
        &self,
        spec: &TaskWordSpec,
        instantiated: &BTreeMap<String, String>,
        general_info: &str,
        remaining_depth: Option<usize>,
    ) -> Result<String, PromptError> {
        let envelope = build_envelope(spec, instantiated)?;
        Ok(self.render(&envelope, general_info, remaining_depth))
    }
}

/// Renders the default template without a depth budget.
pub fn build_prompt(
    spec: &TaskWordSpec,
    instantiated: &BTreeMap<String, String>,
    general_info: &str,
) -> Result<String, PromptError> {
    PromptTemplate::default().build(spec, instantiated, general_info, None)
}

/// Recovers the envelope embedded in a prompt built by [`PromptTemplate`].
pub fn extract_envelope(prompt: &str) -> Option<PromptEnvelope> {
    let start = prompt.find(ENVELOPE_HEADING)? + ENVELOPE_HEADING.len();
    let object = first_json_object(&prompt[start..])?;
    serde_json::from_value(object).ok()
}

pub fn extract_remaining_depth(prompt: &str) -> Option<usize> {
    let start = prompt.find(BUDGET_HEADING)? + BUDGET_HEADING.len();
    prompt[start..]
        .lines()
        .find_map(|line| line.trim().strip_prefix(DEPTH_KEY))
        .and_then(|n| n.trim().parse().ok())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskStep {
    pub action: String,
    pub parameters: BTreeMap<String, String>,
}

impl SubtaskStep {
    pub fn new<K: Into<String>, V: Into<String>>(
        action: impl Into<String>,
        parameters: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            action: action.into(),
            parameters: parameters.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }
}

/// A parsed model response; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSequence {
    #[serde(rename = "subtask_sequence")]
    pub steps: Vec<SubtaskStep>,
}

impl OutputSequence {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sequence serializes")
    }

    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.action.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatCategory {
    NoJsonFound,
    WrongTopKey,
    EmptySequence,
    StepShape,
}

impl fmt::Display for FormatCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FormatCategory::NoJsonFound => "no-json-found",
            FormatCategory::WrongTopKey => "wrong-top-key",
            FormatCategory::EmptySequence => "empty-sequence",
            FormatCategory::StepShape => "step-shape",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("format error ({category}): {detail}")]
pub struct FormatError {
    pub category: FormatCategory,
    pub detail: String,
}

impl FormatError {
    fn new(category: FormatCategory, detail: impl Into<String>) -> Self {
        Self {
            category,
            detail: detail.into(),
        }
    }
}

/// The first `{` from which a complete JSON object parses.
fn first_json_object(text: &str) -> Option<Value> {
    text.char_indices().filter(|&(_, c)| c == '{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v @ Value::Object(_))) => Some(v),
            _ => None,
        }
    })
}

/// Extracts the first JSON object from raw model text (surrounding prose and
/// code fences are ignored) and checks it has exactly the response shape.
pub fn parse_output(text: &str) -> Result<OutputSequence, FormatError> {
    let Some(Value::Object(top)) = first_json_object(text) else {
        return Err(FormatError::new(
            FormatCategory::NoJsonFound,
            "no JSON object in response",
        ));
    };
    let keys: Vec<&str> = top.keys().map(String::as_str).collect();
    if keys != ["subtask_sequence"] {
        return Err(FormatError::new(
            FormatCategory::WrongTopKey,
            format!("expected the single key \"subtask_sequence\", found {keys:?}"),
        ));
    }
    let Value::Array(items) = &top["subtask_sequence"] else {
        return Err(FormatError::new(
            FormatCategory::StepShape,
            "\"subtask_sequence\" is not an array",
        ));
    };
    if items.is_empty() {
        return Err(FormatError::new(
            FormatCategory::EmptySequence,
            "\"subtask_sequence\" is empty",
        ));
    }
    let steps = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            parse_step(item).map_err(|d| FormatError::new(FormatCategory::StepShape, format!("step {}: {d}", i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OutputSequence { steps })
}

fn parse_step(item: &Value) -> Result<SubtaskStep, String> {
    let Value::Object(obj) = item else {
        return Err("not an object".into());
    };
    if let Some(extra) = obj.keys().find(|k| *k != "action" && *k != "parameters") {
        return Err(format!("unexpected key {extra:?}"));
    }
    let action = match obj.get("action") {
        Some(Value::String(a)) if !a.trim().is_empty() => a.clone(),
        Some(Value::String(_)) => return Err("empty \"action\"".into()),
        Some(_) => return Err("\"action\" is not text".into()),
        None => return Err("missing \"action\"".into()),
    };
    let params = match obj.get("parameters") {
        Some(Value::Object(p)) => p,
        Some(_) => return Err("\"parameters\" is not an object".into()),
        None => return Err("missing \"parameters\"".into()),
    };
    let mut parameters = BTreeMap::new();
    for (name, value) in params {
        let text = match value {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            _ => return Err(format!("parameter {name:?} is not a scalar value")),
        };
        parameters.insert(name.clone(), text);
    }
    Ok(SubtaskStep { action, parameters })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeMismatch {
    pub parameter: String,
    pub expected: ParamType,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub action: String,
    pub membership_ok: bool,
    pub parameters_ok: bool,
    pub missing_params: Vec<String>,
    pub type_errors: Vec<TypeMismatch>,
    pub extraneous_params: Vec<String>,
}

impl StepReport {
    /// The per-subtask success used by the parameter metric.
    pub fn is_ok(&self) -> bool {
        self.membership_ok && self.parameters_ok
    }
}

/// Which failures force a retry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationGate {
    /// Format, membership and parameters must all pass.
    #[default]
    Strict,
    /// Format and membership must pass; parameter faults are only recorded.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub format_ok: bool,
    pub step_reports: Vec<StepReport>,
    /// Informational: the actions equal one declared sequence.
    pub sequence_matches_declared: bool,
}

impl ValidationReport {
    pub fn format_failure() -> Self {
        Self {
            format_ok: false,
            step_reports: Vec::new(),
            sequence_matches_declared: false,
        }
    }

    pub fn all_ok(&self) -> bool {
        self.format_ok && self.step_reports.iter().all(StepReport::is_ok)
    }

    pub fn passes(&self, gate: ValidationGate) -> bool {
        match gate {
            ValidationGate::Strict => self.all_ok(),
            ValidationGate::Lenient => self.format_ok && self.step_reports.iter().all(|s| s.membership_ok),
        }
    }

    pub fn steps_ok(&self) -> usize {
        self.step_reports.iter().filter(|s| s.is_ok()).count()
    }

    /// One line per failing step, suitable for a corrective re-prompt.
    pub fn failure_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for (i, step) in self.step_reports.iter().enumerate() {
            let n = i + 1;
            if !step.membership_ok {
                lines.push(format!(
                    "step {n}: action {:?} is not one of possible_subtasks",
                    step.action
                ));
            }
            if !step.missing_params.is_empty() {
                lines.push(format!(
                    "step {n} ({}): missing parameters {:?}",
                    step.action, step.missing_params
                ));
            }
            if !step.extraneous_params.is_empty() {
                lines.push(format!(
                    "step {n} ({}): undeclared parameters {:?}",
                    step.action, step.extraneous_params
                ));
            }
            for t in &step.type_errors {
                lines.push(format!(
                    "step {n} ({}): parameter {:?} must be {} but was {:?}",
                    step.action, t.parameter, t.expected, t.value
                ));
            }
        }
        lines
    }
}

/// Checks each step against the parent word's vocabulary and parameter
/// declarations. Never fails; the report carries every fault.
pub fn validate_sequence(kb: &KnowledgeBase, parent: &TaskWordSpec, seq: &OutputSequence) -> ValidationReport {
    let step_reports = seq
        .steps
        .iter()
        .map(|step| {
            let membership_ok = parent.has_subtask(&step.action);
            let declared = kb.subtask_parameters(parent, &step.action);
            check_step(step, membership_ok, declared)
        })
        .collect();
    let actions: Vec<&str> = seq.actions().collect();
    let sequence_matches_declared = parent
        .possible_subtask_sequences
        .iter()
        .any(|declared| declared.iter().map(String::as_str).eq(actions.iter().copied()));
    ValidationReport {
        format_ok: true,
        step_reports,
        sequence_matches_declared,
    }
}

fn check_step(step: &SubtaskStep, membership_ok: bool, declared: Option<&[ParameterSpec]>) -> StepReport {
    let Some(declared) = declared else {
        return StepReport {
            action: step.action.clone(),
            membership_ok,
            parameters_ok: false,
            missing_params: Vec::new(),
            type_errors: Vec::new(),
            extraneous_params: step.parameters.keys().cloned().collect(),
        };
    };
    let missing_params: Vec<String> = declared
        .iter()
        .filter(|p| !step.parameters.contains_key(&p.name))
        .map(|p| p.name.clone())
        .collect();
    let extraneous_params: Vec<String> = step
        .parameters
        .keys()
        .filter(|name| !declared.iter().any(|p| &p.name == *name))
        .cloned()
        .collect();
    let type_errors: Vec<TypeMismatch> = declared
        .iter()
        .filter_map(|p| {
            let value = step.parameters.get(&p.name)?;
            (!p.type_tag.accepts(value)).then(|| TypeMismatch {
                parameter: p.name.clone(),
                expected: p.type_tag,
                value: value.clone(),
            })
        })
        .collect();
    StepReport {
        action: step.action.clone(),
        membership_ok,
        parameters_ok: missing_params.is_empty() && extraneous_params.is_empty() && type_errors.is_empty(),
        missing_params,
        type_errors,
        extraneous_params,
    }
}

/// Parses and validates in one go. A format failure is returned as `Err`.
pub fn check_response(
    kb: &KnowledgeBase,
    parent: &TaskWordSpec,
    text: &str,
) -> Result<(OutputSequence, ValidationReport), FormatError> {
    let seq = parse_output(text)?;
    let report = validate_sequence(kb, parent, &seq);
    Ok((seq, report))
}
