//! Task-word knowledge base.
//!
//! A knowledge base is a named set of task words. Each word either is
//! terminal (a command a robot can execute directly) or lists the subtasks it
//! may expand into together with suggested subtask orderings. The two
//! relations "may generate" and "may be followed by" make the words a
//! directed graph; [`build_subtask_graph`] materializes it.
//!
//! The on-disk format is a single JSON document (`*.tnkb.json`):
//!
//! ```json
//! {
//!   "metadata": { "name": "desk-lamp", "version": "1", "description": "..." },
//!   "task_words": {
//!     "AssembleParts": {
//!       "is_func": true,
//!       "introduction": "Join two parts.",
//!       "parameters": [{ "name": "part_a", "type": "str", "description": "..." }]
//!     }
//!   }
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File extension used for knowledge base documents.
pub const KB_EXTENSION: &str = ".tnkb.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Int,
    Str,
    Float,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::Int => "int",
            ParamType::Str => "str",
            ParamType::Float => "float",
        }
    }

    /// Syntactic check only: `int` is optionally signed digits, `float` a
    /// decimal literal (integers included), `str` anything.
    pub fn accepts(self, value: &str) -> bool {
        let v = value.trim();
        match self {
            ParamType::Str => true,
            ParamType::Int => {
                let digits = v.strip_prefix(['+', '-']).unwrap_or(v);
                !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
            }
            ParamType::Float => is_decimal_literal(v),
        }
    }

    /// A placeholder value that always passes [`ParamType::accepts`].
    pub fn placeholder(self) -> &'static str {
        match self {
            ParamType::Int => "0",
            ParamType::Float => "0.0",
            ParamType::Str => "",
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn is_decimal_literal(v: &str) -> bool {
    let body = v.strip_prefix(['+', '-']).unwrap_or(v);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (mantissa, None),
    };
    let all_digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    let mantissa_ok = all_digits(int_part)
        && frac_part.is_none_or(all_digits)
        && (!int_part.is_empty() || frac_part.is_some_and(|f| !f.is_empty()));
    let exponent_ok = exponent.is_none_or(|e| {
        let e = e.strip_prefix(['+', '-']).unwrap_or(e);
        !e.is_empty() && all_digits(e)
    });
    mantissa_ok && exponent_ok
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: ParamType,
    #[serde(default)]
    pub description: String,
}

impl ParameterSpec {
    pub fn new(name: impl Into<String>, type_tag: ParamType, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            type_tag,
            description: description.into(),
        }
    }
}

/// One node of the knowledge graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWordSpec {
    /// Filled from the key of the `task_words` map when loading.
    #[serde(skip)]
    pub name: String,
    #[serde(rename = "is_func")]
    pub is_terminal: bool,
    #[serde(default)]
    pub introduction: String,
    #[serde(default)]
    pub parameters: Vec<ParameterSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub possible_subtasks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subtask_descriptions: Vec<String>,
    /// Per-parent parameter overrides; a subtask missing here uses its own
    /// parameter list.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subtask_parameters: BTreeMap<String, Vec<ParameterSpec>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub possible_subtask_sequences: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub rules: String,
}

impl TaskWordSpec {
    pub fn terminal(name: impl Into<String>, parameters: Vec<ParameterSpec>) -> Self {
        Self {
            name: name.into(),
            is_terminal: true,
            introduction: String::new(),
            parameters,
            possible_subtasks: Vec::new(),
            subtask_descriptions: Vec::new(),
            subtask_parameters: BTreeMap::new(),
            possible_subtask_sequences: Vec::new(),
            rules: String::new(),
        }
    }

    /// A non-terminal word whose subtasks get empty descriptions.
    pub fn compound(
        name: impl Into<String>,
        parameters: Vec<ParameterSpec>,
        possible_subtasks: Vec<String>,
        sequences: Vec<Vec<String>>,
    ) -> Self {
        let descriptions = vec![String::new(); possible_subtasks.len()];
        Self {
            name: name.into(),
            is_terminal: false,
            introduction: String::new(),
            parameters,
            possible_subtasks,
            subtask_descriptions: descriptions,
            subtask_parameters: BTreeMap::new(),
            possible_subtask_sequences: sequences,
            rules: String::new(),
        }
    }

    pub fn with_introduction(mut self, introduction: impl Into<String>) -> Self {
        self.introduction = introduction.into();
        self
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn has_subtask(&self, name: &str) -> bool {
        self.possible_subtasks.iter().any(|s| s == name)
    }

    /// Per-word structural checks; the first violation is returned.
    fn check_shape(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("task word name is empty".into());
        }
        check_parameter_list(&self.parameters).map_err(|e| format!("parameters: {e}"))?;
        for (sub, params) in &self.subtask_parameters {
            check_parameter_list(params).map_err(|e| format!("subtask_parameters.{sub}: {e}"))?;
        }
        if self.is_terminal && !(self.possible_subtasks.is_empty() && self.possible_subtask_sequences.is_empty()) {
            return Err("terminal task word lists possible subtasks".into());
        }
        if self.subtask_descriptions.len() != self.possible_subtasks.len() {
            return Err(format!(
                "subtask_descriptions has {} entries but possible_subtasks has {}",
                self.subtask_descriptions.len(),
                self.possible_subtasks.len()
            ));
        }
        for seq in &self.possible_subtask_sequences {
            if let Some(stray) = seq.iter().find(|s| !self.has_subtask(s)) {
                return Err(format!("sequence member {stray:?} is not a possible subtask"));
            }
        }
        Ok(())
    }
}

fn check_parameter_list(params: &[ParameterSpec]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for p in params {
        if p.name.is_empty() {
            return Err("parameter name is empty".into());
        }
        if !seen.insert(p.name.as_str()) {
            return Err(format!("duplicate parameter {:?}", p.name));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbMetadata {
    pub name: String,
    #[serde(default)]
    pub version: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error in {field}: {message}")]
    Schema { field: String, message: String },
    #[error("unknown task word {name:?}{}", suggestion_suffix(.suggestion))]
    UnknownTaskWord { name: String, suggestion: Option<String> },
    #[error("cannot read knowledge base: {0}")]
    Io(#[from] std::io::Error),
}

fn suggestion_suffix(suggestion: &Option<String>) -> String {
    match suggestion {
        Some(s) => format!(" (did you mean {s:?}?)"),
        None => String::new(),
    }
}

impl Clone for KbError {
    fn clone(&self) -> Self {
        match self {
            KbError::Syntax { line, column, message } => KbError::Syntax {
                line: *line,
                column: *column,
                message: message.clone(),
            },
            KbError::Schema { field, message } => KbError::Schema {
                field: field.clone(),
                message: message.clone(),
            },
            KbError::UnknownTaskWord { name, suggestion } => KbError::UnknownTaskWord {
                name: name.clone(),
                suggestion: suggestion.clone(),
            },
            KbError::Io(e) => KbError::Io(std::io::Error::new(e.kind(), e.to_string())),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbDocument {
    metadata: KbMetadata,
    task_words: BTreeMap<String, TaskWordSpec>,
}

/// Immutable after construction; share it freely between planners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub metadata: KbMetadata,
    task_words: BTreeMap<String, TaskWordSpec>,
}

impl KnowledgeBase {
    /// Builds a knowledge base without checking any invariant. Use
    /// [`validate_knowledge_base`] to inspect the result.
    pub fn from_words(metadata: KbMetadata, words: impl IntoIterator<Item = TaskWordSpec>) -> Self {
        let task_words = words.into_iter().map(|w| (w.name.clone(), w)).collect();
        Self { metadata, task_words }
    }

    pub fn from_json_str(text: &str) -> Result<Self, KbError> {
        let doc: KbDocument = serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => KbError::Schema {
                field: schema_field_of(&e),
                message: e.to_string(),
            },
            _ => KbError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        })?;
        let mut task_words = doc.task_words;
        for (name, word) in task_words.iter_mut() {
            word.name = name.clone();
            word.check_shape().map_err(|message| KbError::Schema {
                field: format!("task_words.{name}"),
                message,
            })?;
        }
        Ok(Self {
            metadata: doc.metadata,
            task_words,
        })
    }

    pub fn from_reader(mut reader: impl std::io::Read) -> Result<Self, KbError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        Self::from_json_str(&text)
    }

    pub fn len(&self) -> usize {
        self.task_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_words.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.task_words.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&TaskWordSpec> {
        self.task_words.get(name)
    }

    /// Words in lexicographic order.
    pub fn words(&self) -> impl Iterator<Item = &TaskWordSpec> {
        self.task_words.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.task_words.keys().map(String::as_str)
    }

    /// Parameters the parent expects for `subtask`: the parent's override if
    /// declared, otherwise the subtask's own list.
    pub fn subtask_parameters<'a>(&'a self, parent: &'a TaskWordSpec, subtask: &str) -> Option<&'a [ParameterSpec]> {
        parent
            .subtask_parameters
            .get(subtask)
            .map(Vec::as_slice)
            .or_else(|| self.get(subtask).map(|w| w.parameters.as_slice()))
    }

    /// Canonical pretty JSON; loading it again yields an equal value.
    pub fn to_json_string(&self) -> String {
        let doc = KbDocument {
            metadata: self.metadata.clone(),
            task_words: self.task_words.clone(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("knowledge base serializes");
        text.push('\n');
        text
    }
}

fn schema_field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    for marker in ["missing field `", "unknown field `", "duplicate field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(field) = rest.split('`').next() {
                return field.to_string();
            }
        }
    }
    "document".to_string()
}

pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<KnowledgeBase, KbError> {
    let text = fs::read_to_string(path)?;
    KnowledgeBase::from_json_str(&text)
}

pub fn lookup<'a>(kb: &'a KnowledgeBase, name: &str) -> Result<&'a TaskWordSpec, KbError> {
    kb.get(name).ok_or_else(|| KbError::UnknownTaskWord {
        name: name.to_string(),
        suggestion: nearest_name(kb, name),
    })
}

fn nearest_name(kb: &KnowledgeBase, name: &str) -> Option<String> {
    kb.names()
        .map(|candidate| {
            (
                strsim::levenshtein(&candidate.to_lowercase(), &name.to_lowercase()),
                candidate,
            )
        })
        .filter(|(dist, candidate)| *dist <= candidate.len().max(name.len()) / 2)
        .min()
        .map(|(_, candidate)| candidate.to_string())
}

/// Both relations between task words, in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SubtaskGraph {
    pub nodes: Vec<String>,
    /// `(parent, child)`: the parent may generate a sequence containing the child.
    pub generates_edges: Vec<(String, String)>,
    /// `(earlier, later)`: adjacent inside some declared sequence.
    pub succeeds_edges: Vec<(String, String)>,
}

impl SubtaskGraph {
    pub fn children_of<'a>(&'a self, parent: &'a str) -> impl Iterator<Item = &'a str> {
        self.generates_edges
            .iter()
            .filter(move |(p, _)| p == parent)
            .map(|(_, c)| c.as_str())
    }
}

pub fn build_subtask_graph(kb: &KnowledgeBase) -> SubtaskGraph {
    let mut generates = BTreeSet::new();
    let mut succeeds = BTreeSet::new();
    for word in kb.words() {
        for child in &word.possible_subtasks {
            generates.insert((word.name.clone(), child.clone()));
        }
        for seq in &word.possible_subtask_sequences {
            for pair in seq.windows(2) {
                succeeds.insert((pair[0].clone(), pair[1].clone()));
            }
        }
    }
    SubtaskGraph {
        nodes: kb.names().map(str::to_string).collect(),
        generates_edges: generates.into_iter().collect(),
        succeeds_edges: succeeds.into_iter().collect(),
    }
}

/// The groundings a non-terminal word may use: its declared sequences, or
/// each possible subtask on its own when no sequence is declared.
pub fn grounding_options(word: &TaskWordSpec) -> Vec<Vec<&str>> {
    if word.possible_subtask_sequences.is_empty() {
        word.possible_subtasks.iter().map(|s| vec![s.as_str()]).collect()
    } else {
        word.possible_subtask_sequences
            .iter()
            .map(|seq| seq.iter().map(String::as_str).collect())
            .collect()
    }
}

fn grounded_by(kb: &KnowledgeBase, word: &TaskWordSpec, grounded: &BTreeSet<&str>) -> bool {
    grounding_options(word)
        .iter()
        .any(|option| option.iter().all(|s| kb.contains(s) && grounded.contains(s)))
}

/// Least fixpoint of "can reach an all-terminal frontier".
pub fn terminating_words(kb: &KnowledgeBase) -> BTreeSet<&str> {
    let mut grounded: BTreeSet<&str> = kb.words().filter(|w| w.is_terminal).map(|w| w.name.as_str()).collect();
    loop {
        let newly: Vec<&str> = kb
            .words()
            .filter(|w| !grounded.contains(w.name.as_str()) && grounded_by(kb, w, &grounded))
            .map(|w| w.name.as_str())
            .collect();
        if newly.is_empty() {
            return grounded;
        }
        grounded.extend(newly);
    }
}

pub fn can_terminate(kb: &KnowledgeBase, name: &str) -> Result<bool, KbError> {
    lookup(kb, name)?;
    Ok(terminating_words(kb).contains(name))
}

/// Words that ground within `depth` expansion levels. A terminal word needs
/// none; a non-terminal word needs one level plus a grounding whose members
/// all ground within `depth - 1`.
pub fn terminating_within(kb: &KnowledgeBase, depth: usize) -> BTreeSet<&str> {
    let mut grounded: BTreeSet<&str> = kb.words().filter(|w| w.is_terminal).map(|w| w.name.as_str()).collect();
    for _ in 0..depth {
        let next: BTreeSet<&str> = kb
            .words()
            .filter(|w| w.is_terminal || grounded_by(kb, w, &grounded))
            .map(|w| w.name.as_str())
            .collect();
        if next == grounded {
            break;
        }
        grounded = next;
    }
    grounded
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Diagnostic {
    pub severity: Severity,
    pub word: String,
    pub message: String,
}

impl Diagnostic {
    fn error(word: &str, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            word: word.to_string(),
            message: message.into(),
        }
    }

    fn warning(word: &str, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            word: word.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.severity, self.word, self.message)
    }
}

pub fn has_errors(diagnostics: &[Diagnostic]) -> bool {
    diagnostics.iter().any(|d| d.severity == Severity::Error)
}

/// Errors first, then warnings; each group sorted by word and message.
pub fn validate_knowledge_base(kb: &KnowledgeBase) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for word in kb.words() {
        let name = word.name.as_str();
        if let Err(msg) = check_parameter_list(&word.parameters) {
            out.push(Diagnostic::error(name, msg));
        }
        if word.is_terminal && !word.possible_subtasks.is_empty() {
            out.push(Diagnostic::error(name, "terminal task word lists possible subtasks"));
        }
        if word.is_terminal && !word.possible_subtask_sequences.is_empty() {
            out.push(Diagnostic::error(name, "terminal task word lists subtask sequences"));
        }
        if word.subtask_descriptions.len() != word.possible_subtasks.len() {
            out.push(Diagnostic::error(
                name,
                format!(
                    "{} subtask descriptions for {} possible subtasks",
                    word.subtask_descriptions.len(),
                    word.possible_subtasks.len()
                ),
            ));
        }
        let referenced: BTreeSet<&str> = word
            .possible_subtasks
            .iter()
            .chain(word.subtask_parameters.keys())
            .map(String::as_str)
            .collect();
        for sub in referenced {
            if !kb.contains(sub) {
                out.push(Diagnostic::error(
                    name,
                    format!("references undeclared subtask {sub:?}"),
                ));
            }
        }
        for (sub, params) in &word.subtask_parameters {
            if let Err(msg) = check_parameter_list(params) {
                out.push(Diagnostic::error(
                    name,
                    format!("subtask_parameters for {sub:?}: {msg}"),
                ));
            }
            if let Some(target) = kb.get(sub) {
                for p in params {
                    if target.parameter(&p.name).is_none() {
                        out.push(Diagnostic::error(
                            name,
                            format!("override parameter {:?} is not declared by {sub:?}", p.name),
                        ));
                    }
                }
            }
        }
        let stray: BTreeSet<&str> = word
            .possible_subtask_sequences
            .iter()
            .flatten()
            .filter(|s| !word.has_subtask(s))
            .map(String::as_str)
            .collect();
        for s in stray {
            out.push(Diagnostic::error(
                name,
                format!("sequence member {s:?} is not a possible subtask"),
            ));
        }
        if !word.possible_subtask_sequences.is_empty() {
            let used: BTreeSet<&str> = word
                .possible_subtask_sequences
                .iter()
                .flatten()
                .map(String::as_str)
                .collect();
            for sub in &word.possible_subtasks {
                if !used.contains(sub.as_str()) {
                    out.push(Diagnostic::warning(
                        name,
                        format!("possible subtask {sub:?} appears in no sequence"),
                    ));
                }
            }
        }
        if word.introduction.trim().is_empty() {
            out.push(Diagnostic::warning(name, "empty introduction"));
        }
    }
    let grounded = terminating_words(kb);
    for word in kb.words().filter(|w| !w.is_terminal) {
        if !grounded.contains(word.name.as_str()) {
            out.push(Diagnostic::error(&word.name, "cannot reach a terminal word"));
        }
    }
    out.sort();
    out.dedup();
    out
}
