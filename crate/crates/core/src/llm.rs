//! Completion backends: live HTTP chat completion, deterministic replay of a
//! recorded script, and a rule-based oracle that expands envelopes directly
//! from the knowledge base.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::knowledge_base::{grounding_options, terminating_within, terminating_words, KnowledgeBase, TaskWordSpec};
use crate::prompt::{
    extract_envelope, extract_remaining_depth, FormatError, OutputSequence, PromptEnvelope, SubtaskStep,
    ValidationGate, ValidationReport,
};

pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Oracle,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Replay => "replay",
            BackendKind::Oracle => "oracle",
        })
    }
}

/// How replay entries are matched to calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayKeyMode {
    /// SHA-256 hex digest of the prompt text.
    #[default]
    Digest,
    /// Zero-based call index, as decimal text.
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API credential.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub key_mode: ReplayKeyMode,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub gate: ValidationGate,
    /// Merged verbatim into the HTTP request body (temperature and so on).
    #[serde(default)]
    pub extra_body: Map<String, Value>,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model: None,
            api_key_env: default_key_env(),
            script: None,
            key_mode: ReplayKeyMode::Digest,
            max_retries: DEFAULT_MAX_RETRIES,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            gate: ValidationGate::Strict,
            extra_body: Map::new(),
        }
    }

    pub fn oracle() -> Self {
        Self::new(BackendKind::Oracle)
    }

    pub fn replay(script: impl Into<PathBuf>, key_mode: ReplayKeyMode) -> Self {
        Self {
            script: Some(script.into()),
            key_mode,
            ..Self::new(BackendKind::Replay)
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            ..Self::new(BackendKind::Http)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let missing = |what: &str| Err(BackendError::Config(format!("{} backend requires {what}", self.kind)));
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => missing("an endpoint"),
            BackendKind::Http if self.model.is_none() => missing("a model name"),
            BackendKind::Replay if self.script.is_none() => missing("a script path"),
            _ if self.timeout_secs == 0 => Err(BackendError::Config("timeout must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("ReplayExhausted: no unused script entry for key {key}")]
    ReplayExhausted { key: String },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// One model interaction. Deterministic backends record timestamp 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub prompt: String,
    pub response: String,
    pub backend: BackendKind,
    pub timestamp_ms: u64,
    pub attempt: u32,
}

pub fn read_transcript(path: impl AsRef<Path>) -> std::io::Result<Vec<TranscriptEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

pub fn write_transcript(path: impl AsRef<Path>, entries: &[TranscriptEntry]) -> std::io::Result<()> {
    let mut file = File::create(path)?;
    for entry in entries {
        writeln!(file, "{}", serde_json::to_string(entry).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub key: String,
    pub response: String,
}

/// Scripted responses, each usable once.
pub struct ReplayBackend {
    entries: Vec<ReplayEntry>,
    mode: ReplayKeyMode,
    state: Mutex<ReplayState>,
}

#[derive(Default)]
struct ReplayState {
    used: Vec<bool>,
    calls: usize,
}

impl ReplayBackend {
    pub fn new(entries: Vec<ReplayEntry>, mode: ReplayKeyMode) -> Self {
        let used = vec![false; entries.len()];
        Self {
            entries,
            mode,
            state: Mutex::new(ReplayState { used, calls: 0 }),
        }
    }

    pub fn load(path: impl AsRef<Path>, mode: ReplayKeyMode) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read script {}: {e}", path.display())))?;
        let entries: Vec<ReplayEntry> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("malformed script {}: {e}", path.display())))?;
        Ok(Self::new(entries, mode))
    }

    /// A digest-keyed script answering every recorded prompt with its recorded response.
    pub fn from_transcript(entries: &[TranscriptEntry]) -> Self {
        let script = entries
            .iter()
            .map(|e| ReplayEntry {
                key: prompt_digest(&e.prompt),
                response: e.response.clone(),
            })
            .collect();
        Self::new(script, ReplayKeyMode::Digest)
    }
}

impl CompletionBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut state = self.state.lock().expect("replay state poisoned");
        let key = match self.mode {
            ReplayKeyMode::Digest => prompt_digest(prompt),
            ReplayKeyMode::Ordinal => state.calls.to_string(),
        };
        state.calls += 1;
        let found = self
            .entries
            .iter()
            .enumerate()
            .position(|(i, e)| !state.used[i] && e.key == key);
        match found {
            Some(i) => {
                state.used[i] = true;
                Ok(self.entries[i].response.clone())
            }
            None => Err(BackendError::ReplayExhausted { key }),
        }
    }
}

/// Expands an envelope by rule: take the first grounding option whose
/// members all finish within the remaining depth (falling back to the first
/// option), and fill each parameter from the same-named parent parameter or
/// else from the literal parameter description.
pub struct OracleBackend {
    kbs: Vec<Arc<KnowledgeBase>>,
}

impl OracleBackend {
    pub fn new(kbs: Vec<Arc<KnowledgeBase>>) -> Self {
        Self { kbs }
    }

    fn resolve(&self, envelope: &PromptEnvelope) -> Option<(&KnowledgeBase, &TaskWordSpec)> {
        self.kbs.iter().find_map(|kb| {
            let word = kb.get(&envelope.task)?;
            (!word.is_terminal && word.possible_subtasks == envelope.possible_subtasks).then_some((kb.as_ref(), word))
        })
    }

    pub fn expand(
        &self,
        envelope: &PromptEnvelope,
        remaining_depth: Option<usize>,
    ) -> Result<OutputSequence, BackendError> {
        let (kb, word) = self.resolve(envelope).ok_or_else(|| {
            BackendError::Oracle(format!("no knowledge base defines expandable word {:?}", envelope.task))
        })?;
        let grounded = match remaining_depth {
            Some(0) => Default::default(),
            Some(r) => terminating_within(kb, r - 1),
            None => terminating_words(kb),
        };
        let options = grounding_options(word);
        let chosen = options
            .iter()
            .find(|opt| opt.iter().all(|s| grounded.contains(s)))
            .or_else(|| options.first())
            .ok_or_else(|| BackendError::Oracle(format!("{:?} has no possible subtasks", word.name)))?;
        let steps = chosen
            .iter()
            .map(|action| {
                let declared = envelope
                    .subtask_parameters
                    .get(*action)
                    .map(Vec::as_slice)
                    .or_else(|| kb.subtask_parameters(word, action))
                    .unwrap_or_default();
                let parameters: BTreeMap<String, String> = declared
                    .iter()
                    .map(|p| {
                        let value = [envelope.task_parameters.get(&p.name), Some(&p.description)]
                            .into_iter()
                            .flatten()
                            .find(|v| p.type_tag.accepts(v))
                            .cloned()
                            .unwrap_or_else(|| p.type_tag.placeholder().to_string());
                        (p.name.clone(), value)
                    })
                    .collect();
                SubtaskStep {
                    action: action.to_string(),
                    parameters,
                }
            })
            .collect();
        Ok(OutputSequence { steps })
    }
}

impl CompletionBackend for OracleBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let envelope = extract_envelope(prompt)
            .ok_or_else(|| BackendError::Oracle("prompt does not contain a task envelope".into()))?;
        Ok(self.expand(&envelope, extract_remaining_depth(prompt))?.to_json())
    }
}

/// Chat-completion client speaking the common `messages`/`choices` shape.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    extra_body: Map<String, Value>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            agent,
            endpoint: config.endpoint.clone().unwrap_or_default(),
            model: config.model.clone().unwrap_or_default(),
            api_key,
            extra_body: config.extra_body.clone(),
        })
    }

    fn request_body(&self, prompt: &str) -> Value {
        let mut body = self.extra_body.clone();
        body.insert("model".into(), json!(self.model));
        body.insert("messages".into(), json!([{ "role": "user", "content": prompt }]));
        Value::Object(body)
    }
}

impl CompletionBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(self.request_body(prompt))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("unreadable response body: {e}")))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))
    }
}

/// Outcome of one validated attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub response: String,
    pub outcome: Result<ValidationReport, FormatError>,
}

impl AttemptRecord {
    pub fn format_failed(&self) -> bool {
        self.outcome.is_err()
    }
}

#[derive(Debug, Clone)]
pub struct Validated {
    pub response: String,
    pub attempts: u32,
    pub history: Vec<AttemptRecord>,
}

#[derive(Debug, Clone, Error)]
pub enum CompletionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("validation failed after {} attempts: {}", .attempts.len(), summarize_last(.attempts))]
    ValidationExhausted { attempts: Vec<AttemptRecord> },
}

fn summarize_last(attempts: &[AttemptRecord]) -> String {
    match attempts.last().map(|a| &a.outcome) {
        Some(Err(e)) => e.to_string(),
        Some(Ok(report)) => report.failure_lines().join("; "),
        None => String::new(),
    }
}

struct TranscriptLog {
    next_seq: u64,
    entries: Vec<TranscriptEntry>,
    sink: Option<File>,
}

/// A backend plus retry policy and an append-only transcript.
pub struct LlmClient {
    backend: Box<dyn CompletionBackend>,
    max_retries: u32,
    gate: ValidationGate,
    log: Mutex<TranscriptLog>,
}

impl LlmClient {
    pub fn new(backend: Box<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            max_retries: DEFAULT_MAX_RETRIES,
            gate: ValidationGate::Strict,
            log: Mutex::new(TranscriptLog {
                next_seq: 1,
                entries: Vec::new(),
                sink: None,
            }),
        }
    }

    /// `oracle_kbs` is only consulted by the oracle backend.
    pub fn from_config(config: &BackendConfig, oracle_kbs: Vec<Arc<KnowledgeBase>>) -> Result<Self, BackendError> {
        config.validate()?;
        let backend: Box<dyn CompletionBackend> = match config.kind {
            BackendKind::Http => Box::new(HttpBackend::new(config)?),
            BackendKind::Replay => Box::new(ReplayBackend::load(
                config.script.as_ref().expect("validated"),
                config.key_mode,
            )?),
            BackendKind::Oracle => Box::new(OracleBackend::new(oracle_kbs)),
        };
        Ok(Self::new(backend)
            .with_retries(config.max_retries)
            .with_gate(config.gate))
    }

    pub fn oracle(kbs: Vec<Arc<KnowledgeBase>>) -> Self {
        Self::new(Box::new(OracleBackend::new(kbs)))
    }

    pub fn replay(entries: Vec<ReplayEntry>, mode: ReplayKeyMode) -> Self {
        Self::new(Box::new(ReplayBackend::new(entries, mode)))
    }

    pub fn with_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn with_gate(mut self, gate: ValidationGate) -> Self {
        self.gate = gate;
        self
    }

    /// Also stream every transcript entry to `path` as JSON lines.
    pub fn with_transcript_file(self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log.lock().expect("transcript poisoned").sink = Some(file);
        Ok(self)
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    pub fn gate(&self) -> ValidationGate {
        self.gate
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.log.lock().expect("transcript poisoned").entries.clone()
    }

    pub fn transcript_len(&self) -> usize {
        self.log.lock().expect("transcript poisoned").entries.len()
    }

    pub fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.complete_attempt(prompt, 1)
    }

    fn complete_attempt(&self, prompt: &str, attempt: u32) -> Result<String, BackendError> {
        let response = self.backend.complete(prompt)?;
        let timestamp_ms = match self.backend.kind() {
            BackendKind::Http => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or_default(),
            BackendKind::Replay | BackendKind::Oracle => 0,
        };
        let mut log = self.log.lock().expect("transcript poisoned");
        let entry = TranscriptEntry {
            seq: log.next_seq,
            prompt: prompt.to_string(),
            response: response.clone(),
            backend: self.backend.kind(),
            timestamp_ms,
            attempt,
        };
        log.next_seq += 1;
        if let Some(sink) = log.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(sink, "{line}").map_err(|e| BackendError::Transport(format!("transcript write failed: {e}")))?;
        }
        log.entries.push(entry);
        Ok(response)
    }

    /// Completes and validates, re-prompting with the failures appended
    /// until the response passes the gate or retries run out.
    pub fn complete_validated<F>(&self, prompt: &str, validator: F) -> Result<Validated, CompletionError>
    where
        F: Fn(&str) -> Result<ValidationReport, FormatError>,
    {
        let mut history: Vec<AttemptRecord> = Vec::new();
        let mut current = prompt.to_string();
        for attempt in 1..=self.max_retries + 1 {
            let response = self.complete_attempt(&current, attempt)?;
            let outcome = validator(&response);
            let passed = matches!(&outcome, Ok(report) if report.passes(self.gate));
            let record = AttemptRecord { response, outcome };
            if passed {
                let response = record.response.clone();
                history.push(record);
                return Ok(Validated {
                    response,
                    attempts: attempt,
                    history,
                });
            }
            current = corrective_prompt(prompt, &record);
            history.push(record);
        }
        Err(CompletionError::ValidationExhausted { attempts: history })
    }
}

fn corrective_prompt(original: &str, failed: &AttemptRecord) -> String {
    let mut out = original.to_string();
    out.push_str("\n## Corrections\nYour previous reply was rejected:\n");
    match &failed.outcome {
        Err(format) => out.push_str(&format!("- {format}\n")),
        Ok(report) => {
            for line in report.failure_lines() {
                out.push_str(&format!("- {line}\n"));
            }
        }
    }
    out.push_str("Reply again with one corrected JSON object.\n");
    out
}
