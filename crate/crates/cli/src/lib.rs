//! `tasknet` commands. Each command writes to the given streams and returns
//! its exit code: 0 success, 1 domain failure, 2 usage or I/O failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use tasknet_core::eval::{load_cases, run_eval, EvalError, EvalSetup, VerdictSource};
use tasknet_core::knowledge_base::{has_errors, load_knowledge_base, validate_knowledge_base, KnowledgeBase};
use tasknet_core::llm::{
    prompt_digest, read_transcript, BackendConfig, BackendKind, LlmClient, ReplayBackend, ReplayKeyMode,
    TranscriptEntry,
};
use tasknet_core::orchestration::{generate_task_tree, AllocationPolicy, Allocator, Manager, Planner, RobotState};
use tasknet_core::prompt::ValidationGate;
use tasknet_core::sim::AliasMode;
use tasknet_core::tree::{first_divergence, forest_from_json, forest_to_json, ExecutableStep, ExpansionLimits};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tasknet",
    version,
    about = "Plan robot assembly tasks by growing task trees from a knowledge graph"
)]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check knowledge base files and print diagnostics.
    KbValidate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Turn an instruction into an allocated plan.
    Plan(PlanArgs),
    /// Score repeated generations over a case file.
    Eval(EvalArgs),
    /// Re-run a recorded session and compare the trees byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Oracle,
    Replay,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KeyModeArg {
    Digest,
    Ordinal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GateArg {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    RoundRobin,
    CapabilityFirst,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AliasArg {
    Resolve,
    Strict,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Manager knowledge base (entry word plus total task words).
    #[arg(long)]
    pub manager: PathBuf,
    /// Planner knowledge base; repeat for several planners.
    #[arg(long = "kb", required = true)]
    pub kbs: Vec<PathBuf>,
    /// Entry word of the manager knowledge base, if it has several.
    #[arg(long)]
    pub entry: Option<String>,
    #[arg(long, value_enum, default_value = "oracle")]
    pub backend: BackendArg,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Replay script: JSON list of {key, response}.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "digest")]
    pub key_mode: KeyModeArg,
    /// Environment variable holding the API credential.
    #[arg(long, default_value = tasknet_core::llm::DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
    #[arg(long, default_value_t = tasknet_core::llm::DEFAULT_MAX_RETRIES)]
    pub retries: u32,
    /// HTTP timeout in seconds.
    #[arg(long, default_value_t = tasknet_core::llm::DEFAULT_TIMEOUT_SECS)]
    pub timeout: u64,
    #[arg(long, value_enum, default_value = "strict")]
    pub gate: GateArg,
    #[arg(long, default_value_t = 8)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 512)]
    pub max_nodes: usize,
    #[arg(long, default_value_t = 256)]
    pub max_expansions: usize,
    /// Robot fleet file; defaults to one robot able to run every terminal word.
    #[arg(long)]
    pub robots: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "round-robin")]
    pub policy: PolicyArg,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub instruction: String,
    /// Free-text state information handed to the manager.
    #[arg(long, default_value = "")]
    pub state: String,
    /// Directory for tree.json, plan.jsonl, transcript.jsonl and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Case file: JSON list of {id, instruction, state, scenario | verdicts}.
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: u32,
    /// External verdict file used for every case instead of the simulator.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "resolve")]
    pub alias_mode: AliasArg,
    /// Row label of the table; defaults to the model or backend name.
    #[arg(long)]
    pub label: Option<String>,
    /// Directory for report.json, report.txt and transcript.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Recorded transcript.jsonl, or the session directory holding it.
    pub transcript: PathBuf,
}

/// Written next to the tree so a session can be replayed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instruction: String,
    pub state: String,
    /// SHA-256 of each recorded response, in transcript order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub response_digests: Vec<String>,
}

pub const TREE_FILE: &str = "tree.json";
pub const PLAN_FILE: &str = "plan.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";

/// A command failure: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn domain(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let result = match cli.command {
        Command::KbValidate { paths } => cmd_kb_validate(&paths, out),
        Command::Plan(args) => cmd_plan(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Replay(args) => cmd_replay(&args, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(failure) => {
            let _ = writeln!(err, "error: {}", failure.message);
            failure.code
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

pub fn cmd_kb_validate(paths: &[PathBuf], out: &mut dyn Write) -> CmdResult {
    let mut errors = false;
    for path in paths {
        let kb = load_knowledge_base(path).map_err(|e| io_failure(path, e))?;
        let diagnostics = validate_knowledge_base(&kb);
        errors |= has_errors(&diagnostics);
        for d in diagnostics {
            let _ = if paths.len() > 1 {
                writeln!(out, "{}: {d}", path.display())
            } else {
                writeln!(out, "{d}")
            };
        }
    }
    if errors {
        Err(Failure::domain("knowledge base validation failed"))
    } else {
        Ok(())
    }
}

struct Pipeline {
    manager: Manager,
    allocator: Allocator,
    oracle_kbs: Vec<Arc<KnowledgeBase>>,
}

impl PipelineArgs {
    fn backend_config(&self) -> BackendConfig {
        let kind = match self.backend {
            BackendArg::Oracle => BackendKind::Oracle,
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Http => BackendKind::Http,
        };
        BackendConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            script: self.script.clone(),
            key_mode: match self.key_mode {
                KeyModeArg::Digest => ReplayKeyMode::Digest,
                KeyModeArg::Ordinal => ReplayKeyMode::Ordinal,
            },
            max_retries: self.retries,
            timeout_secs: self.timeout,
            gate: self.gate(),
            ..BackendConfig::new(kind)
        }
    }

    fn gate(&self) -> ValidationGate {
        match self.gate {
            GateArg::Strict => ValidationGate::Strict,
            GateArg::Lenient => ValidationGate::Lenient,
        }
    }

    fn client(&self, pipeline: &Pipeline) -> Result<LlmClient, Failure> {
        LlmClient::from_config(&self.backend_config(), pipeline.oracle_kbs.clone())
            .map_err(|e| Failure::usage(e.to_string()))
    }

    /// Loads and validates every knowledge base, the manager registry and
    /// the fleet.
    fn load(&self) -> Result<Pipeline, Failure> {
        let limits = ExpansionLimits::new(self.max_depth, self.max_nodes, self.max_expansions)
            .map_err(|e| Failure::usage(e.to_string()))?;
        let manager_kb = Arc::new(load_knowledge_base(&self.manager).map_err(|e| io_failure(&self.manager, e))?);
        let mut manager = match &self.entry {
            Some(entry) => Manager::with_entry(manager_kb.clone(), entry),
            None => Manager::new(manager_kb.clone()),
        }
        .map_err(|e| Failure::domain(e.to_string()))?;
        let mut oracle_kbs = vec![manager_kb];
        let mut terminal_words = std::collections::BTreeSet::new();
        for path in &self.kbs {
            let kb = Arc::new(load_knowledge_base(path).map_err(|e| io_failure(path, e))?);
            let name = if kb.metadata.name.is_empty() {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            } else {
                kb.metadata.name.clone()
            };
            terminal_words.extend(kb.words().filter(|w| w.is_terminal).map(|w| w.name.clone()));
            let planner = Arc::new(Planner::new(name, kb.clone()).with_limits(limits));
            manager.register_serving(planner);
            oracle_kbs.push(kb);
        }
        manager.validate().map_err(|e| Failure::domain(e.to_string()))?;
        let policy = match self.policy {
            PolicyArg::RoundRobin => AllocationPolicy::RoundRobin,
            PolicyArg::CapabilityFirst => AllocationPolicy::CapabilityFirst,
        };
        let allocator = match &self.robots {
            Some(path) => Allocator::load(path, policy).map_err(|e| Failure::usage(e.to_string()))?,
            None => Allocator::new(vec![RobotState::new("robot-1", terminal_words)], policy)
                .map_err(|e| Failure::usage(e.to_string()))?,
        };
        Ok(Pipeline {
            manager,
            allocator,
            oracle_kbs,
        })
    }
}

fn step_line(index: usize, step: &ExecutableStep) -> String {
    let params: Vec<String> = step.parameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let robot = step.robot.as_deref().unwrap_or("-");
    format!("{}. {}({}) @ {robot}", index + 1, step.action, params.join(", "))
}

fn plan_jsonl(plan: &[ExecutableStep]) -> String {
    plan.iter()
        .map(|s| serde_json::to_string(s).expect("step serializes") + "\n")
        .collect()
}

pub fn cmd_plan(args: &PlanArgs, out: &mut dyn Write) -> CmdResult {
    let pipeline = args.pipeline.load()?;
    let mut client = args.pipeline.client(&pipeline)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        let transcript = dir.join(TRANSCRIPT_FILE);
        if transcript.exists() {
            fs::remove_file(&transcript).map_err(|e| io_failure(&transcript, e))?;
        }
        client = client
            .with_transcript_file(&transcript)
            .map_err(|e| io_failure(&transcript, e))?;
    }
    info!("planning with {} backend", client.kind());
    let result = generate_task_tree(
        &args.instruction,
        &args.state,
        &pipeline.manager,
        &client,
        &pipeline.allocator,
    );
    if let Some(dir) = &args.out {
        let record = RunRecord {
            instruction: args.instruction.clone(),
            state: args.state.clone(),
            response_digests: client.transcript().iter().map(|e| prompt_digest(&e.response)).collect(),
        };
        write_file(
            &dir.join(RUN_FILE),
            &(serde_json::to_string_pretty(&record).expect("record serializes") + "\n"),
        )?;
    }
    match result {
        Ok(output) => {
            if let Some(dir) = &args.out {
                write_file(&dir.join(TREE_FILE), &forest_to_json(&output.forest))?;
                write_file(&dir.join(PLAN_FILE), &plan_jsonl(&output.plan))?;
            }
            for (i, step) in output.plan.iter().enumerate() {
                let _ = writeln!(out, "{}", step_line(i, step));
            }
            info!(
                "{} steps from {} model calls",
                output.plan.len(),
                client.transcript_len()
            );
            Ok(())
        }
        Err(e) => Err(Failure::domain(e.to_string())),
    }
}

fn session_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(TRANSCRIPT_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (path.to_path_buf(), dir)
    }
}

pub fn cmd_replay(args: &ReplayArgs, out: &mut dyn Write) -> CmdResult {
    let (transcript_path, dir) = session_paths(&args.transcript);
    let entries = read_transcript(&transcript_path).map_err(|e| io_failure(&transcript_path, e))?;
    let run_path = dir.join(RUN_FILE);
    let run_text = fs::read_to_string(&run_path).map_err(|e| io_failure(&run_path, e))?;
    let record: RunRecord = serde_json::from_str(&run_text).map_err(|e| io_failure(&run_path, e))?;
    let tree_path = dir.join(TREE_FILE);
    let stored = fs::read_to_string(&tree_path).map_err(|e| io_failure(&tree_path, e))?;
    let stored_forest = forest_from_json(&stored).map_err(|e| io_failure(&tree_path, e))?;

    let pipeline = args.pipeline.load()?;
    let client = LlmClient::new(Box::new(ReplayBackend::from_transcript(&entries)))
        .with_retries(args.pipeline.retries)
        .with_gate(args.pipeline.gate());
    let output = generate_task_tree(
        &record.instruction,
        &record.state,
        &pipeline.manager,
        &client,
        &pipeline.allocator,
    )
    .map_err(|e| Failure::domain(format!("replay failed: {e}")))?;
    let regenerated = forest_to_json(&output.forest);
    if regenerated == stored {
        check_response_digests(&record, &entries)?;
        let _ = writeln!(
            out,
            "replay matches: {} trees, {} steps, {} model calls",
            output.forest.len(),
            output.plan.len(),
            client.transcript_len()
        );
        return Ok(());
    }
    let location = first_divergence(&stored_forest, &output.forest)
        .unwrap_or_else(|| "serialization differs with equal structure".to_string());
    Err(Failure::domain(format!("replay diverges at {location}")))
}

/// Catches edits that leave the tree unchanged, such as rewording a rejected
/// reply.
fn check_response_digests(record: &RunRecord, entries: &[TranscriptEntry]) -> CmdResult {
    if record.response_digests.is_empty() {
        return Ok(());
    }
    if record.response_digests.len() != entries.len() {
        return Err(Failure::domain(format!(
            "replay diverges: run.json records {} responses, transcript has {}",
            record.response_digests.len(),
            entries.len()
        )));
    }
    for (entry, digest) in entries.iter().zip(&record.response_digests) {
        if prompt_digest(&entry.response) != *digest {
            return Err(Failure::domain(format!(
                "replay diverges at transcript entry {}: response does not match its recorded digest",
                entry.seq
            )));
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let cases = load_cases(&args.cases).map_err(|e| Failure::usage(e.to_string()))?;
    let alias_mode = match args.alias_mode {
        AliasArg::Resolve => AliasMode::Resolve,
        AliasArg::Strict => AliasMode::Strict,
    };
    let source = VerdictSource::for_cases(&cases, args.verdicts.as_deref(), alias_mode)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let pipeline = args.pipeline.load()?;
    let mut client = args.pipeline.client(&pipeline)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        let transcript = dir.join(TRANSCRIPT_FILE);
        if transcript.exists() {
            fs::remove_file(&transcript).map_err(|e| io_failure(&transcript, e))?;
        }
        client = client
            .with_transcript_file(&transcript)
            .map_err(|e| io_failure(&transcript, e))?;
    }
    let label = args
        .label
        .clone()
        .or_else(|| args.pipeline.model.clone())
        .unwrap_or_else(|| client.kind().to_string());
    let setup = EvalSetup {
        manager: &pipeline.manager,
        client: &client,
        allocator: &pipeline.allocator,
        repeats: args.repeats,
    };
    let report = run_eval(&cases, &setup, &source, &label).map_err(|e| match e {
        EvalError::MissingVerdict { .. } | EvalError::NoRepeats | EvalError::NoCases => Failure::usage(e.to_string()),
        other => Failure::domain(other.to_string()),
    })?;
    let table = report.table();
    if let Some(dir) = &args.out {
        write_file(
            &dir.join(REPORT_FILE),
            &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
        )?;
        write_file(&dir.join(TABLE_FILE), &table)?;
    }
    let _ = write!(out, "{table}");
    Ok(())
}
