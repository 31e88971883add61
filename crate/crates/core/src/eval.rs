//! Repeated generations over test cases, scored by format, parameter and
//! plan success rates.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmClient;
use crate::orchestration::{generate_task_tree, Allocator, Manager};
use crate::sim::{AliasMode, Scenario, ScenarioError, Simulator};
use crate::tree::ExpansionLog;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EmptyDenominator: a rate needs at least one trial")]
    EmptyDenominator,
    #[error("invalid counts: {successes} successes out of {total}")]
    InvalidCounts { successes: u64, total: u64 },
    #[error("cannot read {path}: {message}")]
    Input { path: String, message: String },
    #[error("no cases to evaluate")]
    NoCases,
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("case {case_id:?}: {message}")]
    CaseConfig { case_id: String, message: String },
    #[error("no verdict for case {case_id:?} generation {generation}")]
    MissingVerdict { case_id: String, generation: u32 },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// An exact success ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

pub fn compute_rate(successes: u64, total: u64) -> Result<Ratio, EvalError> {
    if total == 0 {
        return Err(EvalError::EmptyDenominator);
    }
    if successes > total {
        return Err(EvalError::InvalidCounts { successes, total });
    }
    Ok(Ratio {
        numerator: successes,
        denominator: total,
    })
}

fn percent_tenths(tenths: u64) -> String {
    if tenths.is_multiple_of(10) {
        format!("{}%", tenths / 10)
    } else {
        format!("{}.{}%", tenths / 10, tenths % 10)
    }
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// One decimal place, half rounded up; whole numbers drop the decimal.
    pub fn render(&self) -> String {
        let n = u128::from(self.numerator) * 2000 + u128::from(self.denominator);
        percent_tenths((n / (2 * u128::from(self.denominator))) as u64)
    }

    /// One decimal place, truncated toward zero.
    pub fn render_truncated(&self) -> String {
        percent_tenths((u128::from(self.numerator) * 1000 / u128::from(self.denominator)) as u64)
    }

    /// `render()`, followed by the truncated form in brackets when the two
    /// disagree.
    pub fn render_both(&self) -> String {
        let (r, t) = (self.render(), self.render_truncated());
        if r == t {
            r
        } else {
            format!("{r} [{t}]")
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}/{})", self.render_both(), self.numerator, self.denominator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanVerdict {
    Success,
    Failure { reason: String },
    External { labels: Vec<bool>, accepted: bool },
}

impl PlanVerdict {
    pub fn is_success(&self) -> bool {
        match self {
            PlanVerdict::Success => true,
            PlanVerdict::Failure { .. } => false,
            PlanVerdict::External { accepted, .. } => *accepted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub case_id: String,
    pub generation: u32,
    pub format_ok: bool,
    pub subtasks_total: u64,
    pub subtasks_param_ok: u64,
    pub plan_verdict: PlanVerdict,
    /// Transcript sequence numbers used by this trial, e.g. `4-6`.
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_success_rate: Ratio,
    /// `None` when no subtask was ever generated.
    pub parameter_success_rate: Option<Ratio>,
    pub plan_success_rate: Ratio,
}

pub fn aggregate(records: &[TrialRecord]) -> Result<MetricsReport, EvalError> {
    let n = records.len() as u64;
    let count = |f: fn(&TrialRecord) -> bool| records.iter().filter(|r| f(r)).count() as u64;
    let total: u64 = records.iter().map(|r| r.subtasks_total).sum();
    let ok: u64 = records.iter().map(|r| r.subtasks_param_ok).sum();
    Ok(MetricsReport {
        format_success_rate: compute_rate(count(|r| r.format_ok), n)?,
        parameter_success_rate: if total == 0 {
            None
        } else {
            Some(compute_rate(ok, total)?)
        },
        plan_success_rate: compute_rate(count(|r| r.plan_verdict.is_success()), n)?,
    })
}

pub const TABLE_HEADER: [&str; 4] = [
    "MODEL",
    "FORMAT_SUCCESS_RATE",
    "PARAMETER_SUCCESS_RATE",
    "PLAN_SUCCESS_RATE",
];

impl MetricsReport {
    /// Tab-separated header and one row.
    pub fn table(&self, label: &str) -> String {
        let param = self
            .parameter_success_rate
            .map_or_else(|| "n/a".to_string(), |r| r.to_string());
        let mut out = TABLE_HEADER.join("\t");
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{label}\t{}\t{param}\t{}",
            self.format_success_rate, self.plan_success_rate
        );
        out
    }
}

/// One evaluation input. Relative paths are resolved against the case
/// file's directory by [`load_cases`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub state: String,
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    #[serde(default)]
    pub verdicts: Option<PathBuf>,
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<EvalCase>, EvalError> {
    let path = path.as_ref();
    let input = |message: String| EvalError::Input {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| input(e.to_string()))?;
    let mut cases: Vec<EvalCase> = serde_json::from_str(&text).map_err(|e| input(e.to_string()))?;
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let base = path.parent().unwrap_or(Path::new(""));
    for case in &mut cases {
        for p in [&mut case.scenario, &mut case.verdicts].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cases)
}

/// Labels from `k` judges for one generation of one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictLabel {
    pub case_id: String,
    pub generation: u32,
    pub labels: Vec<bool>,
}

impl VerdictLabel {
    /// Strict majority of the judges.
    pub fn accepted(&self) -> bool {
        self.labels.iter().filter(|l| **l).count() * 2 > self.labels.len()
    }
}

pub fn load_verdicts(path: impl AsRef<Path>) -> Result<Vec<VerdictLabel>, EvalError> {
    let path = path.as_ref();
    let input = |message: String| EvalError::Input {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| input(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| input(e.to_string()))
}

/// Where plan verdicts come from. One source per run.
pub enum VerdictSource {
    Simulator {
        simulators: BTreeMap<String, Simulator>,
    },
    External {
        labels: BTreeMap<(String, u32), VerdictLabel>,
    },
}

impl VerdictSource {
    pub fn kind(&self) -> &'static str {
        match self {
            VerdictSource::Simulator { .. } => "simulator",
            VerdictSource::External { .. } => "external",
        }
    }

    pub fn external(labels: impl IntoIterator<Item = VerdictLabel>) -> Self {
        VerdictSource::External {
            labels: labels
                .into_iter()
                .map(|l| ((l.case_id.clone(), l.generation), l))
                .collect(),
        }
    }

    /// External labels from `override_file` if given, else from the cases'
    /// own `verdicts` files, else one simulator per case scenario. Cases may
    /// not mix the two kinds.
    pub fn for_cases(
        cases: &[EvalCase],
        override_file: Option<&Path>,
        alias_mode: AliasMode,
    ) -> Result<Self, EvalError> {
        if let Some(path) = override_file {
            return Ok(Self::external(load_verdicts(path)?));
        }
        let external = cases.iter().filter(|c| c.verdicts.is_some()).count();
        if external == cases.len() {
            let mut all = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for path in cases.iter().filter_map(|c| c.verdicts.as_ref()) {
                if seen.insert(path.clone()) {
                    all.extend(load_verdicts(path)?);
                }
            }
            return Ok(Self::external(all));
        }
        let mut simulators = BTreeMap::new();
        for case in cases {
            let config = |message: &str| EvalError::CaseConfig {
                case_id: case.id.clone(),
                message: message.to_string(),
            };
            if case.verdicts.is_some() {
                return Err(config("mixes external verdicts with simulator scenarios"));
            }
            let path = case
                .scenario
                .as_ref()
                .ok_or_else(|| config("has neither a scenario nor a verdict file"))?;
            simulators.insert(case.id.clone(), Simulator::new(Scenario::load(path)?, alias_mode));
        }
        Ok(VerdictSource::Simulator { simulators })
    }
}

pub struct EvalSetup<'a> {
    pub manager: &'a Manager,
    pub client: &'a LlmClient,
    pub allocator: &'a Allocator,
    pub repeats: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub verdict_source: String,
    pub metrics: MetricsReport,
    pub trials: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = self.metrics.table(&self.label);
        let rates = [
            Some(self.metrics.format_success_rate),
            self.metrics.parameter_success_rate,
            Some(self.metrics.plan_success_rate),
        ];
        if rates.iter().flatten().any(|r| r.render() != r.render_truncated()) {
            out.push_str("[bracketed] values are truncated rather than rounded\n");
        }
        out
    }
}

/// Subtask counts from every parsed attempt of every expansion, and whether
/// every attempt parsed.
fn count_subtasks(log: &[ExpansionLog]) -> (bool, u64, u64) {
    let attempts: Vec<_> = log.iter().flat_map(|l| &l.history).collect();
    let format_ok = !attempts.is_empty() && attempts.iter().all(|a| !a.format_failed());
    if !format_ok {
        return (false, 0, 0);
    }
    let reports = attempts.iter().filter_map(|a| a.outcome.as_ref().ok());
    let (mut total, mut ok) = (0, 0);
    for report in reports {
        total += report.step_reports.len() as u64;
        ok += report.steps_ok() as u64;
    }
    (true, total, ok)
}

/// Runs every case `repeats` times in order. Pipeline failures become failed
/// trials; only configuration problems abort the run.
pub fn run_eval(
    cases: &[EvalCase],
    setup: &EvalSetup<'_>,
    source: &VerdictSource,
    label: &str,
) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    if setup.repeats == 0 {
        return Err(EvalError::NoRepeats);
    }
    let mut trials = Vec::new();
    for case in cases {
        for generation in 1..=setup.repeats {
            let first_seq = setup.client.transcript_len() + 1;
            let run = generate_task_tree(
                &case.instruction,
                &case.state,
                setup.manager,
                setup.client,
                setup.allocator,
            );
            let last_seq = setup.client.transcript_len();
            let transcript = if last_seq >= first_seq {
                format!("{first_seq}-{last_seq}")
            } else {
                String::new()
            };
            let (log, plan, error) = match run {
                Ok(out) => (out.log, Some(out.plan), None),
                Err(e) => {
                    let message = e.to_string();
                    (e.log, None, Some(message))
                }
            };
            let (format_ok, subtasks_total, subtasks_param_ok) = count_subtasks(&log);
            let plan_verdict = match (&plan, source) {
                _ if !format_ok => PlanVerdict::Failure {
                    reason: "format".into(),
                },
                (None, _) => PlanVerdict::Failure {
                    reason: "pipeline".into(),
                },
                (Some(plan), VerdictSource::Simulator { simulators }) => {
                    let sim = simulators.get(&case.id).ok_or_else(|| EvalError::CaseConfig {
                        case_id: case.id.clone(),
                        message: "no scenario".into(),
                    })?;
                    let verdict = sim.check(plan);
                    if verdict.is_success() {
                        PlanVerdict::Success
                    } else {
                        PlanVerdict::Failure {
                            reason: verdict.reason.unwrap_or_default(),
                        }
                    }
                }
                (Some(_), VerdictSource::External { labels }) => {
                    let label =
                        labels
                            .get(&(case.id.clone(), generation))
                            .ok_or_else(|| EvalError::MissingVerdict {
                                case_id: case.id.clone(),
                                generation,
                            })?;
                    PlanVerdict::External {
                        labels: label.labels.clone(),
                        accepted: label.accepted(),
                    }
                }
            };
            trials.push(TrialRecord {
                case_id: case.id.clone(),
                generation,
                format_ok,
                subtasks_total,
                subtasks_param_ok,
                plan_verdict,
                transcript,
                error,
            });
        }
    }
    Ok(EvalReport {
        label: label.to_string(),
        verdict_source: source.kind().to_string(),
        metrics: aggregate(&trials)?,
        trials,
    })
}
