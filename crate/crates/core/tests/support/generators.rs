//! Random knowledge bases and a noisy oracle shared by the property tests
//! and the acceptance run.
#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use tasknet_core::knowledge_base::{KbMetadata, KnowledgeBase, ParamType, ParameterSpec, TaskWordSpec};
use tasknet_core::llm::{BackendError, BackendKind, CompletionBackend, OracleBackend};
use tasknet_core::orchestration::{Manager, Planner};
use tasknet_core::prompt::parse_output;
use tasknet_core::tree::ExpansionLimits;

#[derive(Debug, Clone)]
pub struct WordPlan {
    params: Vec<(ParamType, usize)>,
    subtasks: Vec<usize>,
    sequences: Vec<Vec<usize>>,
}

const DESCRIPTIONS: [&str; 5] = ["3", "x", "1.5", "-2", "lamp base"];

fn param_type() -> impl Strategy<Value = ParamType> {
    prop_oneof![Just(ParamType::Int), Just(ParamType::Str), Just(ParamType::Float)]
}

fn word_plan(words: usize) -> impl Strategy<Value = WordPlan> {
    (
        prop::collection::vec((param_type(), 0..DESCRIPTIONS.len()), 0..3),
        prop::collection::vec(0..words, 1..4),
        prop::collection::vec(prop::collection::vec(0..words, 1..4), 0..3),
    )
        .prop_map(|(params, subtasks, sequences)| WordPlan {
            params,
            subtasks,
            sequences,
        })
}

/// Between 2 and 8 words. Word 0 is the root; the last word is terminal and
/// every non-terminal word lists it as its final one-word sequence, so every
/// word grounds.
pub fn small_kb() -> impl Strategy<Value = KnowledgeBase> {
    (2usize..=8)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(word_plan(n), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(n, plans, terminal)| {
            let name = |i: usize| format!("W{i}");
            let leaf = n - 1;
            let words = plans.into_iter().enumerate().map(|(i, plan)| {
                let params = plan
                    .params
                    .iter()
                    .enumerate()
                    .map(|(k, (ty, d))| ParameterSpec::new(format!("p{k}"), *ty, DESCRIPTIONS[*d]))
                    .collect();
                if i == leaf || (i != 0 && terminal[i]) {
                    return TaskWordSpec::terminal(name(i), params).with_introduction("leaf");
                }
                let mut subtasks: Vec<String> = plan.subtasks.iter().map(|&s| name(s)).collect();
                subtasks.push(name(leaf));
                let mut unique = Vec::new();
                for s in subtasks {
                    if !unique.contains(&s) {
                        unique.push(s);
                    }
                }
                let mut sequences: Vec<Vec<String>> = plan
                    .sequences
                    .iter()
                    .map(|seq| {
                        seq.iter()
                            .map(|&s| name(s))
                            .filter(|s| unique.contains(s))
                            .collect::<Vec<_>>()
                    })
                    .filter(|seq: &Vec<String>| !seq.is_empty())
                    .collect();
                sequences.push(vec![name(leaf)]);
                let mut word = TaskWordSpec::compound(name(i), params, unique, sequences).with_introduction("node");
                word.subtask_descriptions = vec!["step".into(); word.possible_subtasks.len()];
                word
            });
            KnowledgeBase::from_words(KbMetadata::default(), words.collect::<Vec<_>>())
        })
}

pub fn limits() -> ExpansionLimits {
    ExpansionLimits::new(4, 512, 256).unwrap()
}

/// Oracle replies with parameters randomly dropped or added.
pub struct NoisyOracle {
    pub inner: OracleBackend,
    pub state: AtomicU64,
}

impl CompletionBackend for NoisyOracle {
    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut seq = parse_output(&self.inner.complete(prompt)?).expect("oracle output parses");
        for step in &mut seq.steps {
            let r = self
                .state
                .fetch_add(0x9E37_79B9, Ordering::Relaxed)
                .wrapping_mul(0x2545_F491_4F6C_DD1D)
                >> 60;
            match r % 4 {
                0 => {
                    step.parameters.insert("extra".into(), "1".into());
                }
                1 => {
                    let first = step.parameters.keys().next().cloned();
                    if let Some(k) = first {
                        step.parameters.remove(&k);
                    }
                }
                _ => {}
            }
        }
        Ok(seq.to_json())
    }
}

pub fn manager_over(kb: &Arc<KnowledgeBase>) -> Manager {
    let root_params = kb.get("W0").unwrap().parameters.clone();
    let entry = TaskWordSpec::compound(
        "Start",
        vec![ParameterSpec::new("task_description", ParamType::Str, "instruction")],
        vec!["W0".into()],
        vec![vec!["W0".into()]],
    );
    let total = TaskWordSpec::terminal("W0", root_params);
    let manager_kb = Arc::new(KnowledgeBase::from_words(KbMetadata::default(), [entry, total]));
    let mut manager = Manager::new(manager_kb).unwrap();
    manager.register_serving(Arc::new(Planner::new("p", kb.clone()).with_limits(limits())));
    manager
}
