//! Hierarchical task planning over a task-word knowledge graph.

pub mod eval;
pub mod fixtures;
pub mod knowledge_base;
pub mod llm;
pub mod orchestration;
pub mod prompt;
pub mod sim;
pub mod tree;
