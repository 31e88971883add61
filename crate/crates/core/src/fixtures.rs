//! Bundled knowledge bases, scenarios, fleets and eval inputs for the toy
//! desk lamp and solar car domains.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::knowledge_base::KnowledgeBase;
use crate::sim::Scenario;

pub const MANAGER_KB: &str = include_str!("../fixtures/kb/manager.json");
pub const DESK_LAMP_KB: &str = include_str!("../fixtures/kb/desk_lamp.json");
pub const SOLAR_CAR_KB: &str = include_str!("../fixtures/kb/solar_car.json");
/// PlanAssembly splits in two until the depth budget forces a join.
pub const RECURSION_KB: &str = include_str!("../fixtures/kb/recursion.json");
/// PlanAssembly can never reach a terminal word.
pub const NON_GROUNDING_KB: &str = include_str!("../fixtures/kb/non_grounding.json");
pub const DANGLING_KB: &str = include_str!("../fixtures/kb/dangling.json");

pub const DESK_LAMP_SCENARIO: &str = include_str!("../fixtures/scenarios/desk_lamp.json");
pub const SOLAR_CAR_SCENARIO: &str = include_str!("../fixtures/scenarios/solar_car.json");
/// The lamp head only exists once shade and bulb are joined.
pub const LAMP_HEAD_SCENARIO: &str = include_str!("../fixtures/scenarios/lamp_head_subassembly.json");

/// Hand-labelled model replies: `{kb, parent, cases: [{name, response, label}]}`.
pub const RESPONSE_CORPUS: &str = include_str!("../fixtures/responses/corpus.json");

/// Directory holding the fixture files, for callers that need paths.
pub fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn path(relative: &str) -> PathBuf {
    dir().join(relative)
}

/// Parses one of the bundled knowledge base constants.
pub fn kb(text: &str) -> Arc<KnowledgeBase> {
    Arc::new(KnowledgeBase::from_json_str(text).expect("bundled knowledge base parses"))
}

pub fn scenario(text: &str) -> Scenario {
    Scenario::from_json(text).expect("bundled scenario parses")
}
