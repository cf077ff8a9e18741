//! Configuration resolution: built-in scenario and training defaults, then
//! an optional TOML file with `[scenario]` and `[train]` sections, then
//! command-line overrides.

use std::path::Path;

use amcbf::envs::{make_scenario, ScenarioConfig, ScenarioName};
use amcbf::rl::{config_hash, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
}

impl Resolved {
    pub fn hash(&self) -> String {
        config_hash(&self.scenario, &self.train)
    }
}

/// Recursively overlays `patch` on `base`. Tables merge key by key; any
/// other value replaces the base value outright.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse_overrides(text: &str) -> Result<Value, CliError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
    for key in table.keys() {
        if key != "scenario" && key != "train" {
            return Err(CliError::Usage(format!("config: unknown section [{key}] (expected [scenario] or [train])")));
        }
    }
    serde_json::to_value(table).map_err(|e| CliError::Usage(format!("config: {e}")))
}

pub fn resolve(
    name: ScenarioName,
    file: Option<&Path>,
    episodes: Option<usize>,
    steps: Option<usize>,
) -> Result<Resolved, CliError> {
    let defaults = Resolved { scenario: make_scenario(name), train: TrainConfig::default() };
    let mut value = serde_json::to_value(&defaults).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        merge(&mut value, parse_overrides(&text)?);
    }
    let mut resolved: Resolved =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if resolved.scenario.name != name {
        return Err(CliError::Usage(format!(
            "config names scenario {:?} but --scenario is {name}",
            resolved.scenario.name.as_str()
        )));
    }
    if let Some(m) = episodes {
        resolved.scenario.episodes = m;
    }
    if let Some(t) = steps {
        resolved.scenario.steps = t;
    }
    if resolved.scenario.episodes == 0 {
        return Err(CliError::Usage("episodes must be positive".into()));
    }
    resolved.scenario.validate()?;
    resolved.train.validate()?;
    Ok(resolved)
}
