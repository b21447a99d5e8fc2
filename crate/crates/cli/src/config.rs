//! Run configuration: defaults, then an optional JSON file, then
//! `PROTO_ERASE_*` environment variables, then command-line flags.
//!
//! Environment keys map onto the JSON tree with `__` as the path separator,
//! e.g. `PROTO_ERASE_GUIDANCE__BETA=0` or `PROTO_ERASE_PIPELINE__K=6`. Values
//! are parsed as JSON and fall back to plain strings.

use std::path::{Path, PathBuf};

use protoerase::{GuidanceConfig, PipelineConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "PROTO_ERASE_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    /// Concepts to extract; empty means every concept in the world.
    pub concepts: Vec<String>,
    pub pipeline: PipelineConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    /// Worker threads; unset uses every core.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Concept prompts in live evaluation grids.
    pub prompts: usize,
    pub seeds_per_prompt: usize,
    pub seed: u64,
    /// Positives and negatives per detector calibration split.
    pub detector_samples: usize,
    /// Held-out prompts per concept for τ calibration.
    pub tau_prompts: usize,
    pub ks: Vec<usize>,
    pub top: usize,
    pub formats: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 200,
            seeds_per_prompt: 1,
            seed: 0,
            detector_samples: 200,
            tau_prompts: 200,
            ks: vec![1, 2, 3, 6],
            top: 5,
            formats: vec!["csv".into(), "json".into(), "svg".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub world: PathBuf,
    pub bank: PathBuf,
    pub records: PathBuf,
    pub reports: PathBuf,
    pub calibration: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            world: "world.json".into(),
            bank: "bank.json".into(),
            records: "records.jsonl".into(),
            reports: "reports".into(),
            calibration: "calibration.json".into(),
        }
    }
}

/// Where the world comes from, as far as the user said explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldSource {
    File,
    Seed,
    Unspecified,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub world_source: WorldSource,
}

fn set_path(root: &mut Value, path: &[&str], value: Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        if !node.get(*key).is_some_and(Value::is_object) {
            node[*key] = Value::Object(Map::new());
        }
        node = node.get_mut(*key).expect("just inserted");
    }
    node[path[path.len() - 1]] = value;
}

fn get_path<'a>(root: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(root, |node, key| node.get(*key))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// An override addressed by a dotted key, e.g. `("pipeline.k", json!(1))`.
pub type Override = (&'static str, Value);

pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: Vec<Override>,
) -> CliResult<Resolved> {
    let mut overlay = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !overlay.is_object() {
        return Err(CliError::Config("config file must hold a JSON object".into()));
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let lowered = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        let path: Vec<&str> = lowered.split("__").collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("malformed environment key {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        set_path(&mut overlay, &path, value);
    }
    for (key, value) in flags {
        let path: Vec<&str> = key.split('.').collect();
        set_path(&mut overlay, &path, value);
    }

    let world_source = if get_path(&overlay, &["paths", "world"]).is_some() {
        WorldSource::File
    } else if get_path(&overlay, &["world", "seed"]).is_some() {
        WorldSource::Seed
    } else {
        WorldSource::Unspecified
    };

    let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    merge(&mut merged, overlay);
    let config: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
    config.pipeline.validate().map_err(|e| CliError::Config(e.to_string()))?;
    config.guidance.validate().map_err(|e| CliError::Config(e.to_string()))?;
    config.world.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if config.jobs == Some(0) {
        return Err(CliError::Config("jobs must be >= 1".into()));
    }
    Ok(Resolved { config, world_source })
}
