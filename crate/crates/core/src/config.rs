//! Top-level experiment configuration documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cl::ClConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::expansion::ExpansionMethod;
use crate::rl::RlConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub d: usize,
    pub budget: usize,
    pub stages: usize,
    pub methods: Vec<ExpansionMethod>,
    pub seed: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            d: 64,
            budget: 81920,
            stages: 10,
            methods: vec![
                ExpansionMethod::None,
                ExpansionMethod::Net2wider,
                ExpansionMethod::Progressive,
                ExpansionMethod::Injection,
                ExpansionMethod::DynamicMoe { granularity: 1 },
                ExpansionMethod::DynamicMoe { granularity: 2 },
                ExpansionMethod::DynamicMoe { granularity: 4 },
            ],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Cl(ClConfig),
    Rl(RlConfig),
    Budget(BudgetConfig),
    GenData(DataConfig),
}

impl ExperimentConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::Cl(_) => "cl",
            ExperimentConfig::Rl(_) => "rl",
            ExperimentConfig::Budget(_) => "budget",
            ExperimentConfig::GenData(_) => "gen-data",
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Cl(c) => c.seed = seed,
            ExperimentConfig::Rl(c) => c.seed = seed,
            ExperimentConfig::Budget(c) => c.seed = seed,
            ExperimentConfig::GenData(c) => c.seed = seed,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::Cl(c) => c.seed,
            ExperimentConfig::Rl(c) => c.seed,
            ExperimentConfig::Budget(c) => c.seed,
            ExperimentConfig::GenData(c) => c.seed,
        }
    }
}

/// Parses a config document. Errors name the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut doc: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    let kind = match obj.remove("kind") {
        Some(serde_json::Value::String(k)) => k,
        Some(other) => return Err(Error::Config(format!("at `kind`: expected a string, got {other}"))),
        None => return Err(Error::Config("missing field `kind`".into())),
    };
    Ok(match kind.as_str() {
        "cl" => ExperimentConfig::Cl(body(doc)?),
        "rl" => ExperimentConfig::Rl(body(doc)?),
        "budget" => ExperimentConfig::Budget(body(doc)?),
        "gen-data" => ExperimentConfig::GenData(body(doc)?),
        other => {
            return Err(Error::Config(format!(
                "at `kind`: unknown kind `{other}`, expected one of cl, rl, budget, gen-data"
            )))
        }
    })
}

fn body<T: serde::de::DeserializeOwned>(doc: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
