//! Run configuration shared by the command-line tool and the benchmarks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{BenchmarkConfig, Geometry};
use crate::error::{config_err, AmelError, Result};
use crate::eval::Protocol;
use crate::gradcheck::GradCheckConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Which ablation tables to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub aggregation: bool,
    pub inference: bool,
    pub expert_designs: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            aggregation: true,
            inference: true,
            expert_designs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; `with_seed` copies it into every sub-config.
    pub seed: u64,
    /// Dataset file; `None` generates the benchmark in memory.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    /// Dataset index held out for testing; `None` uses the dataset's target.
    pub target_domain: Option<usize>,
    pub ablation: AblationConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 32x32 input, 8 channels, 300 iterations at 3e-3.
    fn default() -> Self {
        let geometry = Geometry::default();
        Self {
            seed: 0,
            dataset: None,
            out_dir: PathBuf::from("runs/default"),
            benchmark: BenchmarkConfig {
                geometry,
                ..BenchmarkConfig::default()
            },
            model: ModelConfig {
                input_hw: geometry.image_hw,
                depth_map_hw: geometry.depth_hw,
                channels: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                beta: 3e-3,
                gamma: 3e-3,
                max_iters: 300,
                ..TrainConfig::default()
            },
            protocol: Protocol::Loo,
            target_domain: None,
            ablation: AblationConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` as overrides merged key by key into the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let overrides: Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, overrides);
        Ok(serde_json::from_value(merged)?)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Sets the master seed and propagates it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.benchmark.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.model.validate().map_err(|e| prefix("model", e))?;
        let g = self.benchmark.geometry;
        if g.image_hw != self.model.input_hw {
            return Err(config_err(
                "model.input_hw",
                format!("{} differs from benchmark.geometry.image_hw {}", self.model.input_hw, g.image_hw),
            ));
        }
        if g.depth_hw != self.model.depth_map_hw {
            return Err(config_err(
                "model.depth_map_hw",
                format!("{} differs from benchmark.geometry.depth_hw {}", self.model.depth_map_hw, g.depth_hw),
            ));
        }
        let domains = self.benchmark.num_sources + 1;
        if let Some(t) = self.target_domain {
            if t >= domains {
                return Err(config_err(
                    "target_domain",
                    format!("{} is not a domain index (< {})", t, domains),
                ));
            }
        }
        let train_domains = match self.protocol {
            Protocol::Loo => domains - 1,
            Protocol::Limited => 2,
        };
        self.train.validate(train_domains).map_err(|e| prefix("train", e))?;
        self.gradcheck.validate()
    }
}

fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

fn prefix(section: &str, e: AmelError) -> AmelError {
    match e {
        AmelError::Config { field, reason } => config_err(format!("{}.{}", section, field), reason),
        other => other,
    }
}
