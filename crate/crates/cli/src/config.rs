//! Run configuration: defaults, a flat dotted-key JSON file, then `--set`
//! overrides and explicit flags, each layer winning over the previous one.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use mgrank_core::grpo::ScoreGrid;
use mgrank_core::simlab::{default_domain_transforms, Prop1Config, SyntheticSpec, TrainConfig};
use mgrank_core::{GrpoConfig, RewardConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub init_std: f64,
    pub grid_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub images: usize,
    pub domains: usize,
    pub noise_sigma: f64,
    pub mixing_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Section {
    pub trials: usize,
    pub noise_var: f64,
    pub latent: f64,
    pub attributes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub train: TrainSection,
    pub synth: SynthSection,
    pub prop1: Prop1Section,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SyntheticSpec::default();
        let prop1 = Prop1Config::default();
        RunConfig {
            seed: 42,
            grpo: train.grpo,
            reward: train.reward,
            train: TrainSection {
                steps: 300,
                batch_size: train.batch_size,
                log_every: train.log_every,
                init_std: train.init_std,
                grid_step: 0.25,
            },
            synth: SynthSection {
                images: synth.num_images,
                domains: synth.domains.len(),
                noise_sigma: synth.noise_sigma,
                mixing_weights: synth.mixing_weights,
            },
            prop1: Prop1Section {
                trials: prop1.trials,
                noise_var: prop1.noise_var,
                latent: prop1.latent,
                attributes: 4,
            },
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl RunConfig {
    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Replaces the value at a dotted key. The key must already exist.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut root = self.to_value();
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| usage(format!("unknown config key `{key}`")))?;
        }
        if node.is_object() {
            return Err(usage(format!("config key `{key}` names a section, not a value")));
        }
        *node = value;
        *self = serde_json::from_value(root).map_err(|e| usage(format!("config key `{key}`: {e}")))?;
        Ok(())
    }

    /// `key=value`; the value is read as JSON, falling back to a bare string.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| usage(format!("expected key=value, got `{assignment}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    /// Applies a JSON object of dotted keys.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(usage(format!("config {} must be a JSON object", path.display())));
        };
        for (k, v) in map {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Flat dotted view restricted to `seed` and the given sections.
    pub fn echo(&self, sections: &[&str]) -> Map<String, Value> {
        let mut flat = BTreeMap::new();
        flatten("", &self.to_value(), &mut flat);
        flat.into_iter()
            .filter(|(k, _)| k == "seed" || sections.iter().any(|s| k.starts_with(&format!("{s}."))))
            .collect()
    }

    /// `# config: {...}` header line for CSV outputs.
    pub fn echo_line(&self, sections: &[&str]) -> String {
        format!("# config: {}\n", Value::Object(self.echo(sections)))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let grid = ScoreGrid::with_step(self.train.grid_step).map_err(|e| usage(e.to_string()))?;
        Ok(TrainConfig {
            grpo: self.grpo.clone(),
            reward: self.reward.clone(),
            batch_size: self.train.batch_size,
            log_every: self.train.log_every,
            seed: self.seed,
            init_std: self.train.init_std,
            grid,
        })
    }

    /// Inverse of [`RunConfig::train_config`] for a resumed run.
    pub fn from_train_config(cfg: &TrainConfig, steps: usize) -> Result<Self> {
        let values = cfg.grid.values();
        let grid_step = match values {
            [a, b, ..] => b - a,
            _ => return Err(usage("checkpoint grid has fewer than two bins")),
        };
        let mut run = RunConfig {
            seed: cfg.seed,
            grpo: cfg.grpo.clone(),
            reward: cfg.reward.clone(),
            ..RunConfig::default()
        };
        run.train = TrainSection {
            steps,
            batch_size: cfg.batch_size,
            log_every: cfg.log_every,
            init_std: cfg.init_std,
            grid_step,
        };
        Ok(run)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_images: self.synth.images,
            mixing_weights: self.synth.mixing_weights.clone(),
            noise_sigma: self.synth.noise_sigma,
            domains: default_domain_transforms(self.synth.domains),
            seed: self.seed,
        }
    }

    pub fn prop1_config(&self) -> Prop1Config {
        Prop1Config {
            trials: self.prop1.trials,
            noise_var: self.prop1.noise_var,
            latent: self.prop1.latent,
            seed: self.seed,
        }
    }
}
