//! Declarative experiment configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::DEFAULT_THRESHOLD;
use crate::geometry::DEFAULT_CKA_SUBSAMPLE;
use crate::synthdata::SynthSpec;
use crate::toymodel::DEFAULT_WIDTHS;
use crate::trainer::{Mode, PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub n_tasks: usize,
    /// Squared share of the task direction inside the safety coordinates.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub probe_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub cka_subsample: usize,
    /// Held-out rows per class for behavior rates.
    pub n_eval_per_class: usize,
    /// Amplified mean-difference rows; `min(32, N_h)` when absent.
    pub n_a: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Top-level seed; copied into `data.seed` and `train.seed` on resolve.
    pub seed: u64,
    pub data: SynthSpec,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    /// Anchor checkpoint consumed by `run`.
    pub anchor: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: the probe geometry and regularizer settings of
    /// the reference recipe, with a learning rate and step budget sized
    /// for full-parameter SGD on the toy model.
    fn default() -> Self {
        let seed = 17;
        Self {
            seed,
            data: SynthSpec::default(),
            task: TaskConfig {
                n_tasks: 2000,
                overlap: 0.5,
            },
            model: ModelConfig {
                widths: DEFAULT_WIDTHS.to_vec(),
                probe_layers: vec![1, 2, 3],
            },
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 3,
                batch_task: 16,
                batch_safe: 16,
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                threshold: DEFAULT_THRESHOLD,
                cka_subsample: DEFAULT_CKA_SUBSAMPLE,
                n_eval_per_class: 200,
                n_a: None,
            },
            sweep: SweepConfig {
                seeds: vec![17, 18, 19, 20, 21],
            },
            anchor: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Loads TOML, or JSON when the extension is `.json`. Missing sections
    /// fall back to defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            let t: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t)?
        };
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, value);
        serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Applies `key=value` with a dotted key, e.g. `train.learning_rate=0.1`.
    /// The value is parsed as JSON and otherwise taken as a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.trim().split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }

    /// Propagates the top-level seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.data.validate()?;
        self.train.validate()?;
        if self.model.widths.first() != Some(&self.data.d_in) {
            return Err(Error::Config(format!(
                "model input width {:?} does not match data.d_in {}",
                self.model.widths.first(),
                self.data.d_in
            )));
        }
        if self.model.widths.last() != Some(&2) {
            return Err(Error::Config("model must end in 2 logits".into()));
        }
        let hidden = self.model.widths.len().saturating_sub(2);
        if self.model.probe_layers.is_empty()
            || self.model.probe_layers.iter().any(|&l| l == 0 || l > hidden)
        {
            return Err(Error::Config(format!(
                "probe layers {:?} outside hidden layers 1..={hidden}",
                self.model.probe_layers
            )));
        }
        if !(self.eval.threshold > 0.5 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold {}", self.eval.threshold)));
        }
        if self.eval.n_eval_per_class < 2 || self.eval.cka_subsample < 2 {
            return Err(Error::Config("eval sizes must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.task.overlap) || self.task.n_tasks == 0 {
            return Err(Error::Config("task.overlap must be in [0, 1] and n_tasks positive".into()));
        }
        Ok(self)
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.train.mode = mode;
        c
    }

    pub fn n_a(&self) -> usize {
        self.eval
            .n_a
            .unwrap_or_else(|| crate::geometry::default_n_a(self.data.n_per_class))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
