//! Run configuration: one TOML file covering every pipeline stage, with
//! defaults matching the published training setup, plus the conversions
//! into the per-module config types.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::FrequencyVector;
use crate::error::{Error, Result};
use crate::flowcore::StateSpace;
use crate::infer::InferConfig;
use crate::model::{Activation, ModelConfig};
use crate::prior::{PriorKind, PriorSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub prior: PriorSection,
    pub flow: FlowSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Raw ratings file; the prepare command's --input flag overrides it.
    pub input: Option<PathBuf>,
    pub delimiter: String,
    pub skip_header: bool,
    /// Ratings at or above this count as positive interactions.
    pub threshold: f64,
    pub k_core: usize,
    /// Train, validation, test shares; must sum to 1.
    pub ratios: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            input: None,
            delimiter: "::".into(),
            skip_header: false,
            threshold: 4.0,
            k_core: 5,
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub kind: PriorKind,
    pub state_space: StateSpace,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            kind: PriorKind::BehaviorGuided,
            state_space: StateSpace::Discrete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub n_steps: usize,
    /// Grid index inference starts from; defaults to n_steps - 2, which
    /// costs exactly two model evaluations.
    pub start_step: Option<usize>,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            n_steps: 9,
            start_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_sizes: Vec<usize>,
    pub step_embed_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_sizes: vec![300, 300],
            step_embed_dim: 10,
            activation: Activation::Tanh,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 4096,
            learning_rate: 0.001,
            max_epochs: 300,
            patience: 20,
            eval_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: vec![10, 20] }
    }
}

/// Reads and parses the config, or yields the full defaults without a path.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.delimiter.is_empty() {
            return Err(Error::Config("delimiter must be non-empty".into()));
        }
        if !self.data.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if self.data.k_core == 0 {
            return Err(Error::Config("k_core must be at least 1".into()));
        }
        let [a, b, c] = self.data.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "ratios must be positive and sum to 1".into(),
            ));
        }
        if self.flow.n_steps < 2 {
            return Err(Error::Config("n_steps must be at least 2".into()));
        }
        if let Some(s) = self.flow.start_step {
            if s > self.flow.n_steps - 2 {
                return Err(Error::Config(format!(
                    "start_step {s} must not exceed n_steps - 2 = {}",
                    self.flow.n_steps - 2
                )));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval ks must be positive".into()));
        }
        // Full model/train validation needs the dataset dimensions; the
        // conversions below run those checks with real numbers.
        Ok(())
    }

    pub fn model_config(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            input_dim: n_items,
            hidden_sizes: self.model.hidden_sizes.clone(),
            step_embed_dim: self.model.step_embed_dim,
            n_steps: self.flow.n_steps,
            activation: self.model.activation,
            dropout: self.model.dropout,
            init_seed: self.seed,
        }
    }

    pub fn prior_spec(
        &self,
        n_items: usize,
        frequencies: Option<FrequencyVector>,
    ) -> Result<PriorSpec> {
        let spec = PriorSpec {
            kind: self.prior.kind,
            state_space: self.prior.state_space,
            n_items,
            frequencies: match self.prior.kind {
                PriorKind::BehaviorGuided => frequencies,
                _ => None,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, prior: PriorSpec) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            n_steps: self.flow.n_steps,
            prior,
            seed: self.seed,
            eval_every: self.train.eval_every,
        }
    }

    /// Inference settings for a model trained on `n_steps`; the configured
    /// start_step applies, bounded by that grid.
    pub fn infer_config(&self, n_steps: usize, mode: StateSpace) -> Result<InferConfig> {
        match self.flow.start_step {
            Some(s) => InferConfig::with_start(n_steps, s, mode),
            None => InferConfig::new(n_steps, mode),
        }
    }
}
