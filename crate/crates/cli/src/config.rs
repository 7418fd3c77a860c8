//! Experiment configuration file (TOML).

use std::path::Path;

use asc_core::asc::{AscConfig, PrototypeEncoder, RegularizationInputs, RegularizedBlock};
use asc_core::optim::{OptimizerConfig, OptimizerKind};
use asc_core::train::{FinetuneConfig, InferenceRule, PretrainConfig};
use asc_core::{LossKind, PriorParams, ShiftParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainSection,
    pub episodes: EpisodeSection,
    pub finetune: FinetuneSection,
    pub asc: AscSection,
    pub methods: Vec<MethodConfig>,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub input_dim: usize,
    pub semantic_dim: usize,
    pub mean_scale: f64,
    pub signal_noise: f64,
    pub nuisance_noise: f64,
    pub families: usize,
    pub family_scale: f64,
    pub family_stride: usize,
    pub source_classes: usize,
    pub source_per_class: usize,
    pub target_classes: usize,
    pub target_per_class: usize,
    pub rotation: f64,
    pub bias: f64,
    pub noise: f64,
    pub domains: Vec<DomainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub tag: String,
    pub shift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Mean source feature norm after training; unset keeps the trained scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    pub n_way: usize,
    pub shots: Vec<usize>,
    pub queries: usize,
    /// Episodes per evaluation cell.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub inference: InferenceRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscSection {
    pub lambda: f64,
    pub batch_size: usize,
    pub regularized_block: RegularizedBlock,
    pub inputs: RegularizationInputs,
    pub weights: bool,
    pub prototype: PrototypeEncoder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_m: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Finetune,
    Conft,
    Supcon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: MethodName,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub views: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<usize>,
    #[serde(default = "one")]
    pub anchor_fraction: f64,
    #[serde(default = "yes")]
    pub include_self: bool,
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Consistency weight for this method; falls back to `asc.lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub method: MethodName,
    pub shot: usize,
    pub batch_sizes: Vec<usize>,
    /// Class counts for the top-m study; an "all classes" row is always added.
    pub top_m: Vec<usize>,
}

impl MethodConfig {
    pub fn loss(&self) -> CliResult<LossKind> {
        let tau = || {
            self.temperature
                .ok_or_else(|| CliError::Usage(format!("method {:?} needs a temperature", self.name)))
        };
        let kind = match self.name {
            MethodName::Finetune => LossKind::CrossEntropy,
            MethodName::Conft => LossKind::ConFt {
                temperature: tau()?,
                n_distractors: self
                    .distractors
                    .ok_or_else(|| CliError::Usage("conft needs a distractor count".into()))?,
                anchor_fraction: self.anchor_fraction,
                normalize: self.normalize,
            },
            MethodName::Supcon => LossKind::Supcon {
                temperature: tau()?,
                include_self_in_denominator: self.include_self,
                normalize: self.normalize,
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.seed > i64::MAX as u64 {
            return usage(format!("seed {} does not fit a TOML integer (max {})", self.seed, i64::MAX));
        }
        if self.encoder.dims.len() < 2 {
            return usage("encoder.dims needs an input and at least one block".into());
        }
        if self.encoder.dims[0] != self.data.input_dim {
            return usage(format!(
                "encoder input {} differs from data.input_dim {}",
                self.encoder.dims[0], self.data.input_dim
            ));
        }
        if self.data.domains.is_empty() || self.methods.is_empty() || self.episodes.shots.is_empty() {
            return usage("domains, methods and shots must be non-empty".into());
        }
        if self.episodes.count == 0 {
            return usage("episodes.count must be positive".into());
        }
        for m in &self.methods {
            m.loss()?;
            self.asc_for(m).validate(self.encoder.dims.len() - 1, self.data.source_classes)?;
        }
        self.ablation_method()?;
        self.asc_config().validate(self.encoder.dims.len() - 1, self.data.source_classes)?;
        Ok(())
    }

    pub fn prior_params(&self) -> PriorParams {
        let d = &self.data;
        PriorParams {
            input_dim: d.input_dim,
            semantic_dim: d.semantic_dim,
            mean_scale: d.mean_scale,
            signal_noise: d.signal_noise,
            nuisance_noise: d.nuisance_noise,
            families: d.families,
            family_scale: d.family_scale,
            family_stride: d.family_stride,
        }
    }

    pub fn shift_params(&self) -> ShiftParams {
        ShiftParams {
            rotation: self.data.rotation,
            bias: self.data.bias,
            noise: self.data.noise,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            optimizer: optimizer(p.optimizer, p.learning_rate),
            weight_decay: p.weight_decay,
            feature_norm: p.feature_norm,
        }
    }

    pub fn asc_config(&self) -> AscConfig {
        let a = &self.asc;
        AscConfig {
            lambda: a.lambda,
            batch_size: a.batch_size,
            regularized_block: a.regularized_block,
            inputs: a.inputs,
            top_m: a.top_m,
            weights_enabled: a.weights,
            prototype_encoder: a.prototype,
        }
    }

    /// The `[asc]` settings with `method`'s own consistency weight, if it has one.
    pub fn asc_for(&self, method: &MethodConfig) -> AscConfig {
        let mut a = self.asc_config();
        if let Some(l) = method.lambda {
            a.lambda = l;
        }
        a
    }

    pub fn method(&self, name: MethodName) -> CliResult<&MethodConfig> {
        self.methods
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| CliError::Usage(format!("no [[methods]] entry named {name:?}")))
    }

    pub fn ablation_method(&self) -> CliResult<&MethodConfig> {
        self.method(self.ablation.method)
    }

    /// Finetuning settings for `method`, with the consistency term if given.
    pub fn finetune_config(&self, method: &MethodConfig, asc: Option<AscConfig>) -> CliResult<FinetuneConfig> {
        Ok(FinetuneConfig {
            loss: method.loss()?,
            asc,
            epochs: self.finetune.epochs,
            optimizer: optimizer(method.optimizer, method.learning_rate),
            aug_views: method.views,
            aug_sigma: self.finetune.aug_sigma,
            inference: self.finetune.inference,
        })
    }
}

fn optimizer(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
    match kind {
        OptimizerKind::Sgd => OptimizerConfig::sgd(lr),
        OptimizerKind::Adam => OptimizerConfig::adam(lr),
    }
}

/// The configuration shipped as `configs/desk.toml`.
pub const DESK_CONFIG: &str = include_str!("../configs/desk.toml");

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse(DESK_CONFIG).expect("bundled desk config is valid")
    }
}
