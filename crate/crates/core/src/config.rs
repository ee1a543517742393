//! Run configuration: a TOML file, command-line overrides on top, defaults
//! underneath.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::AspectPolicy;
use crate::formalizations::{Formalization, LossScope, TemplatePack, DEFAULT_TEMPLATE_ID};
use crate::strategies::{OptimConfig, Schedule, Stage, StageKind, Strategy, TrainingPlan};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "ZSTC_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// Optimizer settings where every field may be left to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_fraction: Option<f64>,
    pub schedule: Option<Schedule>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

impl OptimOverrides {
    pub fn apply(&self, base: OptimConfig) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            warmup_fraction: self.warmup_fraction.unwrap_or(base.warmup_fraction),
            schedule: self.schedule.unwrap_or(base.schedule),
            epochs: self.epochs.unwrap_or(base.epochs),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            seed: self.seed.unwrap_or(base.seed),
        }
    }

    fn filled(c: &OptimConfig) -> Self {
        Self {
            learning_rate: Some(c.learning_rate),
            batch_size: Some(c.batch_size),
            warmup_fraction: Some(c.warmup_fraction),
            schedule: Some(c.schedule),
            epochs: Some(c.epochs),
            weight_decay: Some(c.weight_decay),
            seed: Some(c.seed),
        }
    }

    /// Fields set in `other` win.
    pub fn merge(&mut self, other: &OptimOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(learning_rate, batch_size, warmup_fraction, schedule, epochs, weight_decay, seed);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of the raw datasets, read by `prepare`.
    pub raw_manifest: Option<PathBuf>,
    /// Directory holding the prepared corpus.
    pub prepared_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    pub enabled: bool,
    pub seed: u64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self { enabled: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: OptimOverrides,
    pub finetune: OptimOverrides,
    pub negatives_per_positive: usize,
    pub loss_scope: LossScope,
    pub template_id: String,
    pub template_pack: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: OptimOverrides::default(),
            finetune: OptimOverrides::default(),
            negatives_per_positive: 3,
            loss_scope: LossScope::default(),
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
            template_pack: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackEmbedder {
    #[default]
    BagOfTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to the dataset aspect for implicit runs, none otherwise.
    pub aspect_policy: Option<AspectPolicy>,
    pub max_new_tokens: usize,
    pub dump_predictions: bool,
    pub fallback_embedder: FallbackEmbedder,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            aspect_policy: None,
            max_new_tokens: 8,
            dump_predictions: false,
            fallback_embedder: FallbackEmbedder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub formalization: Formalization,
    pub strategy: Strategy,
    pub data: DataConfig,
    pub normalize: NormalizeConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            out_dir: None,
            formalization: Formalization::Binary,
            strategy: Strategy::Vanilla,
            data: DataConfig::default(),
            normalize: NormalizeConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills every defaulted field so the result can be persisted verbatim.
    /// `env_out_root` is consulted only when no output directory is set.
    pub fn resolve(mut self, env_out_root: Option<PathBuf>) -> Result<Self> {
        if self.out_dir.is_none() {
            self.out_dir = Some(env_out_root.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT)));
        }
        self.encoder.mode = self.formalization.mode();
        self.encoder.validate()?;
        let finetune = self.train.finetune.apply(OptimConfig::finetune_default(self.formalization));
        self.train.finetune = OptimOverrides::filled(&finetune);
        let pretrain = self.train.pretrain.apply(OptimConfig::pretrain_default());
        self.train.pretrain = OptimOverrides::filled(&pretrain);
        if self.eval.aspect_policy.is_none() {
            self.eval.aspect_policy = Some(match self.strategy {
                Strategy::Implicit => AspectPolicy::DatasetAspect,
                _ => AspectPolicy::Omit,
            });
        }
        self.plan()?.validate()?;
        Ok(self)
    }

    pub fn run_id(&self) -> Result<&str> {
        self.run_id
            .as_deref()
            .filter(|id| !id.is_empty())
            .ok_or_else(|| Error::Config("run_id is required".into()))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        let out = self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        Ok(out.join(self.run_id()?))
    }

    pub fn prepared_dir(&self) -> Result<&Path> {
        self.data
            .prepared_dir
            .as_deref()
            .ok_or_else(|| Error::Config("data.prepared_dir is required".into()))
    }

    pub fn raw_manifest(&self) -> Result<&Path> {
        self.data
            .raw_manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.raw_manifest is required".into()))
    }

    pub fn templates(&self) -> Result<TemplatePack> {
        match &self.train.template_pack {
            Some(path) => TemplatePack::load(path),
            None => Ok(TemplatePack::default()),
        }
    }

    pub fn plan(&self) -> Result<TrainingPlan> {
        let mut plan = TrainingPlan::new(self.strategy, self.formalization);
        plan.stages = plan
            .stages
            .into_iter()
            .map(|s| Stage {
                optim: match s.kind {
                    StageKind::AspectPretrain => self.train.pretrain.apply(s.optim),
                    StageKind::Finetune => self.train.finetune.apply(s.optim),
                },
                kind: s.kind,
            })
            .collect();
        plan.negatives_per_positive = self.train.negatives_per_positive;
        plan.loss_scope = self.train.loss_scope;
        plan.template_id = self.train.template_id.clone();
        plan.templates = self.templates()?;
        Ok(plan)
    }

    pub fn aspect_policy(&self) -> AspectPolicy {
        self.eval.aspect_policy.unwrap_or_default()
    }
}
