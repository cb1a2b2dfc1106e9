//! Run configuration: every module's settings in one JSON document.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::PreprocessConfig;
use crate::inference::InferenceConfig;
use crate::mdn::ArchConfig;
use crate::token::TokenNoiseParams;
use crate::type_prior::{PriorConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub exemplar_temperature: f64,
    pub concept_temperature: f64,
    pub exemplars: usize,
    pub concepts: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { exemplar_temperature: 8.0, concept_temperature: 0.5, exemplars: 9, concepts: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub prior: PriorConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub noise: TokenNoiseParams,
    pub inference: InferenceConfig,
    pub tasks: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: ArchConfig::toy(),
            prior: PriorConfig::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            noise: TokenNoiseParams::default(),
            inference: InferenceConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

fn fail(key: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config { key: key.into(), reason: reason.into() }
}

fn positive(key: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(fail(key, format!("{v} must be positive and finite")))
    }
}

fn in_range<T: PartialOrd + std::fmt::Display>(key: &str, v: T, lo: T, hi: T) -> Result<(), HarnessError> {
    if v >= lo && v <= hi {
        Ok(())
    } else {
        Err(fail(key, format!("{v} outside [{lo}, {hi}]")))
    }
}

impl RunConfig {
    /// Parses and validates. Missing keys take defaults; unknown keys are
    /// rejected.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| fail("(document)", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let a = &self.arch;
        in_range("arch.canvas.width", a.canvas.width, 16, 512)?;
        in_range("arch.canvas.height", a.canvas.height, 16, 512)?;
        for (i, &c) in a.channels.iter().enumerate() {
            in_range(&format!("arch.channels[{i}]"), c, 1, 512)?;
        }
        in_range("arch.location_hidden", a.location_hidden, 1, 4096)?;
        in_range("arch.termination_hidden", a.termination_hidden, 1, 4096)?;
        in_range("arch.lstm_hidden", a.lstm_hidden, 1, 4096)?;
        in_range("arch.attention_dim", a.attention_dim, 1, 4096)?;
        in_range("arch.components", a.components, 1, 100)?;
        a.validate().map_err(|e| fail("arch", e.to_string()))?;

        in_range("prior.max_strokes", self.prior.max_strokes, 1, 30)?;
        in_range("prior.max_steps", self.prior.max_steps, 1, 200)?;

        positive("preprocess.residual_threshold", self.preprocess.residual_threshold)?;
        in_range("preprocess.min_stroke_length", self.preprocess.min_stroke_length, 0.0, 1e4)?;
        in_range("preprocess.max_control", self.preprocess.max_control, 2, 200)?;

        in_range("train.epochs", self.train.epochs, 1, 100_000)?;
        in_range("train.batch_size", self.train.batch_size, 1, 100_000)?;
        positive("train.learning_rate", self.train.learning_rate)?;
        in_range("train.learning_rate", self.train.learning_rate, 0.0, 1.0)?;
        positive("train.clip_norm", self.train.clip_norm)?;

        positive("noise.sigma_loc", self.noise.sigma_loc)?;
        positive("noise.sigma_traj", self.noise.sigma_traj)?;
        self.noise.validate().map_err(|e| fail("noise.sigma_affine", e.to_string()))?;

        let inf = &self.inference;
        in_range("inference.skeleton.junction_merge", inf.skeleton.junction_merge, 0.0, 20.0)?;
        in_range("inference.skeleton.spur_length", inf.skeleton.spur_length, 0, 100)?;
        in_range("inference.walks.n_walks", inf.walks.n_walks, 1, 100_000)?;
        positive("inference.walks.angle_scale_deg", inf.walks.angle_scale_deg)?;
        in_range("inference.walks.direction_span", inf.walks.direction_span, 1, 100)?;
        in_range("inference.cover_frac", inf.cover_frac, 0.0, 1.0)?;
        positive("inference.residual_threshold", inf.residual_threshold)?;
        in_range("inference.max_control", inf.max_control, 2, 200)?;
        in_range("inference.exhaustive_cap", inf.exhaustive_cap, 1, 1_000_000)?;
        in_range("inference.top_k", inf.top_k, 1, 1000)?;
        in_range("inference.steps", inf.steps, 0, 1_000_000)?;
        in_range("inference.refit_steps", inf.refit_steps, 0, 1_000_000)?;
        positive("inference.learning_rate", inf.learning_rate)?;
        positive("inference.scale_lr_factor", inf.scale_lr_factor)?;

        positive("tasks.exemplar_temperature", self.tasks.exemplar_temperature)?;
        positive("tasks.concept_temperature", self.tasks.concept_temperature)?;
        in_range("tasks.exemplars", self.tasks.exemplars, 1, 10_000)?;
        in_range("tasks.concepts", self.tasks.concepts, 1, 100_000)?;
        Ok(())
    }
}
