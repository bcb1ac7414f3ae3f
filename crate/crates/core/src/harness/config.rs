use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sha256_hex;
use crate::assign::LossConfig;
use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Worker threads for scene-parallel work; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig { lr: 2e-4, ..AdamWConfig::default() },
            schedule: LrSchedule::Constant,
            epochs: 6,
            batch_size: 1,
            grad_clip: Some(10.0),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 200, eval_scenes: 50, train_seed: 1, eval_seed: 2 }
    }
}

/// Everything a run depends on. Unknown keys are rejected on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Seed of model initialization and of the training/eval random streams.
    pub seed: u64,
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.model.num_classes != self.scene.num_classes() {
            return bad(format!(
                "model predicts {} classes but scenes have {}",
                self.model.num_classes,
                self.scene.num_classes()
            ));
        }
        if self.model.channels != self.scene.features.channels {
            return bad(format!(
                "model width {} differs from feature channels {}",
                self.model.channels, self.scene.features.channels
            ));
        }
        if self.model.num_queries < self.scene.max_boxes {
            return bad(format!(
                "{} queries cannot be matched to up to {} boxes",
                self.model.num_queries, self.scene.max_boxes
            ));
        }
        let l = &self.loss;
        if !(l.alpha >= 0.0 && l.beta >= 0.0 && l.focal_gamma >= 0.0) {
            return bad("loss weights and focal gamma must be non-negative".into());
        }
        if let Some(a) = l.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("focal alpha {a} outside [0, 1]"));
            }
        }
        let t = &self.train;
        if !(t.optimizer.lr > 0.0) || t.optimizer.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if !(0.0..1.0).contains(&t.optimizer.beta1)
            || !(0.0..1.0).contains(&t.optimizer.beta2)
            || !(t.optimizer.eps > 0.0)
        {
            return bad("AdamW betas must lie in [0, 1) and eps be positive".into());
        }
        if t.batch_size == 0 || t.workers == 0 {
            return bad("batch_size and workers must be at least 1".into());
        }
        if let Some(c) = t.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact, field-ordered) JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
