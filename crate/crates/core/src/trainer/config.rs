use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Task};
use crate::scoring::NormalizationScope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Number of items `M`.
    pub items: usize,
    /// Let the compactness and separateness losses move the items as well.
    pub trainable_items: bool,
    /// Test-time gate threshold on the regular score; `inf` disables it.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Weight of the PSNR term in the fused score.
    pub lambda: f64,
    pub scope: NormalizationScope,
    /// Start each test video from the trained bank rather than the bank
    /// evolved on the previous videos.
    pub bank_per_video: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub losses: LossWeights,
    pub train: TrainParams,
    pub score: ScoreConfig,
}

impl Config {
    /// Per-task defaults (batch 4, Adam, cosine schedule) on the desk-sized
    /// model.
    pub fn for_task(task: Task) -> Self {
        let (lambda_cs, lambda, gamma, lr) = match task {
            Task::Reconstruction => (0.01, 0.7, 0.015, 2e-5),
            Task::Prediction => (0.1, 0.6, 0.01, 2e-4),
        };
        Config {
            model: ModelConfig::for_task(task),
            memory: MemoryConfig {
                items: 10,
                trainable_items: false,
                gamma,
            },
            losses: LossWeights {
                lambda_c: lambda_cs,
                lambda_s: lambda_cs,
                alpha: 1.0,
            },
            train: TrainParams {
                epochs: 20,
                batch_size: 4,
                lr,
                seed: 0,
            },
            score: ScoreConfig {
                lambda,
                scope: NormalizationScope::PerVideo,
                bank_per_video: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        let bad = |m: String| Err(Error::config(m));
        if self.model.use_memory && self.memory.items < 2 {
            return bad(format!("memory needs at least 2 items, got {}", self.memory.items));
        }
        if !(self.memory.gamma > 0.0) {
            return bad(format!("gate threshold gamma must be positive, got {}", self.memory.gamma));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.train.lr));
        }
        if !(0.0..=1.0).contains(&self.score.lambda) {
            return bad(format!("score lambda must lie in [0, 1], got {}", self.score.lambda));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }
}
