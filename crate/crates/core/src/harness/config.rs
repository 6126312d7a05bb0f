use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::egas::AttackConfig;
use crate::grpo::{LossAggregation, Mode, TrainerConfig};
use crate::policy::ModelConfig;
use crate::rollout::Selection;
use crate::task::{DEFAULT_TEST, DEFAULT_TRAIN};
use crate::{Error, Result};

/// Flat run configuration, read from TOML. Unknown keys are rejected.
///
/// In `grpo` mode the single group has `n1 + n2` rollouts, so one file drives
/// every mode at the same total group size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub n1: usize,
    pub n2: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub rollout_temperature: f64,
    pub batch_size: usize,
    pub noise_steps: usize,
    pub noise_sigma: f64,
    pub std_floor: f64,
    pub loss_aggregation: LossAggregation,

    pub alpha: f64,
    pub attack_iters: usize,
    pub tercile: Selection,

    pub vocab_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub num_questions: usize,

    /// Frozen splits; generated from `data_seed` when absent.
    pub manifest: Option<PathBuf>,
    pub data_seed: u64,
    pub train_size: usize,
    pub test_size: usize,

    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_temperature: f64,
    pub seed: u64,
    pub out: PathBuf,
    /// Smoothing coefficient for the emitted charts.
    pub ema: f64,
    /// Zeroes the wall-clock column so outputs depend only on config and seed.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let m = ModelConfig::default();
        Self {
            mode: t.mode,
            n1: t.n1,
            n2: t.n2,
            clip_eps: t.clip_eps,
            kl_beta: t.kl_beta,
            learning_rate: t.learning_rate,
            rollout_temperature: t.rollout_temperature,
            batch_size: t.batch_size,
            noise_steps: t.noise_steps,
            noise_sigma: t.noise_sigma,
            std_floor: t.std_floor,
            loss_aggregation: t.loss_aggregation,
            alpha: t.attack.alpha,
            attack_iters: t.attack.iterations,
            tercile: t.attack.selection,
            vocab_size: m.vocab_size,
            image_height: m.image_height,
            image_width: m.image_width,
            hidden_dim: m.hidden_dim,
            max_len: m.max_len,
            num_questions: m.num_questions,
            manifest: None,
            data_seed: 0,
            train_size: DEFAULT_TRAIN,
            test_size: DEFAULT_TEST,
            total_steps: 200,
            eval_every: 5,
            eval_temperature: 0.6,
            seed: 0,
            out: PathBuf::from("runs/default"),
            ema: 0.9,
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            image_height: self.image_height,
            image_width: self.image_width,
            channels: 3,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            num_questions: self.num_questions,
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        let (n1, n2) = match self.mode {
            Mode::Grpo => (self.n1 + self.n2, 0),
            _ => (self.n1, self.n2),
        };
        TrainerConfig {
            mode: self.mode,
            n1,
            n2,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            learning_rate: self.learning_rate,
            rollout_temperature: self.rollout_temperature,
            batch_size: self.batch_size,
            noise_steps: self.noise_steps,
            noise_sigma: self.noise_sigma,
            std_floor: self.std_floor,
            loss_aggregation: self.loss_aggregation,
            attack: AttackConfig {
                alpha: self.alpha,
                iterations: self.attack_iters,
                pixel_min: 0.0,
                pixel_max: 1.0,
                selection: self.tercile,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.trainer().validate()?;
        if self.total_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("total_steps and eval_every must be >= 1".into()));
        }
        if self.eval_temperature.is_nan() || self.eval_temperature <= 0.0 {
            return Err(Error::Config("eval_temperature must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config("ema must be in [0, 1)".into()));
        }
        if self.manifest.is_none() && (self.train_size == 0 || self.test_size == 0) {
            return Err(Error::Config("train_size and test_size must be >= 1".into()));
        }
        Ok(())
    }
}
