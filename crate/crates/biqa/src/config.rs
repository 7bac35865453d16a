use std::path::Path;

use biqa_core::burstgen::GeneratorConfig;
use biqa_core::downstream::TeacherModel;
use biqa_core::model::ModelConfig;
use biqa_core::numerics::AdamConfig;
use biqa_core::objectives::LossConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Annotations from a downstream teacher; distillation enabled.
    Objective,
    /// Annotations imported from a score file; no distillation.
    Subjective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Seeds the split, initialisation and epoch shuffling.
    pub seed: u64,
    pub sequences: usize,
    /// Train:test ratio.
    pub split: [u32; 2],
    pub epochs: usize,
    pub batch_size: usize,
    /// Teachers annotated when the dataset is built.
    pub teachers: Vec<String>,
    /// Annotation set used for training and evaluation: a teacher id in
    /// objective mode, an imported score-set name in subjective mode.
    pub annotation: String,
    /// Random subsets drawn per sequence for the random-selection baseline.
    pub random_draws: usize,
    pub generator: GeneratorConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Objective,
            seed: 0,
            sequences: 200,
            split: [4, 1],
            epochs: 20,
            batch_size: 1,
            teachers: vec!["denoise".into()],
            annotation: "denoise".into(),
            random_draws: 10,
            generator: GeneratorConfig {
                frames: 8,
                planted_outlier_prob: 1.0,
                ..GeneratorConfig::default()
            },
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.loss.validate()?;
        self.model.validate(self.generator.height, self.generator.width)?;
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if self.split[0] == 0 || self.split[1] == 0 {
            return Err(Error::Config("split ratio parts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sequences < 2 {
            return Err(Error::Config("need at least 2 sequences for a train/test split".into()));
        }
        if self.random_draws == 0 {
            return Err(Error::Config("random_draws must be positive".into()));
        }
        let teacher = |id: &str| TeacherModel::from_id(id).map_err(|e| match e {
            biqa_core::Error::Config(m) => Error::Config(m),
            other => Error::Core(other),
        });
        for t in &self.teachers {
            teacher(t)?;
        }
        if self.mode == Mode::Objective {
            teacher(&self.annotation)?;
        }
        Ok(())
    }

    /// Number of test sequences for a dataset of `n`.
    pub fn test_count(&self, n: usize) -> usize {
        let [a, b] = self.split;
        let t = (n as f64 * b as f64 / (a + b) as f64).round() as usize;
        t.clamp(1, n - 1)
    }
}
