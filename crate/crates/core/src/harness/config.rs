use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{KlMode, LossWeights, VarNorm};
use crate::model::ModelConfig;
use crate::synth::{SceneSpec, TransformSpec};
use crate::warp::SimilarityKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub kl_mode: KlMode,
    pub var_norm: VarNorm,
    pub similarity: SimilarityKind,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub model: ModelConfig,
    /// Scene template; its seed is replaced per pair.
    pub scene: SceneSpec,
    /// Transform template; its seed is replaced per pair.
    pub transform: TransformSpec,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub eval_pairs: usize,
    /// Evaluate every this many steps during training (0 = never).
    pub eval_every: usize,
    /// Stop gradients through the Gaussian parameters in the KL term.
    pub detach_gaussian_params: bool,
    /// Fraction of skipped (degenerate-fit) steps above which the run fails.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            kl_mode: KlMode::default(),
            var_norm: VarNorm::default(),
            similarity: SimilarityKind::default(),
            optimizer: AdamConfig::default(),
            steps: 2000,
            batch: 2,
            model: ModelConfig::default(),
            scene: SceneSpec::default(),
            transform: TransformSpec::default(),
            train_seed: 1,
            eval_seed: 2,
            eval_pairs: 16,
            eval_every: 0,
            detach_gaussian_params: false,
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        self.scene.validate()?;
        self.transform.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if self.eval_pairs == 0 {
            return Err(Error::Config("eval_pairs must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::Config("max_skip_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
