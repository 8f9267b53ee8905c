//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdapterLayout, Architecture, FeedMode, ModelOptions, DEFAULT_TAU};
use crate::backbone::BackboneConfig;
use crate::data::{Protocol, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::PixelAuc;
use crate::fsutil;
use crate::inference::ScoreConfig;
use crate::objective::{LevelMask, TrainConfig};
use crate::textbank::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    #[default]
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: Mode,
    pub target: String,
    pub k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub normalize_few: bool,
    pub pixel_auc: PixelAuc,
    /// Seed of the stub text encoder.
    pub text_seed: u64,
    /// Prompt file replacing the built-in states and templates.
    pub prompts: Option<PathBuf>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: Mode::FewShot,
            target: "texture-c".into(),
            k: 4,
            beta1: 0.5,
            beta2: 0.5,
            tau: DEFAULT_TAU,
            normalize_few: false,
            pixel_auc: PixelAuc::Pooled,
            text_seed: 0,
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub levels: LevelMask,
    pub layout: AdapterLayout,
    pub architecture: Architecture,
    pub feed: FeedMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            levels: LevelMask::all(),
            layout: AdapterLayout::Dual,
            architecture: Architecture::Adapter,
            feed: FeedMode::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ablation: AblationConfig,
    pub data: SynthConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fsutil::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.score().validate()?;
        self.data.validate()?;
        if self.data.image_size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "data image size {} differs from backbone image size {}",
                self.data.image_size, self.backbone.image_size
            )));
        }
        if self.ablation.levels.count() == 0 {
            return Err(Error::Config("at least one level must be enabled".into()));
        }
        let inf = &self.inference;
        if inf.target.is_empty() {
            return Err(Error::Config("target modality is empty".into()));
        }
        match inf.mode {
            Mode::FewShot if inf.k == 0 => Err(Error::Config("few-shot mode needs k >= 1".into())),
            Mode::ZeroShot if inf.beta2 > 0.0 => Err(Error::Config(
                "zero-shot mode has no memory bank; set beta2 to 0".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn protocol(&self) -> Protocol {
        match self.inference.mode {
            Mode::ZeroShot => Protocol::ZeroShot,
            Mode::FewShot => Protocol::FewShot { k: self.inference.k },
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            gamma: self.train.gamma,
            architecture: self.ablation.architecture,
            layout: self.ablation.layout,
            feed: self.ablation.feed,
        }
    }

    pub fn score(&self) -> ScoreConfig {
        ScoreConfig {
            beta1: self.inference.beta1,
            beta2: self.inference.beta2,
            tau: self.inference.tau,
            normalize_few: self.inference.normalize_few,
            levels: self.ablation.levels,
        }
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        match &self.inference.prompts {
            Some(p) => PromptSet::parse(&fsutil::read_to_string(p)?),
            None => Ok(PromptSet::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.protocol(), Protocol::FewShot { k: 4 });
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "ablation": {"levels": [1, 4]}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.ablation.levels.levels(), vec![1, 4]);
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.inference.k = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.inference.mode = Mode::ZeroShot;
        assert!(cfg.validate().is_err());
        cfg.inference.beta1 = 1.0;
        cfg.inference.beta2 = 0.0;
        cfg.validate().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 32;
        assert!(cfg.validate().is_err());
    }
}
