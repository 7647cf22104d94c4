use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::SkeletalLossWeights;
use crate::network::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// BatchNorm running statistics only; no gradients.
    OnlineBn,
    /// One skeletal-loss step per sample; state carries over.
    OnlineBp,
    /// Reset to the source model before every sample.
    Standard,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 3] = [AdaptMode::OnlineBn, AdaptMode::OnlineBp, AdaptMode::Standard];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::OnlineBn => "online-bn",
            AdaptMode::OnlineBp => "online-bp",
            AdaptMode::Standard => "standard",
        }
    }

    /// Default inner iterations per sample.
    pub fn default_iterations(self) -> usize {
        match self {
            AdaptMode::Standard => 20,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    #[default]
    Rotation,
    Hflip,
    Translation,
    None,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [
        Augmentation::Rotation,
        Augmentation::Hflip,
        Augmentation::Translation,
        Augmentation::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Rotation => "rotation",
            Augmentation::Hflip => "hflip",
            Augmentation::Translation => "translation",
            Augmentation::None => "none",
        }
    }
}

macro_rules! named_enum {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::invalid(format!(concat!("unknown ", $what, " '{}'"), s)))
            }
        }
    };
}

named_enum!(AdaptMode, "adaptation mode");
named_enum!(Augmentation, "augmentation");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning rate must be finite and nonnegative"
        );
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "optimizer eps must be positive");
        ensure!(self.weight_decay >= 0.0, "weight decay must be nonnegative");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub views: usize,
    pub momentum: f64,
    /// Inner iterations per sample; `None` uses the mode's default.
    pub iterations: Option<usize>,
    pub augmentation: Augmentation,
    pub optimizer: OptimizerConfig,
    /// Stream samples adapted together in standard mode.
    pub batch_size: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::OnlineBn,
            views: 48,
            momentum: 0.1,
            iterations: None,
            augmentation: Augmentation::Rotation,
            optimizer: OptimizerConfig {
                learning_rate: 1e-4,
                ..OptimizerConfig::default()
            },
            batch_size: 1,
        }
    }
}

impl AdaptConfig {
    pub fn iterations(&self) -> usize {
        self.iterations.unwrap_or_else(|| self.mode.default_iterations())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.views >= 1, "need at least one view");
        ensure!((0.0..=1.0).contains(&self.momentum), "momentum must lie in [0, 1], got {}", self.momentum);
        ensure!(self.batch_size >= 1, "adaptation batch size must be positive");
        self.optimizer.validate()
    }
}

/// Everything a pretraining or adaptation run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: SkeletalLossWeights,
    pub n_per_sphere: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Uniform random rescaling of training clouds.
    pub scale_augmentation: bool,
    /// Stop pretraining once clean test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub adapt: AdaptConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: SkeletalLossWeights::default(),
            n_per_sphere: 8,
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: 32,
            scale_augmentation: true,
            target_accuracy: None,
            adapt: AdaptConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.adapt.validate()?;
        ensure!(self.n_per_sphere >= 1, "n_per_sphere must be positive");
        ensure!(self.batch_size >= 2, "training batch size must be at least 2, got {}", self.batch_size);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
