use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mae::MaeConfig;
use crate::model::ModelConfig;
use crate::numcore::SgdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uda,
    Ada,
    Sfada,
    Msda,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Uda => "uda",
            Mode::Ada => "ada",
            Mode::Sfada => "sfada",
            Mode::Msda => "msda",
        }
    }

    /// Whether the mode acquires target labels.
    pub fn is_active(self) -> bool {
        matches!(self, Mode::Ada | Mode::Sfada)
    }

    /// Whether source data is available during adaptation.
    pub fn uses_source(self) -> bool {
        self != Mode::Sfada
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uda" => Ok(Mode::Uda),
            "ada" => Ok(Mode::Ada),
            "sfada" => Ok(Mode::Sfada),
            "msda" => Ok(Mode::Msda),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub max_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub sgd: SgdConfig,
    pub model: ModelConfig,
    pub debias_m: f32,
    pub debias_eta: f32,
    /// Annotation budget: a fraction of the target domain when below 1,
    /// otherwise a sample count.
    pub budget: f64,
    /// Labels per active round; defaults to half the budget.
    pub round_size: Option<usize>,
    /// Fraction of MI samples kept as the confident set.
    pub m_pct: f32,
    pub mae: MaeConfig,
    /// Epoch at which the teacher switches from zero-shot to centroid
    /// similarities; defaults to `max_epoch / 2`.
    pub centroid_switch_epoch: Option<usize>,
    /// In active modes, also supervise the confident set (with agreed
    /// labels) alongside acquired labels. Off by default: acquired labels
    /// replace the confident set.
    pub active_uses_confident: bool,
    /// Source domain to adapt from when the dataset has several.
    pub source_domain: Option<String>,
    pub target_domain: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Uda,
            max_epoch: 60,
            batch_size: 32,
            seed: 0,
            loss: LossWeights::default(),
            sgd: SgdConfig::default(),
            model: ModelConfig::default(),
            debias_m: 0.99,
            debias_eta: 0.5,
            budget: 0.0,
            round_size: None,
            m_pct: 0.10,
            mae: MaeConfig::default(),
            centroid_switch_epoch: None,
            active_uses_confident: false,
            source_domain: None,
            target_domain: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sgd.validate()?;
        self.model.validate()?;
        self.mae.validate()?;
        if self.max_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epoch and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.m_pct) {
            return Err(Error::Config(format!("m_pct must lie in [0, 1], got {}", self.m_pct)));
        }
        if !(0.0..1.0).contains(&self.debias_m) || self.debias_eta < 0.0 {
            return Err(Error::Config("debias momentum must lie in [0, 1) and eta be >= 0".into()));
        }
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!("budget must be >= 0, got {}", self.budget)));
        }
        match (self.mode.is_active(), self.budget > 0.0) {
            (true, false) => Err(Error::Config(format!("mode {} needs a positive budget", self.mode.as_str()))),
            (false, true) => Err(Error::Config(format!(
                "mode {} does not annotate; budget must be 0",
                self.mode.as_str()
            ))),
            _ => Ok(()),
        }
    }

    /// Budget in samples for a target domain of `n_target` samples.
    pub fn budget_count(&self, n_target: usize) -> usize {
        let b = if self.budget < 1.0 {
            (self.budget * n_target as f64).round() as usize
        } else {
            self.budget as usize
        };
        b.min(n_target)
    }

    pub fn round_count(&self, budget: usize) -> usize {
        self.round_size.unwrap_or(budget.div_ceil(2)).max(usize::from(budget > 0))
    }

    pub fn switch_epoch(&self) -> usize {
        self.centroid_switch_epoch.unwrap_or(self.max_epoch / 2)
    }
}
