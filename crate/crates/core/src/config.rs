//! Training configuration: a flat TOML document whose keys mirror the
//! [`TrainConfig`] field names. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{RecurrentKind, SentenceEncoderKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelType};
use crate::perturb::PerturbConfig;
use crate::proposal::AnchorSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_type: ModelType,
    /// Fraction of training pairs with ground-truth annotations.
    pub labeled_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the attention calibration term.
    pub alpha_r: f64,
    /// Weight of the boundary term.
    pub alpha_p: f64,
    /// Weight of the self-supervised loss.
    pub beta: f64,
    /// Contrastive margin.
    pub margin: f64,
    /// Playback rates for time scaling.
    pub theta_set: Vec<f64>,
    /// Maximum sequence length; longer videos are uniformly subsampled.
    pub max_len: usize,
    pub hidden: usize,
    pub projection_dim: usize,
    pub anchor_widths: Vec<f64>,
    pub nms_threshold: f64,
    pub pretrain_epochs: usize,
    pub semi_epochs: usize,
    /// Teacher update `teacher <- d * student + (1 - d) * teacher`.
    pub teacher_ema_decay: f64,
    pub seed: u64,
    pub use_pseudo: bool,
    pub use_perturb: bool,
    /// Also perturb labeled videos in the semi-supervised phase.
    pub perturb_labeled: bool,
    pub use_intra_cl: bool,
    pub use_inter_cl: bool,
    /// Weight of pseudo-labeled terms in the task loss.
    pub pseudo_weight: f64,
    /// Pseudo labels scoring below this are dropped.
    pub pseudo_min_score: f64,
    /// Pool anchor class counts over all widths instead of per width.
    pub global_class_weights: bool,
    pub lag_min_fraction: f64,
    pub lag_max_fraction: f64,
    pub interpolate: bool,
    pub recurrent: RecurrentKind,
    pub sentence_encoder: SentenceEncoderKind,
    pub coattention_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let perturb = PerturbConfig::default();
        Self {
            model_type: ModelType::Regression,
            labeled_fraction: 0.1,
            batch_size: 32,
            learning_rate: 0.001,
            alpha_r: 0.01,
            alpha_p: 1.0,
            beta: 1.0,
            margin: 1.0,
            theta_set: perturb.theta_set,
            max_len: 128,
            hidden: 512,
            projection_dim: 128,
            anchor_widths: AnchorSet::standard().widths().to_vec(),
            nms_threshold: 0.5,
            pretrain_epochs: 10,
            semi_epochs: 10,
            teacher_ema_decay: 1.0,
            seed: 0,
            use_pseudo: true,
            use_perturb: true,
            perturb_labeled: false,
            use_intra_cl: true,
            use_inter_cl: true,
            pseudo_weight: 1.0,
            pseudo_min_score: 0.0,
            global_class_weights: false,
            lag_min_fraction: perturb.lag_min_fraction,
            lag_max_fraction: perturb.lag_max_fraction,
            interpolate: perturb.interpolate,
            recurrent: RecurrentKind::Bilstm,
            sentence_encoder: SentenceEncoderKind::Bilstm,
            coattention_rounds: 2,
        }
    }
}

fn unit_interval(name: &str, v: f64, open_low: bool) -> Result<()> {
    let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        let low = if open_low { "(0" } else { "[0" };
        Err(Error::Config(format!("{name} = {v} outside {low}, 1]")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be finite and >= 0")))
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        unit_interval("labeled_fraction", self.labeled_fraction, true)?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("hidden", self.hidden),
            ("projection_dim", self.projection_dim),
            ("coattention_rounds", self.coattention_rounds),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden = {} must be even", self.hidden)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("alpha_r", self.alpha_r),
            ("alpha_p", self.alpha_p),
            ("beta", self.beta),
            ("margin", self.margin),
            ("pseudo_weight", self.pseudo_weight),
        ] {
            non_negative(name, v)?;
        }
        if !self.pseudo_min_score.is_finite() {
            return Err(Error::Config("pseudo_min_score must be finite".into()));
        }
        if self.theta_set.is_empty() {
            return Err(Error::Config("theta_set must not be empty".into()));
        }
        for &theta in &self.theta_set {
            unit_interval("theta_set entry", theta, true)?;
        }
        AnchorSet::new(self.anchor_widths.clone())?;
        unit_interval("nms_threshold", self.nms_threshold, false)?;
        unit_interval("teacher_ema_decay", self.teacher_ema_decay, false)?;
        unit_interval("lag_min_fraction", self.lag_min_fraction, false)?;
        unit_interval("lag_max_fraction", self.lag_max_fraction, false)?;
        if self.lag_min_fraction > self.lag_max_fraction {
            return Err(Error::Config(format!(
                "lag_min_fraction = {} exceeds lag_max_fraction = {}",
                self.lag_min_fraction, self.lag_max_fraction
            )));
        }
        Ok(())
    }

    pub fn anchors(&self) -> AnchorSet {
        AnchorSet::new(self.anchor_widths.clone()).expect("validated anchor widths")
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            theta_set: self.theta_set.clone(),
            lag_min_fraction: self.lag_min_fraction,
            lag_max_fraction: self.lag_max_fraction,
            interpolate: self.interpolate,
        }
    }

    pub fn model_config(&self, video_dim: usize, word_dim: usize) -> ModelConfig {
        ModelConfig {
            model_type: self.model_type,
            video_dim,
            word_dim,
            hidden: self.hidden,
            projection_dim: self.projection_dim,
            recurrent: self.recurrent,
            sentence_encoder: self.sentence_encoder,
            coattention_rounds: self.coattention_rounds,
            anchors: self.anchors(),
        }
    }

    /// Toggles `(use_pseudo, use_perturb, use_intra_cl, use_inter_cl)`.
    pub fn toggles(&self) -> (bool, bool, bool, bool) {
        (self.use_pseudo, self.use_perturb, self.use_intra_cl, self.use_inter_cl)
    }

    pub fn with_toggles(&self, toggles: (bool, bool, bool, bool)) -> Self {
        Self {
            use_pseudo: toggles.0,
            use_perturb: toggles.1,
            use_intra_cl: toggles.2,
            use_inter_cl: toggles.3,
            ..self.clone()
        }
    }
}
