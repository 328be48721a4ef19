//! Training configuration, loaded from a single JSON document.
//!
//! Every field is required when a file is given; [`TrainConfig::default`]
//! documents the defaults and is what `--config` falls back to.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of the distribution term.
    pub beta: f64,
    /// VAE reconstruction weight.
    pub lambda1: f64,
    /// VAE KL weight.
    pub lambda2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub variance_fraction: f64,
    pub width: usize,
    pub height: usize,
    pub sigma_fix: f64,
    pub flags: Flags,
    pub trd: TrdConfig,
    pub ppl: PplConfig,
    pub gap_cnn: GapConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    pub use_trd: bool,
    pub use_mdrd: bool,
    pub use_ppl: bool,
    /// Also fine-tune the class-activation backbone under the fusion loss.
    pub finetune_efnet_all: bool,
    /// Interleave the two prior-learning stages instead of running them in sequence.
    pub joint_ppl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrdConfig {
    pub scales: Vec<f64>,
    pub stride: usize,
    pub sigma_blur: f64,
    pub patch_size: usize,
    /// Decision value used only when rendering binary text masks.
    pub threshold: f64,
    pub train_steps: usize,
    pub train_batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PplConfig {
    pub vae_steps: usize,
    pub plnet_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Extents of the downsampled maps the VAE sees.
    pub vae_width: usize,
    pub vae_height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_thresholds: usize,
    pub metric_seed: u64,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1e-4,
            lr: 3e-3,
            steps: 3000,
            batch: 4,
            seed: 0,
            variance_fraction: 0.9,
            width: 128,
            height: 96,
            sigma_fix: 4.0,
            flags: Flags {
                use_trd: true,
                use_mdrd: true,
                use_ppl: true,
                finetune_efnet_all: false,
                joint_ppl: false,
            },
            trd: TrdConfig {
                scales: vec![1.0, 0.75, 0.5],
                stride: 8,
                sigma_blur: 3.0,
                patch_size: 16,
                threshold: 0.5,
                train_steps: 1500,
                train_batch: 16,
                lr: 3e-3,
            },
            ppl: PplConfig {
                vae_steps: 1500,
                plnet_steps: 1500,
                batch: 8,
                lr: 1e-3,
                latent_dim: 16,
                hidden: 256,
                vae_width: 32,
                vae_height: 24,
            },
            gap_cnn: GapConfig {
                steps: 400,
                batch: 6,
                lr: 3e-3,
                n_classes: 3,
            },
            eval: EvalConfig {
                n_thresholds: 100,
                metric_seed: 0,
                holdout_fraction: 0.2,
            },
        }
    }
}

impl TrainConfig {
    /// Parses and validates; schema errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            // serde reports missing fields at the parent path
            let path = match inner.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                Some(field) if path == "." => field.to_string(),
                Some(field) => format!("{path}.{field}"),
                None => path,
            };
            ConfigError::Field { path, message: inner }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.alpha) || !finite_nonneg(self.beta) || self.alpha + self.beta == 0.0 {
            return bad(format!("alpha ({}) and beta ({}) must be >= 0 and not both 0", self.alpha, self.beta));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad("lambda1 and lambda2 must be positive".into());
        }
        if !(self.lr > 0.0 && self.ppl.lr > 0.0 && self.gap_cnn.lr > 0.0 && self.trd.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch == 0 || self.ppl.batch == 0 || self.gap_cnn.batch == 0 || self.trd.train_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.variance_fraction > 0.0 && self.variance_fraction <= 1.0) {
            return bad(format!("variance_fraction must lie in (0, 1], got {}", self.variance_fraction));
        }
        if !(self.sigma_fix > 0.0) {
            return bad("sigma_fix must be positive".into());
        }
        if self.width % 4 != 0 || self.height % 4 != 0 || self.width == 0 || self.height == 0 {
            return bad(format!("working resolution {}x{} must be a positive multiple of 4", self.width, self.height));
        }
        let (vw, vh) = (self.ppl.vae_width, self.ppl.vae_height);
        if vw == 0 || vh == 0 || self.width % vw != 0 || self.height % vh != 0 || self.width / vw != self.height / vh {
            return bad(format!(
                "VAE grid {vw}x{vh} must divide the working resolution {}x{} by one integer factor",
                self.width, self.height
            ));
        }
        if self.ppl.latent_dim == 0 || self.ppl.hidden == 0 {
            return bad("latent_dim and hidden must be positive".into());
        }
        if self.gap_cnn.n_classes < 2 {
            return bad("gap_cnn.n_classes must be at least 2".into());
        }
        if self.trd.scales.is_empty() || self.trd.scales.iter().any(|s| !(*s > 0.0 && *s <= 4.0)) {
            return bad("trd.scales must be non-empty with values in (0, 4]".into());
        }
        if self.trd.stride == 0 || self.trd.patch_size < 4 || self.trd.patch_size % 4 != 0 {
            return bad("trd.stride must be >= 1 and trd.patch_size a multiple of 4".into());
        }
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 1.0) {
            return bad("eval.holdout_fraction must lie in (0, 1)".into());
        }
        if self.eval.n_thresholds < 2 {
            return bad("eval.n_thresholds must be at least 2".into());
        }
        Ok(())
    }

    /// Factor between the working resolution and the VAE grid.
    pub fn vae_factor(&self) -> usize {
        self.width / self.ppl.vae_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn missing_fields_are_named() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("alpha");
        match TrainConfig::from_json(&v.to_string()) {
            Err(ConfigError::Field { path, .. }) => assert_eq!(path, "alpha"),
            other => panic!("{other:?}"),
        }
        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json()).unwrap();
        v["trd"].as_object_mut().unwrap().remove("stride");
        match TrainConfig::from_json(&v.to_string()) {
            Err(ConfigError::Field { path, .. }) => assert_eq!(path, "trd.stride"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_types_and_bad_values() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json()).unwrap();
        v["flags"]["use_trd"] = serde_json::json!("yes");
        match TrainConfig::from_json(&v.to_string()) {
            Err(ConfigError::Field { path, .. }) => assert_eq!(path, "flags.use_trd"),
            other => panic!("{other:?}"),
        }
        let mut cfg = TrainConfig::default();
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }
}
