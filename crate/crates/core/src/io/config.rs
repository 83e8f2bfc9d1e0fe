//! Run configuration files: TOML with `[model]`, `[fusion]`, `[train]`,
//! and `[data]` sections. Unknown keys are errors; together with a seed a
//! config fully specifies a reproducible run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::fusion::FusionConfig;
use crate::model::{FusionVariant, ModelConfig};
use crate::synth::BenchmarkKind;
use crate::train::{AdamHyper, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_joints: usize,
    pub decoder_mid: usize,
    pub variant: String,
    pub variant_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        Self {
            image_h: bb.image_h,
            image_w: bb.image_w,
            patch: bb.patch,
            channels: bb.channels,
            depth: bb.depth,
            heads: bb.heads,
            mlp_ratio: bb.mlp_ratio,
            n_joints: bb.n_joints,
            decoder_mid: bb.decoder_mid,
            variant: "joint_specific".to_string(),
            variant_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub jta_layers: usize,
    pub gra_layers: usize,
    pub phi: f64,
    pub temporal_span: usize,
    pub heads: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            jta_layers: f.jta_layers,
            gra_layers: f.gra_layers,
            phi: f.phi,
            temporal_span: f.temporal_span,
            heads: f.heads,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub augment: bool,
    pub sigma: f64,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            weight_decay: t.adam.weight_decay,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            seed: t.seed,
            augment: t.augment,
            sigma: t.sigma,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: String,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: "plain".to_string(),
            train_count: 64,
            test_count: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub fusion: FusionSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Parse TOML text. Unknown keys and malformed values surface as
    /// errors naming the line and key.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigFileError> {
        toml::from_str(text).map_err(|e| ConfigFileError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigFileError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ConfigFileError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigFileError> {
        let variant = FusionVariant::parse(&self.model.variant).ok_or_else(|| {
            ConfigFileError::Invalid(format!(
                "unknown variant {:?}; expected one of joint_specific, self_all, \
                 cross_only, selfaux_then_cross, single_frame",
                self.model.variant
            ))
        })?;
        let config = ModelConfig {
            backbone: BackboneConfig {
                image_h: self.model.image_h,
                image_w: self.model.image_w,
                patch: self.model.patch,
                channels: self.model.channels,
                depth: self.model.depth,
                heads: self.model.heads,
                mlp_ratio: self.model.mlp_ratio,
                n_joints: self.model.n_joints,
                decoder_mid: self.model.decoder_mid,
            },
            fusion: FusionConfig {
                jta_layers: self.fusion.jta_layers,
                gra_layers: self.fusion.gra_layers,
                phi: self.fusion.phi,
                temporal_span: self.fusion.temporal_span,
                heads: self.fusion.heads,
            },
            variant,
            variant_layers: self.model.variant_layers,
        };
        config
            .validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size.max(1),
            base_lr: self.train.base_lr,
            adam: AdamHyper {
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                epsilon: self.train.epsilon,
                weight_decay: self.train.weight_decay,
            },
            seed: self.train.seed,
            augment: self.train.augment,
            sigma: self.train.sigma,
            max_steps: self.train.max_steps,
        }
    }

    pub fn data_kind(&self) -> Result<BenchmarkKind, ConfigFileError> {
        BenchmarkKind::parse(&self.data.kind).ok_or_else(|| {
            ConfigFileError::Invalid(format!(
                "unknown data kind {:?}; expected plain, occlusion, or blur",
                self.data.kind
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.patch, 16);
        assert_eq!(cfg.fusion.phi, 0.2);
        assert!(cfg.model_config().is_ok());
    }

    #[test]
    fn unknown_keys_are_errors_naming_line_and_key() {
        let err = RunConfig::parse("[model]\nchannels = 32\nbanana = 7\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("banana"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");

        let err = RunConfig::parse("[nonsense]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"));
    }

    #[test]
    fn malformed_values_name_the_line() {
        let err = RunConfig::parse("[train]\nepochs = \"many\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let mut cfg = RunConfig::default();
        cfg.model.channels = 64;
        cfg.model.variant = "cross_only".into();
        cfg.fusion.phi = 0.15;
        cfg.train.max_steps = Some(123);
        cfg.data.kind = "occlusion".into();
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn variant_and_kind_strings_are_validated() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = "nope".into();
        assert!(cfg.model_config().is_err());
        cfg.model.variant = "self_all".into();
        assert!(cfg.model_config().is_ok());
        cfg.data.kind = "what".into();
        assert!(cfg.data_kind().is_err());
    }

    #[test]
    fn invalid_geometry_is_rejected_at_conversion() {
        let cfg = RunConfig::parse("[model]\nimage_h = 50\n").unwrap();
        assert!(matches!(cfg.model_config(), Err(ConfigFileError::Invalid(_))));
    }
}
