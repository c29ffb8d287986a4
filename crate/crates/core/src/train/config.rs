//! Experiment configuration files.
//!
//! A configuration is a TOML document written as flat dotted keys, one
//! setting per line:
//!
//! ```text
//! experiment = "exp3_dual_channel"
//! model = "s3_fusion_convnext"
//! backbone.family = "convnext"
//! backbone.variant = "mini"
//! data.source = "synthetic"
//! transform.target_size = 64
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Family, Variant};
use crate::catalog::split::parse_ratio;
use crate::data::{SyntheticDatasetSpec, TransformConfig};
use crate::error::{Error, Result};
use crate::fusion::{DualModel, ModelSpec};
use crate::label::DamageLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Post-event images only, three damage classes.
    Exp1PostOnly,
    /// Post-event images plus each pair's pre-event image as no-damage.
    Exp2FourClass,
    /// Pre/post pairs through a dual-channel model.
    Exp3DualChannel,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exp1PostOnly => "exp1_post_only",
            Self::Exp2FourClass => "exp2_four_class",
            Self::Exp3DualChannel => "exp3_dual_channel",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Exp2FourClass => DamageLabel::ALL.len(),
            _ => DamageLabel::DAMAGE.len(),
        }
    }

    pub fn default_lr_max(self) -> f64 {
        match self {
            Self::Exp3DualChannel => 1e-3,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Self::Exp1PostOnly, Self::Exp2FourClass, Self::Exp3DualChannel]
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub family: Family,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Tensor archive of a 3-channel backbone; random initialization when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

fn default_variant() -> Variant {
    Variant::Mini
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Catalog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Number of synthetic pairs.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Seed of the synthetic generator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic: SyntheticDatasetSpec,
    /// Image manifest CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    /// Pair list (JSON Lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    /// Consensus labels, CSV `pair_id,label`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Base directory for relative image URIs; defaults to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    /// Directory of `<pair_id>.png` damage masks, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<PathBuf>,
}

fn default_count() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Dual-channel model; exp3 only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<DualModel>,
    pub backbone: BackboneSection,
    #[serde(default = "one")]
    pub attention_heads: usize,
    #[serde(default = "default_ratio")]
    pub split_ratio: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate; 1e-4 for exp1/exp2 and 1e-3 for exp3 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_max: Option<f64>,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Defaults to true for exp3 and false otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_backbone: Option<bool>,
    /// Weight the loss by inverse training-class frequency.
    #[serde(default)]
    pub class_weighting: bool,
    /// Serial, fixed-order execution.
    #[serde(default)]
    pub strict_determinism: bool,
    pub data: DataSection,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> usize {
    1
}
fn default_ratio() -> String {
    "8:2".into()
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    16
}
fn default_lr_min() -> f64 {
    1e-6
}
fn default_weight_decay() -> f64 {
    0.05
}

impl ExperimentConfig {
    /// Parse and validate; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, dir)
    }

    /// Minimal synthetic configuration, mostly for tests.
    pub fn synthetic(experiment: Experiment, model: Option<DualModel>, family: Family) -> Self {
        Self {
            experiment,
            model,
            backbone: BackboneSection {
                family,
                variant: Variant::Mini,
                weights: None,
            },
            attention_heads: 1,
            split_ratio: default_ratio(),
            seed: 0,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_max: None,
            lr_min: default_lr_min(),
            weight_decay: default_weight_decay(),
            freeze_backbone: None,
            class_weighting: false,
            strict_determinism: false,
            data: DataSection {
                source: DataSource::Synthetic,
                count: default_count(),
                seed: 0,
                synthetic: SyntheticDatasetSpec::default(),
                catalog: None,
                pairs: None,
                labels: None,
                image_root: None,
                masks: None,
            },
            transform: TransformConfig {
                target_size: 64,
                ..TransformConfig::default()
            },
            base_dir: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.experiment, self.model) {
            (Experiment::Exp3DualChannel, None) => return bad("exp3_dual_channel needs `model`".into()),
            (Experiment::Exp1PostOnly | Experiment::Exp2FourClass, Some(m)) => {
                return bad(format!("{} is single-channel; `model = \"{m}\"` is not allowed", self.experiment))
            }
            _ => {}
        }
        match (self.experiment, self.freeze_backbone()) {
            (Experiment::Exp3DualChannel, false) => {
                return bad("exp3_dual_channel trains fusion and head only; freeze_backbone must be true".into())
            }
            (Experiment::Exp1PostOnly | Experiment::Exp2FourClass, true) => {
                return bad(format!("{} fine-tunes end to end; freeze_backbone must be false", self.experiment))
            }
            _ => {}
        }
        parse_ratio(&self.split_ratio).map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        let lr_max = self.lr_max();
        if !(self.lr_min > 0.0 && lr_max >= self.lr_min && lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {lr_max}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad(format!("weight_decay {} outside [0, 1)", self.weight_decay));
        }
        self.transform.validate()?;
        let r = self.backbone_config().reduction();
        if self.transform.target_size % r != 0 {
            return bad(format!("transform.target_size {} must be a multiple of {r}", self.transform.target_size));
        }
        match self.data.source {
            DataSource::Synthetic if self.data.count == 0 => return bad("data.count must be positive".into()),
            DataSource::Catalog => {
                for (k, v) in [
                    ("data.catalog", &self.data.catalog),
                    ("data.pairs", &self.data.pairs),
                    ("data.labels", &self.data.labels),
                ] {
                    if v.is_none() {
                        return bad(format!("{k} is required when data.source = \"catalog\""));
                    }
                }
            }
            _ => {}
        }
        self.model_spec().validate()
    }

    pub fn lr_max(&self) -> f64 {
        self.lr_max.unwrap_or_else(|| self.experiment.default_lr_max())
    }

    pub fn freeze_backbone(&self) -> bool {
        self.freeze_backbone
            .unwrap_or(self.experiment == Experiment::Exp3DualChannel)
    }

    pub fn ratio(&self) -> Result<(u32, u32)> {
        parse_ratio(&self.split_ratio)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::new(self.backbone.family, self.backbone.variant)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let classes = self.experiment.num_classes();
        let mut spec = match self.model {
            Some(m) => ModelSpec::dual(m, self.backbone_config(), classes),
            None => ModelSpec::single(self.backbone_config(), classes),
        };
        spec.attention_heads = self.attention_heads;
        spec
    }

    /// Report row label: the dual model's display name, or e.g. `ConvNeXt_mini`.
    pub fn model_name(&self) -> String {
        match self.model {
            Some(m) => m.display_name().to_string(),
            None => {
                let family = match self.backbone.family {
                    Family::Convnext => "ConvNeXt",
                    Family::Swin => "Swin",
                };
                format!("{family}_{}", self.backbone.variant)
            }
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON form, lowercase hex.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXP3: &str = r#"
# feature fusion on mini ConvNeXt
experiment = "exp3_dual_channel"
model = "s3_fusion_convnext"
backbone.family = "convnext"
backbone.variant = "mini"
backbone.weights = "weights/convnext_mini"
seed = 3
epochs = 4
data.source = "synthetic"
data.count = 40
data.synthetic.size = 64
transform.target_size = 64
"#;

    #[test]
    fn parses_flat_keys_and_defaults() {
        let c = ExperimentConfig::from_toml(EXP3, "/cfg").unwrap();
        assert_eq!(c.model, Some(DualModel::S3FusionConvnext));
        assert_eq!(c.lr_max(), 1e-3);
        assert!(c.freeze_backbone());
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.ratio().unwrap(), (8, 2));
        assert_eq!(
            c.resolve(c.backbone.weights.as_deref().unwrap()),
            PathBuf::from("/cfg/weights/convnext_mini")
        );
        assert_eq!(c.model_name(), "Feature-fusion ConvNext");
    }

    #[test]
    fn hash_ignores_location_and_tracks_content() {
        let a = ExperimentConfig::from_toml(EXP3, "/a").unwrap();
        let b = ExperimentConfig::from_toml(EXP3, "/b").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = ExperimentConfig::from_toml(&EXP3.replace("seed = 3", "seed = 4"), "/a").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_invalid_combinations() {
        let exp1_with_model = EXP3.replace("exp3_dual_channel", "exp1_post_only");
        assert!(matches!(
            ExperimentConfig::from_toml(&exp1_with_model, ""),
            Err(Error::Config(_))
        ));
        let unfrozen = format!("{EXP3}freeze_backbone = false\n");
        assert!(matches!(ExperimentConfig::from_toml(&unfrozen, ""), Err(Error::Config(_))));
        let swin_fusion = EXP3.replace("\"convnext\"", "\"swin\"");
        assert!(ExperimentConfig::from_toml(&swin_fusion, "").is_err());
        let unknown = format!("{EXP3}learning_rate = 0.1\n");
        assert!(ExperimentConfig::from_toml(&unknown, "").is_err());
        let odd_size = EXP3.replace("transform.target_size = 64", "transform.target_size = 48");
        assert!(ExperimentConfig::from_toml(&odd_size, "").is_err());
        let no_catalog = EXP3.replace("\"synthetic\"", "\"catalog\"");
        assert!(ExperimentConfig::from_toml(&no_catalog, "").is_err());
    }

    #[test]
    fn single_model_names() {
        let c = ExperimentConfig::synthetic(Experiment::Exp1PostOnly, None, Family::Convnext);
        c.validate().unwrap();
        assert_eq!(c.model_name(), "ConvNeXt_mini");
        assert_eq!(c.model_spec().num_classes, 3);
        let c = ExperimentConfig::synthetic(Experiment::Exp2FourClass, None, Family::Swin);
        assert_eq!(c.model_name(), "Swin_mini");
        assert_eq!(c.model_spec().num_classes, 4);
        assert_eq!(c.lr_max(), 1e-4);
    }
}
