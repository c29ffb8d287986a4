//! Complete classifiers: backbone(s), optional fusion, head.
//!
//! Parameter layout in one [`ParamStore`]:
//!
//! - single-stream and channel-concat models: `backbone.*`
//! - feature fusion and siamese models share one encoder: `backbone.*`
//! - cross-attention and dual Swin models: `pre_backbone.*`, `post_backbone.*`
//! - fusion parameters: `fusion.w_q`, `fusion.w_k`, `fusion.w_v` or `fusion.theta`
//! - head: `head.norm.*`, `head.fc.*`

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{cross_attention, dual_swin_fuse};
use super::head::{head_forward, init_head, logits_rows, DamageLogits};
use super::{DualModel, FusionStrategy};
use crate::autograd::{Graph, Var};
use crate::backbone::{self, BackboneConfig, LoadReport};
use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One image in, one backbone.
    Single,
    Dual(DualModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Per-branch backbone with 3 input channels; channel concat widens it.
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub attention_heads: usize,
}

pub struct ModelOutput {
    pub logits: Var,
    /// Named intermediate maps, all `[B, H, W, C]`.
    pub taps: BTreeMap<String, Var>,
    pub attention: Option<Var>,
    pub alpha: Option<Var>,
}

pub struct FusionOutput {
    pub logits: Var,
    pub fused: Option<Var>,
    pub attention: Option<Var>,
    pub alpha: Option<Var>,
}

impl ModelSpec {
    pub fn single(backbone: BackboneConfig, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Single,
            backbone,
            num_classes,
            attention_heads: 1,
        }
    }

    pub fn dual(model: DualModel, backbone: BackboneConfig, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Dual(model),
            backbone,
            num_classes,
            attention_heads: 1,
        }
    }

    pub fn strategy(&self) -> Option<FusionStrategy> {
        match self.architecture {
            Architecture::Single => None,
            Architecture::Dual(m) => Some(m.strategy()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.input_channels != 3 {
            return Err(Error::Config("model backbone must be declared with 3 input channels".into()));
        }
        if !(3..=4).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be 3 or 4, got {}", self.num_classes)));
        }
        if let Architecture::Dual(m) = self.architecture {
            if m.family() != self.backbone.family {
                return Err(Error::Config(format!(
                    "model {m} needs a {} backbone, configured {}",
                    m.family(),
                    self.backbone.family
                )));
            }
            let d = self.backbone.out_dim();
            if self.attention_heads == 0 || d % self.attention_heads != 0 {
                return Err(Error::Config(format!(
                    "attention_heads {} does not divide feature dimension {d}",
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }

    /// Whether a forward pass consumes the pre-event image.
    pub fn needs_pre(&self) -> bool {
        matches!(self.architecture, Architecture::Dual(_))
    }

    /// Backbone config as instantiated (6 channels for channel concat).
    pub fn branch_config(&self) -> BackboneConfig {
        match self.strategy() {
            Some(FusionStrategy::ChannelConcat) => self.backbone.clone().with_input_channels(6),
            _ => self.backbone.clone(),
        }
    }

    pub fn backbone_prefixes(&self) -> &'static [&'static str] {
        match self.strategy() {
            Some(FusionStrategy::CrossAttention | FusionStrategy::DualSwin) => &["pre_backbone.", "post_backbone."],
            _ => &["backbone."],
        }
    }

    /// Grad-CAM target used when none is configured.
    pub fn default_target(&self) -> &'static str {
        match self.architecture {
            Architecture::Single | Architecture::Dual(DualModel::S1Concat | DualModel::BaselineConcatSwin) => {
                "main.features"
            }
            Architecture::Dual(_) => "post.features",
        }
    }

    /// Names of every map [`ModelSpec::forward`] exposes.
    pub fn tap_names(&self) -> Vec<String> {
        let branches: &[&str] = if self.default_target() == "main.features" {
            &["main"]
        } else {
            &["pre", "post"]
        };
        let mut out = Vec::new();
        for br in branches {
            for s in 1..=4 {
                out.push(format!("{br}.stage{s}"));
            }
            out.push(format!("{br}.features"));
        }
        if branches.len() == 2 {
            out.push("fused".into());
        }
        out
    }

    /// Fresh parameters. Each component draws from its own stream of `seed`.
    pub fn init_params<T: Float>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let cfg = self.branch_config();
        let mut store = ParamStore::new();
        for (i, prefix) in self.backbone_prefixes().iter().enumerate() {
            let bb = backbone::init_params::<T, _>(&cfg, &mut rng(i as u64))?;
            store.absorb(prefix, bb);
        }
        let d = cfg.out_dim();
        let mut frng = rng(2);
        match self.strategy() {
            Some(FusionStrategy::CrossAttention | FusionStrategy::DualSwin) => {
                let bound = 1.0 / (d as f64).sqrt();
                for w in ["w_q", "w_k", "w_v"] {
                    store.insert(format!("fusion.{w}"), nn::uniform(&mut frng, &[d, d], bound));
                }
            }
            Some(FusionStrategy::FeatureFusion) => store.insert("fusion.theta", Tensor::zeros(&[1])),
            _ => {}
        }
        init_head(&mut store, &mut rng(3), "head", d, self.num_classes);
        Ok(store)
    }

    /// Replace every backbone in `store` with weights from a 3-channel
    /// backbone archive (widening the stem for channel concat).
    pub fn install_backbone<T: Float>(&self, store: &mut ParamStore<T>, archive: &ParamStore<T>) -> Result<LoadReport> {
        let (bb, report) = backbone::bind_weights(archive, &self.branch_config())?;
        for prefix in self.backbone_prefixes() {
            store.absorb(prefix, bb.clone());
        }
        Ok(report)
    }

    /// Freeze every backbone parameter; returns how many tensors were frozen.
    pub fn freeze_backbones<T: Float>(&self, store: &mut ParamStore<T>) -> usize {
        self.backbone_prefixes().iter().map(|p| store.set_frozen(p, true)).sum()
    }

    /// Learned pre-event weight of feature fusion.
    pub fn alpha<T: Float>(&self, store: &ParamStore<T>) -> Option<f64> {
        (self.strategy() == Some(FusionStrategy::FeatureFusion))
            .then(|| store.tensor("fusion.theta").ok().map(|t| super::sigmoid(t.item().as_f64())))
            .flatten()
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        pre: Option<Var>,
        post: Var,
    ) -> Result<ModelOutput> {
        let cfg = self.branch_config();
        let mut taps = BTreeMap::new();
        let record = |name: &str, out: &backbone::BackboneOutput, taps: &mut BTreeMap<String, Var>| {
            for (s, v) in out.stages.iter().enumerate() {
                taps.insert(format!("{name}.stage{}", s + 1), *v);
            }
            taps.insert(format!("{name}.features"), out.features);
        };
        let need_pre = || Error::Invalid("this model needs a pre-event image".into());
        match self.strategy() {
            None => {
                let out = backbone::forward(&cfg, g, b, "backbone.", post)?;
                record("main", &out, &mut taps);
                let logits = head_forward(g, b, "head", out.features)?;
                Ok(ModelOutput {
                    logits,
                    taps,
                    attention: None,
                    alpha: None,
                })
            }
            Some(FusionStrategy::ChannelConcat) => {
                let pre = pre.ok_or_else(need_pre)?;
                let x = g.concat_last(&[pre, post])?;
                let out = backbone::forward(&cfg, g, b, "backbone.", x)?;
                record("main", &out, &mut taps);
                let logits = head_forward(g, b, "head", out.features)?;
                Ok(ModelOutput {
                    logits,
                    taps,
                    attention: None,
                    alpha: None,
                })
            }
            Some(_) => {
                let pre = pre.ok_or_else(need_pre)?;
                let [pp, qp] = match self.backbone_prefixes() {
                    [one] => [*one, *one],
                    [a, b] => [*a, *b],
                    _ => unreachable!(),
                };
                let fp = backbone::forward(&cfg, g, b, pp, pre)?;
                let fq = backbone::forward(&cfg, g, b, qp, post)?;
                record("pre", &fp, &mut taps);
                record("post", &fq, &mut taps);
                let f = self.fuse_and_classify(g, b, Some(fp.features), fq.features)?;
                if let Some(v) = f.fused {
                    taps.insert("fused".into(), v);
                }
                Ok(ModelOutput {
                    logits: f.logits,
                    taps,
                    attention: f.attention,
                    alpha: f.alpha,
                })
            }
        }
    }

    /// Everything after the backbones, from final feature maps `[B, H, W, D]`.
    pub fn fuse_and_classify<T: Float>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        f_pre: Option<Var>,
        f_post: Var,
    ) -> Result<FusionOutput> {
        let plain = |g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var| -> Result<FusionOutput> {
            Ok(FusionOutput {
                logits: head_forward(g, b, "head", x)?,
                fused: None,
                attention: None,
                alpha: None,
            })
        };
        let Some(strategy) = self.strategy().filter(|s| *s != FusionStrategy::ChannelConcat) else {
            return plain(g, b, f_post);
        };
        let f_pre = f_pre.ok_or_else(|| Error::Invalid("fusion needs pre-event features".into()))?;
        let shape = g.shape(f_post).to_vec();
        if g.shape(f_pre) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "pre features {:?} and post features {shape:?} differ",
                g.shape(f_pre)
            )));
        }
        let (mut attention, mut alpha) = (None, None);
        let fused = match strategy {
            FusionStrategy::FeatureFusion => {
                let theta = b.param(g, "fusion.theta")?;
                let a = g.sigmoid(theta);
                alpha = Some(a);
                g.convex(f_pre, f_post, a)?
            }
            FusionStrategy::SiameseDiff => {
                let d = g.sub(f_pre, f_post)?;
                g.abs(d)
            }
            FusionStrategy::CrossAttention | FusionStrategy::DualSwin => {
                let [bs, h, w, d] = <[usize; 4]>::try_from(shape.as_slice())
                    .map_err(|_| Error::Shape(format!("expected NHWC features, got {shape:?}")))?;
                let tp = g.reshape(f_pre, &[bs, h * w, d])?;
                let tq = g.reshape(f_post, &[bs, h * w, d])?;
                let wq = b.param(g, "fusion.w_q")?;
                let wk = b.param(g, "fusion.w_k")?;
                let wv = b.param(g, "fusion.w_v")?;
                let att = if strategy == FusionStrategy::DualSwin {
                    dual_swin_fuse(g, tp, tq, wq, wk, wv, self.attention_heads)?
                } else {
                    cross_attention(g, tp, tq, wq, wk, wv, self.attention_heads)?
                };
                attention = Some(att.weights);
                g.reshape(att.output, &shape)?
            }
            FusionStrategy::ChannelConcat => unreachable!(),
        };
        Ok(FusionOutput {
            logits: head_forward(g, b, "head", fused)?,
            fused: Some(fused),
            attention,
            alpha,
        })
    }

    /// Inference on a batch of preprocessed images `[B, H, W, 3]`.
    pub fn predict<T: Float>(
        &self,
        store: &ParamStore<T>,
        pre: Option<&Tensor<T>>,
        post: &Tensor<T>,
    ) -> Result<Vec<DamageLogits>> {
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let pre = pre.map(|t| g.constant(t.clone()));
        let post = g.constant(post.clone());
        let out = self.forward(&mut g, &mut b, pre, post)?;
        logits_rows(g.value(out.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Family;

    fn spec(m: DualModel) -> ModelSpec {
        ModelSpec::dual(m, BackboneConfig::mini(m.family()), 3)
    }

    fn images(seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, 32, 32, 3], |_| rand::Rng::random_range(&mut r, -1.0..1.0))
    }

    #[test]
    fn every_model_predicts_distributions() {
        for m in DualModel::ALL {
            let s = spec(m);
            let store = s.init_params::<f64>(1).unwrap();
            let out = s.predict(&store, Some(&images(2)), &images(3)).unwrap();
            assert_eq!(out.len(), 2);
            for d in out {
                assert_eq!(d.probabilities.len(), 3);
                assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert!(s.predict(&store, None, &images(3)).is_err());
        }
        let single = ModelSpec::single(BackboneConfig::mini(Family::Swin), 4);
        let store = single.init_params::<f64>(0).unwrap();
        assert_eq!(single.predict(&store, None, &images(4)).unwrap()[0].probabilities.len(), 4);
    }

    #[test]
    fn layouts_and_taps() {
        let s = spec(DualModel::S2XattnSwin);
        let store = s.init_params::<f32>(0).unwrap();
        assert!(store.contains("pre_backbone.norm.weight") && store.contains("post_backbone.norm.weight"));
        assert_eq!(store.tensor("fusion.w_q").unwrap().shape(), [128, 128]);
        let s3 = spec(DualModel::S3FusionConvnext);
        let st3 = s3.init_params::<f32>(0).unwrap();
        assert!(st3.contains("backbone.stem.conv.weight") && !st3.contains("pre_backbone.norm.weight"));
        assert_eq!(s3.alpha(&st3), Some(0.5));
        let s1 = spec(DualModel::S1Concat);
        let st1 = s1.init_params::<f32>(0).unwrap();
        assert_eq!(st1.tensor("backbone.stem.conv.weight").unwrap().shape(), [96, 16]);
        assert!(s.tap_names().contains(&"fused".to_string()));
        assert_eq!(s1.default_target(), "main.features");
    }

    #[test]
    fn validation() {
        let mut s = spec(DualModel::S3FusionConvnext);
        s.backbone = BackboneConfig::mini(Family::Swin);
        assert!(s.validate().is_err());
        let mut s = spec(DualModel::S5DualSwin);
        s.attention_heads = 3;
        assert!(s.validate().is_err());
        s.attention_heads = 4;
        s.validate().unwrap();
        let mut s = ModelSpec::single(BackboneConfig::mini(Family::Convnext), 5);
        assert!(s.validate().is_err());
        s.num_classes = 3;
        s.validate().unwrap();
    }

    #[test]
    fn installing_and_freezing_backbones() {
        let s = spec(DualModel::S2XattnConvnext);
        let mut store = s.init_params::<f32>(0).unwrap();
        let bb = backbone::init_params::<f32, _>(&s.backbone, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        s.install_backbone(&mut store, &bb).unwrap();
        assert_eq!(store.extract("pre_backbone."), bb);
        assert_eq!(store.extract("post_backbone."), bb);
        let n = s.freeze_backbones(&mut store);
        assert_eq!(n, 2 * bb.len());
        let trainable = store.trainable_names();
        assert!(trainable.iter().all(|t| t.starts_with("fusion.") || t.starts_with("head.")));
        assert_eq!(trainable.len(), 3 + 4);
    }
}
