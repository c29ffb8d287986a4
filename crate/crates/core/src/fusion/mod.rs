//! Dual-channel fusion strategies and the classifier head.
//!
//! Five strategies combine a pre-event and a post-event image:
//!
//! | strategy | where | operator |
//! |---|---|---|
//! | channel concat | input | stack RGB pre and post into 6 channels |
//! | cross-attention | final features | pre tokens query post tokens |
//! | feature fusion | final features | `alpha * pre + (1 - alpha) * post`, `alpha = sigmoid(theta)` |
//! | siamese difference | final features | `abs(pre - post)` from one shared encoder |
//! | dual Swin | final features | cross-attention plus a residual from the pre tokens |
//!
//! Seven named models realize these on the two backbone families.

pub mod attention;
pub mod head;
pub mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::convex_combination;
use crate::backbone::Family;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use attention::{cross_attention, dual_swin_fuse, CrossAttentionOutput};
pub use head::{classify, DamageLogits};
pub use model::{Architecture, ModelOutput, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    ChannelConcat,
    CrossAttention,
    FeatureFusion,
    SiameseDiff,
    DualSwin,
}

impl FusionStrategy {
    pub fn supports(self, family: Family) -> bool {
        match self {
            Self::ChannelConcat | Self::CrossAttention => true,
            Self::FeatureFusion | Self::SiameseDiff => family == Family::Convnext,
            Self::DualSwin => family == Family::Swin,
        }
    }
}

/// The seven dual-channel models, by configuration name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualModel {
    S1Concat,
    BaselineConcatSwin,
    S2XattnConvnext,
    S2XattnSwin,
    S3FusionConvnext,
    S4SiameseConvnext,
    S5DualSwin,
}

impl DualModel {
    pub const ALL: [DualModel; 7] = [
        Self::S1Concat,
        Self::BaselineConcatSwin,
        Self::S2XattnConvnext,
        Self::S2XattnSwin,
        Self::S5DualSwin,
        Self::S3FusionConvnext,
        Self::S4SiameseConvnext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::S1Concat => "s1_concat",
            Self::BaselineConcatSwin => "baseline_concat_swin",
            Self::S2XattnConvnext => "s2_xattn_convnext",
            Self::S2XattnSwin => "s2_xattn_swin",
            Self::S3FusionConvnext => "s3_fusion_convnext",
            Self::S4SiameseConvnext => "s4_siamese_convnext",
            Self::S5DualSwin => "s5_dual_swin",
        }
    }

    /// Row label used in rendered reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::S1Concat => "Baseline-ConvNext",
            Self::BaselineConcatSwin => "Baseline-Swin Transformer",
            Self::S2XattnConvnext => "Dual-ConvNext + Cross-Attention",
            Self::S2XattnSwin => "Dual-Swin Transformer + Cross-Attention",
            Self::S5DualSwin => "Dual-Swin Transformer",
            Self::S3FusionConvnext => "Feature-fusion ConvNext",
            Self::S4SiameseConvnext => "Siamese ConvNext",
        }
    }

    pub fn strategy(self) -> FusionStrategy {
        match self {
            Self::S1Concat | Self::BaselineConcatSwin => FusionStrategy::ChannelConcat,
            Self::S2XattnConvnext | Self::S2XattnSwin => FusionStrategy::CrossAttention,
            Self::S3FusionConvnext => FusionStrategy::FeatureFusion,
            Self::S4SiameseConvnext => FusionStrategy::SiameseDiff,
            Self::S5DualSwin => FusionStrategy::DualSwin,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Self::S1Concat | Self::S2XattnConvnext | Self::S3FusionConvnext | Self::S4SiameseConvnext => {
                Family::Convnext
            }
            Self::BaselineConcatSwin | Self::S2XattnSwin | Self::S5DualSwin => Family::Swin,
        }
    }
}

impl fmt::Display for DualModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DualModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown model `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Stack `[..., 3]` pre and post images into `[..., 6]`: pre in channels 0-2.
pub fn fuse_channel_concat<T: Float>(pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("channel concat", pre.shape(), post.shape())?;
    let s = pre.shape();
    if s.last() != Some(&3) {
        return Err(Error::Shape(format!("channel concat: expected 3 channels, got {s:?}")));
    }
    let mut out = Vec::with_capacity(pre.numel() * 2);
    for (a, b) in pre.data().chunks(3).zip(post.data().chunks(3)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    let mut shape = s.to_vec();
    *shape.last_mut().unwrap() = 6;
    Tensor::from_vec(&shape, out)
}

/// `alpha * pre + (1 - alpha) * post`, elementwise.
pub fn feature_fusion<T: Float>(pre: &Tensor<T>, post: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    check_same("feature fusion", pre.shape(), post.shape())?;
    Ok(pre.zip_map(post, |a, b| convex_combination(a, b, alpha)))
}

/// `abs(pre - post)`, elementwise.
pub fn siamese_diff<T: Float>(pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("siamese difference", pre.shape(), post.shape())?;
    Ok(pre.zip_map(post, |a, b| (a - b).abs()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
