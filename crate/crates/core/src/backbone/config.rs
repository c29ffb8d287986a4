use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Convnext,
    Swin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Mini,
}

macro_rules! str_enum {
    ($ty:ident { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " `{}`"), other))),
                }
            }
        }
    };
}

str_enum!(Family { Convnext => "convnext", Swin => "swin" });
str_enum!(Variant { Tiny => "tiny", Small => "small", Base => "base", Mini => "mini" });

/// Geometry of a four-stage hierarchical backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    pub variant: Variant,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    /// Stem patch size (both families).
    pub patch_size: usize,
    /// Attention window in tokens (Swin).
    pub window_size: usize,
    /// Depthwise kernel (ConvNeXt).
    pub kernel_size: usize,
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
    pub input_channels: usize,
    /// Initial value of the per-channel residual scale (ConvNeXt).
    pub layer_scale_init: f64,
}

impl BackboneConfig {
    pub fn new(family: Family, variant: Variant) -> Self {
        use Family::*;
        use Variant::*;
        let (depths, dims, heads) = match (family, variant) {
            (Convnext, Tiny) => ([3, 3, 9, 3], [96, 192, 384, 768], [3, 6, 12, 24]),
            (Convnext, Small) => ([3, 3, 27, 3], [96, 192, 384, 768], [3, 6, 12, 24]),
            (Convnext, Base) => ([3, 3, 27, 3], [128, 256, 512, 1024], [4, 8, 16, 32]),
            (Swin, Tiny) => ([2, 2, 6, 2], [96, 192, 384, 768], [3, 6, 12, 24]),
            (Swin, Small) => ([2, 2, 18, 2], [96, 192, 384, 768], [3, 6, 12, 24]),
            (Swin, Base) => ([2, 2, 18, 2], [128, 256, 512, 1024], [4, 8, 16, 32]),
            (_, Mini) => ([2, 2, 2, 2], [16, 32, 64, 128], [2, 2, 2, 2]),
        };
        Self {
            family,
            variant,
            stage_depths: depths,
            stage_dims: dims,
            patch_size: 4,
            window_size: 7,
            kernel_size: 7,
            heads,
            mlp_ratio: 4,
            input_channels: 3,
            layer_scale_init: if variant == Mini { 1.0 } else { 1e-6 },
        }
    }

    pub fn mini(family: Family) -> Self {
        Self::new(family, Variant::Mini)
    }

    pub fn with_input_channels(mut self, c: usize) -> Self {
        self.input_channels = c;
        self
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dims[3]
    }

    /// Total spatial reduction from input pixels to final-stage cells.
    pub fn reduction(&self) -> usize {
        self.patch_size * 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.input_channels, 3 | 6) {
            return bad(format!("input_channels must be 3 or 6, got {}", self.input_channels));
        }
        if self.stage_depths.iter().any(|&d| d == 0) || self.stage_dims.iter().any(|&d| d == 0) {
            return bad("stage depths and dims must be positive".into());
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad("patch_size and mlp_ratio must be positive".into());
        }
        match self.family {
            Family::Convnext => {
                if self.kernel_size % 2 == 0 {
                    return bad(format!("kernel_size {} must be odd", self.kernel_size));
                }
            }
            Family::Swin => {
                if self.window_size == 0 {
                    return bad("window_size must be positive".into());
                }
                for (d, h) in self.stage_dims.iter().zip(&self.heads) {
                    if *h == 0 || d % h != 0 {
                        return bad(format!("stage dim {d} not divisible by {h} heads"));
                    }
                }
            }
        }
        Ok(())
    }
}
