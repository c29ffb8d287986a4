//! Grad-CAM heatmaps, overlays and their file formats.
//!
//! The heatmap of a layer with activations `A[h, w, c]` and target-score
//! gradients `G[h, w, c]` is `ReLU(sum_c w_c A[.., c])` with
//! `w_c = mean_hw G[.., c]`, divided by its maximum when that is positive.
//!
//! Raw heatmaps are written as grayscale Portable Float Maps (`Pf`, little
//! endian, rows stored bottom to top).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{Mask, PixelImage};
use crate::error::{Error, Result};
use crate::fusion::head::argmax;
use crate::fusion::ModelSpec;
use crate::nn::{Binder, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetClass {
    #[default]
    Predicted,
    Index(usize),
}

impl fmt::Display for TargetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Predicted => f.write_str("predicted"),
            Self::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for TargetClass {
    type Err = Error;
    /// `predicted`, a class index, or a class name.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("predicted") {
            return Ok(Self::Predicted);
        }
        Ok(Self::Index(s.parse::<crate::label::DamageLabel>()?.index()))
    }
}

impl Serialize for TargetClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TargetClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    pub fn apply(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Self::Gray => [v; 3],
            Self::Jet => {
                let f = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
                [f(3.0), f(2.0), f(1.0)]
            }
        }
    }
}

impl FromStr for Colormap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jet" => Ok(Self::Jet),
            "gray" | "grey" => Ok(Self::Gray),
            other => Err(Error::Invalid(format!("unknown colormap `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    /// Tap name such as `post.features` or `main.stage3`; the model's default when absent.
    pub target_layer: Option<String>,
    pub target_class: TargetClass,
    /// Overlay opacity in `[0, 1]`.
    pub alpha: f32,
    pub colormap: Colormap,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            target_layer: None,
            target_class: TargetClass::Predicted,
            alpha: 0.5,
            colormap: Colormap::Jet,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative; maximum is 0 or 1.
    pub values: Vec<f32>,
    pub layer: String,
    pub class: usize,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Bilinear resampling to `h x w` (half-pixel centers).
    pub fn upsample(&self, h: usize, w: usize) -> Vec<f32> {
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                    let i0 = src.floor() as usize;
                    (i0, (i0 + 1).min(inp - 1), (src - i0 as f64) as f32)
                })
                .collect()
        };
        let (ys, xs) = (axis(h, self.height), axis(w, self.width));
        let mut out = Vec::with_capacity(h * w);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) + (self.get(y0, x1) - self.get(y0, x0)) * fx;
                let bot = self.get(y1, x0) + (self.get(y1, x1) - self.get(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
        out
    }

    /// Mean upsampled heat inside and outside `mask`.
    pub fn mask_means(&self, mask: &Mask) -> Result<(f64, f64)> {
        if mask.count() == 0 || mask.count() == mask.data.len() {
            return Err(Error::Invalid("mask must have pixels both inside and outside".into()));
        }
        let up = self.upsample(mask.height, mask.width);
        let (mut sin, mut sout) = (0.0, 0.0);
        for (&v, &m) in up.iter().zip(&mask.data) {
            if m {
                sin += v as f64;
            } else {
                sout += v as f64;
            }
        }
        let n_in = mask.count() as f64;
        Ok((sin / n_in, sout / (mask.data.len() as f64 - n_in)))
    }
}

/// Grad-CAM map from one sample's activations and gradients, both `[H, W, C]`.
pub fn cam_from<T: Float>(activations: &Tensor<T>, gradients: &Tensor<T>) -> Result<Vec<f32>> {
    let s = activations.shape();
    if s.len() != 3 || gradients.shape() != s {
        return Err(Error::Shape(format!(
            "grad-cam needs matching [H, W, C] activations and gradients, got {s:?} and {:?}",
            gradients.shape()
        )));
    }
    let (hw, c) = (s[0] * s[1], s[2]);
    let mut weights = vec![0.0f64; c];
    for px in gradients.data().chunks(c) {
        for (w, g) in weights.iter_mut().zip(px) {
            *w += g.as_f64();
        }
    }
    for w in &mut weights {
        *w /= hw as f64;
    }
    let mut map: Vec<f64> = activations
        .data()
        .chunks(c)
        .map(|px| px.iter().zip(&weights).map(|(a, w)| a.as_f64() * w).sum::<f64>().max(0.0))
        .collect();
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut map {
            *v /= max;
        }
    }
    Ok(map.into_iter().map(|v| v as f32).collect())
}

/// Grad-CAM of one sample. Images are preprocessed `[S, S, 3]` tensors;
/// `pre` is required by dual-channel models.
pub fn grad_cam<T: Float>(
    spec: &ModelSpec,
    store: &ParamStore<T>,
    pre: Option<&Tensor<T>>,
    post: &Tensor<T>,
    cfg: &HeatmapConfig,
) -> Result<Heatmap> {
    let layer = cfg.target_layer.clone().unwrap_or_else(|| spec.default_target().to_string());
    let batch = |t: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    // Inputs are leaves so taps receive gradients even when every parameter is frozen.
    let pre = match pre {
        Some(t) => Some(g.leaf(batch(t)?, true)),
        None => None,
    };
    let post = g.leaf(batch(post)?, true);
    let out = spec.forward(&mut g, &mut b, pre, post)?;
    let Some(&tap) = out.taps.get(&layer) else {
        return Err(Error::Invalid(format!(
            "layer `{layer}` not found; available: {}",
            out.taps.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    };
    let logits: Vec<f64> = g.value(out.logits).data().iter().map(|v| v.as_f64()).collect();
    let class = match cfg.target_class {
        TargetClass::Predicted => argmax(&logits),
        TargetClass::Index(k) if k < logits.len() => k,
        TargetClass::Index(k) => {
            return Err(Error::Invalid(format!("class {k} outside {} outputs", logits.len())));
        }
    };
    let score = g.pick_sum(out.logits, &[class])?;
    let grads = g.backward(score)?;
    let act = g.value(tap);
    let s = act.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("layer `{layer}` has shape {s:?}, expected [1, H, W, C]")));
    }
    let inner = act.clone().reshape(&s[1..])?;
    let grad = match grads.get(tap) {
        Some(gr) => gr.clone().reshape(&s[1..])?,
        None => Tensor::zeros(&s[1..]),
    };
    Ok(Heatmap {
        height: s[1],
        width: s[2],
        values: cam_from(&inner, &grad)?,
        layer,
        class,
    })
}

/// `(1 - alpha) * image + alpha * colormap(heatmap)`, with the heatmap
/// resampled to the image size.
pub fn overlay(heatmap: &Heatmap, image: &PixelImage, cfg: &HeatmapConfig) -> Result<PixelImage> {
    let (h, w) = (image.height(), image.width());
    let up = heatmap.upsample(h, w);
    let a = cfg.alpha.clamp(0.0, 1.0);
    let mut data = Vec::with_capacity(h * w * 3);
    for (px, &v) in image.data().chunks(3).zip(&up) {
        let c = cfg.colormap.apply(v);
        for k in 0..3 {
            data.push(if a == 0.0 {
                px[k]
            } else if a == 1.0 {
                c[k]
            } else {
                (1.0 - a) * px[k] + a * c[k]
            });
        }
    }
    PixelImage::from_clipped(h, w, data)
}

pub fn write_pfm<W: Write>(mut w: W, heatmap: &Heatmap) -> Result<()> {
    let err = |e| Error::io("<pfm>", e);
    write!(w, "Pf\n{} {}\n-1.0\n", heatmap.width, heatmap.height).map_err(err)?;
    for y in (0..heatmap.height).rev() {
        for x in 0..heatmap.width {
            w.write_all(&heatmap.get(y, x).to_le_bytes()).map_err(err)?;
        }
    }
    Ok(())
}

/// Read a grayscale PFM into `(height, width, row-major values)`.
pub fn read_pfm<R: BufRead>(mut r: R) -> Result<(usize, usize, Vec<f32>)> {
    let err = |e| Error::io("<pfm>", e);
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(err)?;
        Ok(line.trim().to_string())
    };
    if next(&mut r)? != "Pf" {
        return Err(Error::Invalid("not a grayscale PFM".into()));
    }
    let dims = next(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height))) = (it.next(), it.next()) else {
        return Err(Error::Invalid(format!("bad PFM dimensions `{dims}`")));
    };
    let scale: f32 = next(&mut r)?
        .parse()
        .map_err(|_| Error::Invalid("bad PFM scale".into()))?;
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes).map_err(err)?;
    let decode = |b: &[u8]| {
        let a = [b[0], b[1], b[2], b[3]];
        if scale < 0.0 {
            f32::from_le_bytes(a)
        } else {
            f32::from_be_bytes(a)
        }
    };
    let mut values = vec![0.0; width * height];
    for (i, b) in bytes.chunks(4).enumerate() {
        let (row, x) = (i / width, i % width);
        values[(height - 1 - row) * width + x] = decode(b);
    }
    Ok((height, width, values))
}

/// File stem `<pair_id>_<model>_<class>`.
pub fn export_stem(pair_id: &str, model: &str, class: &str) -> String {
    format!("{pair_id}_{model}_{class}")
}

/// Write the pre | post | overlay triptych PNG and the raw heatmap PFM.
pub fn export(
    dir: impl AsRef<Path>,
    stem: &str,
    pre: &PixelImage,
    post: &PixelImage,
    heatmap: &Heatmap,
    cfg: &HeatmapConfig,
) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let over = overlay(heatmap, post, cfg)?;
    let png = dir.join(format!("{stem}.png"));
    PixelImage::hconcat(&[pre, post, &over])?.save_png(&png)?;
    let pfm = dir.join(format!("{stem}.pfm"));
    let f = std::fs::File::create(&pfm).map_err(|e| Error::io(&pfm, e))?;
    write_pfm(std::io::BufWriter::new(f), heatmap)?;
    Ok((png, pfm))
}
