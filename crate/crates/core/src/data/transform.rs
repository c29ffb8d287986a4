//! Resize, normalization and paired augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PixelImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub target_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub interpolation: Interpolation,
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f32; 2],
    pub flip_probability: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            interpolation: Interpolation::Bilinear,
            crop_scale: [0.8, 1.0],
            flip_probability: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
        }
    }
}

impl TransformConfig {
    /// Augmentation that leaves images untouched.
    pub fn without_augmentation(mut self) -> Self {
        self.crop_scale = [1.0, 1.0];
        self.flip_probability = 0.0;
        self.brightness = 0.0;
        self.contrast = 0.0;
        self.saturation = 0.0;
        self
    }

    pub fn augments(&self) -> bool {
        self.crop_scale != [1.0, 1.0]
            || self.flip_probability > 0.0
            || self.brightness > 0.0
            || self.contrast > 0.0
            || self.saturation > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.target_size == 0 {
            return bad("target_size must be positive".into());
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("std {:?} must be positive", self.std));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip_probability {} outside [0, 1]", self.flip_probability));
        }
        for (name, v) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} jitter {v} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &PixelImage, out_h: usize, out_w: usize) -> Result<PixelImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize target must be non-empty".into()));
    }
    if out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, img.height());
    let xs = axis(out_w, img.width());
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                data.push((top + (bot - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    PixelImage::new(out_h, out_w, data)
}

/// Resize to `target_size` square and normalize per channel.
///
/// Output layout is `[height, width, 3]` (channels last).
pub fn preprocess(img: &PixelImage, cfg: &TransformConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let s = cfg.target_size;
    let r = resize_bilinear(img, s, s)?;
    let data = r
        .data()
        .chunks(3)
        .flat_map(|p| (0..3).map(move |c| (p[c] - cfg.mean[c]) / cfg.std[c]))
        .collect();
    Tensor::from_vec(&[s, s, 3], data)
}

/// Inverse of the normalization step.
pub fn denormalize(t: &Tensor<f32>, cfg: &TransformConfig) -> Vec<f32> {
    t.data()
        .chunks(3)
        .flat_map(|p| (0..3).map(move |c| p[c] * cfg.std[c] + cfg.mean[c]))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    fn draw(rng: &mut ChaCha8Rng, cfg: &TransformConfig) -> Self {
        let mut factor = |s: f32| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
        Jitter {
            brightness: factor(cfg.brightness),
            contrast: factor(cfg.contrast),
            saturation: factor(cfg.saturation),
        }
    }

    pub fn apply(&self, img: &PixelImage) -> PixelImage {
        let mut data = img.data().to_vec();
        if self.brightness != 1.0 {
            data.iter_mut().for_each(|v| *v *= self.brightness);
        }
        let gray = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        if self.contrast != 1.0 {
            let m = data.chunks(3).map(gray).sum::<f32>() / (data.len() / 3) as f32;
            data.iter_mut().for_each(|v| *v = (*v - m) * self.contrast + m);
        }
        if self.saturation != 1.0 {
            for p in data.chunks_mut(3) {
                let g = gray(p);
                p.iter_mut().for_each(|v| *v = g + (*v - g) * self.saturation);
            }
        }
        PixelImage::from_clipped(img.height(), img.width(), data).expect("same geometry")
    }
}

/// Parameters drawn by [`augment_pair`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub crop: CropWindow,
    pub flipped: bool,
    pub jitter_pre: Jitter,
    pub jitter_post: Jitter,
}

/// Shared crop and flip, independent photometric jitter.
pub fn augment_pair(
    pre: &PixelImage,
    post: &PixelImage,
    cfg: &TransformConfig,
    seed: u64,
) -> Result<(PixelImage, PixelImage, AugmentRecord)> {
    if (pre.height(), pre.width()) != (post.height(), post.width()) {
        return Err(Error::Shape(format!(
            "pair dimensions differ: {}x{} vs {}x{}",
            pre.height(),
            pre.width(),
            post.height(),
            post.width()
        )));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (pre.height(), pre.width());
    let [lo, hi] = cfg.crop_scale;
    let area = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = area.sqrt();
    let ch = ((h as f32 * side).round() as usize).clamp(1, h);
    let cw = ((w as f32 * side).round() as usize).clamp(1, w);
    let top = if ch < h { rng.random_range(0..=h - ch) } else { 0 };
    let left = if cw < w { rng.random_range(0..=w - cw) } else { 0 };
    let crop = CropWindow {
        top,
        left,
        height: ch,
        width: cw,
    };
    let flipped = cfg.flip_probability > 0.0 && rng.random::<f32>() < cfg.flip_probability;
    let jitter_pre = Jitter::draw(&mut rng, cfg);
    let jitter_post = Jitter::draw(&mut rng, cfg);
    let geometric = |img: &PixelImage| -> Result<PixelImage> {
        let c = img.crop(crop)?;
        Ok(if flipped { c.flip_horizontal() } else { c })
    };
    let a = jitter_pre.apply(&geometric(pre)?);
    let b = jitter_post.apply(&geometric(post)?);
    Ok((
        a,
        b,
        AugmentRecord {
            crop,
            flipped,
            jitter_pre,
            jitter_post,
        },
    ))
}
