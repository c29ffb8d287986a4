//! Pixel images, model-input transforms and the synthetic scene generator.

pub mod synthetic;
pub mod transform;

use std::path::Path;

use image::{ColorType, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_pair, SyntheticDatasetSpec, SyntheticPair, SyntheticSceneSpec};
pub use transform::{augment_pair, preprocess, AugmentRecord, CropWindow, TransformConfig};

/// RGB image with interleaved `[height, width, 3]` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PixelImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("zero-sized image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from possibly out-of-range values, clipping to `[0, 1]`.
    pub fn from_clipped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self { data, ..*self }
    }

    pub fn crop(&self, w: CropWindow) -> Result<Self> {
        if w.height == 0 || w.width == 0 || w.top + w.height > self.height || w.left + w.width > self.width {
            return Err(Error::Invalid(format!(
                "crop window {w:?} exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(w.height * w.width * 3);
        for y in w.top..w.top + w.height {
            let o = (y * self.width + w.left) * 3;
            data.extend_from_slice(&self.data[o..o + w.width * 3]);
        }
        Ok(Self {
            height: w.height,
            width: w.width,
            data,
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("consistent buffer")
    }

    /// Decode a 3-channel PNG or JPEG.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()?;
        match img.color() {
            ColorType::Rgb8 | ColorType::Rgb16 | ColorType::Rgb32F => {}
            other => {
                return Err(Error::Invalid(format!(
                    "{}: expected a 3-channel image, found {other:?}",
                    path.display()
                )))
            }
        }
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    /// Side-by-side concatenation of images with equal heights.
    pub fn hconcat(images: &[&PixelImage]) -> Result<Self> {
        let h = images.first().map(|i| i.height).unwrap_or(0);
        if images.iter().any(|i| i.height != h) {
            return Err(Error::Shape("hconcat: heights differ".into()));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for img in images {
                data.extend_from_slice(&img.data[y * img.width * 3..(y + 1) * img.width * 3]);
            }
        }
        Self::new(h, w, data)
    }
}

/// Binary damage-region mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize) {
        self.data[y * self.width + x] = true;
    }

    pub fn fill_rect(&mut self, top: usize, left: usize, bottom: usize, right: usize) {
        for y in top.min(self.height)..bottom.min(self.height) {
            for x in left.min(self.width)..right.min(self.width) {
                self.set(y, x);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("consistent buffer");
        img.save_with_format(path, image::ImageFormat::Png).map_err(Error::from)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .to_luma8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v >= 128).collect(),
        })
    }
}
