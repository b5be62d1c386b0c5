//! Image decoding, normalization, and the seeded augmentation pipeline.
//!
//! Tensors are channels x height x width f32 arrays with values in [-1, 1];
//! 8-bit grey level p maps to 2*p/255 - 1.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating-point image, `[3, H, W]`, values in [-1, 1].
pub type ImageTensor = Array3<f32>;

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Decode, check for exactly three 8-bit channels, bilinear-resize, and
/// normalize to [-1, 1].
pub fn preprocess(image: &DynamicImage, size: (usize, usize)) -> Result<ImageTensor> {
    let channels = image.color().channel_count();
    if channels != 3 {
        return Err(Error::Invalid(format!(
            "expected a 3-channel image, got {channels} channels"
        )));
    }
    let rgb = image.to_rgb8();
    let resized = if (rgb.height() as usize, rgb.width() as usize) == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size.1 as u32, size.0 as u32, FilterType::Triangle)
    };
    Ok(tensor_from_rgb(&resized))
}

pub fn tensor_from_rgb(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        2.0 * rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0 - 1.0
    })
}

/// Back to 8-bit RGB; values are clamped then rounded.
pub fn denormalize(tensor: &ImageTensor) -> RgbImage {
    let (_, h, w) = tensor.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = (tensor[(c, y, x)].clamp(-1.0, 1.0) + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            };
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    img
}

pub fn save_png(tensor: &ImageTensor, path: &Path) -> Result<()> {
    denormalize(tensor).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_tensor(path: &Path, size: (usize, usize)) -> Result<ImageTensor> {
    preprocess(&load_image(path)?, size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R90,
    R180,
    R270,
}

/// The concrete transform subset a seed selects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: Option<Rotation>,
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
}

impl AugmentOps {
    pub fn is_identity(&self) -> bool {
        !self.hflip
            && !self.vflip
            && self.rotate.is_none()
            && self.brightness.is_none()
            && self.contrast.is_none()
    }
}

/// Draw the transform subset for a seed. Each of the five candidate
/// transforms is included with probability 1/2; quarter-turn rotations are
/// only offered to square tensors (they would change the shape otherwise).
pub fn augment_ops(seed: u64, shape: (usize, usize)) -> AugmentOps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let square = shape.0 == shape.1;
    let rotate = if rng.random_bool(0.5) {
        Some(match rng.random_range(0..3u8) {
            0 if square => Rotation::R90,
            2 if square => Rotation::R270,
            _ => Rotation::R180,
        })
    } else {
        None
    };
    let brightness = rng
        .random_bool(0.5)
        .then(|| rng.random_range(-0.1f32..=0.1));
    let contrast = rng.random_bool(0.5).then(|| rng.random_range(0.9f32..=1.1));
    AugmentOps {
        hflip,
        vflip,
        rotate,
        brightness,
        contrast,
    }
}

pub fn hflip(t: &ImageTensor) -> ImageTensor {
    let (c, h, w) = t.dim();
    Array3::from_shape_fn((c, h, w), |(c, y, x)| t[(c, y, w - 1 - x)])
}

pub fn vflip(t: &ImageTensor) -> ImageTensor {
    let (c, h, w) = t.dim();
    Array3::from_shape_fn((c, h, w), |(c, y, x)| t[(c, h - 1 - y, x)])
}

pub fn rotate(t: &ImageTensor, r: Rotation) -> ImageTensor {
    let (c, h, w) = t.dim();
    match r {
        // Quarter turns are only valid for square tensors.
        Rotation::R90 => Array3::from_shape_fn((c, w, h), |(c, y, x)| t[(c, h - 1 - x, y)]),
        Rotation::R180 => {
            Array3::from_shape_fn((c, h, w), |(c, y, x)| t[(c, h - 1 - y, w - 1 - x)])
        }
        Rotation::R270 => Array3::from_shape_fn((c, w, h), |(c, y, x)| t[(c, x, w - 1 - y)]),
    }
}

/// Scale contrast about the global mean of the tensor.
pub fn scale_contrast(t: &ImageTensor, scale: f32) -> ImageTensor {
    let mean = t.iter().sum::<f32>() / t.len() as f32;
    t.mapv(|v| mean + (v - mean) * scale)
}

pub fn apply_augment(t: &ImageTensor, ops: &AugmentOps) -> ImageTensor {
    let mut out = t.clone();
    if ops.hflip {
        out = hflip(&out);
    }
    if ops.vflip {
        out = vflip(&out);
    }
    if let Some(r) = ops.rotate {
        out = rotate(&out, r);
    }
    if let Some(shift) = ops.brightness {
        out.mapv_inplace(|v| v + shift);
    }
    if let Some(scale) = ops.contrast {
        out = scale_contrast(&out, scale);
    }
    out.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    out
}

/// Seeded random augmentation: identical seed, identical output.
pub fn augment(t: &ImageTensor, seed: u64) -> ImageTensor {
    let (_, h, w) = t.dim();
    apply_augment(t, &augment_ops(seed, (h, w)))
}
