//! PNG in/out. Pixels map to `[0, 1]` floats by dividing by the format's
//! maximum; bytes are treated as linear intensities.

use std::path::Path;

use aberration_core::Image;
use anyhow::{bail, Context, Result};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
pub enum BitDepth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

pub struct Loaded {
    pub image: Image,
    pub depth: BitDepth,
}

/// Loads a PNG as `channels` planes (1 = luma, 3 = RGB).
pub fn load_png(path: &Path, channels: usize) -> Result<Loaded> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let depth = match &img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => BitDepth::Sixteen,
        _ => BitDepth::Eight,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = match (channels, depth) {
        (1, BitDepth::Eight) => {
            let buf = img.to_luma8();
            Array3::from_shape_fn((1, h, w), |(_, r, c)| buf.get_pixel(c as u32, r as u32)[0] as f32 / 255.0)
        }
        (1, BitDepth::Sixteen) => {
            let buf = img.to_luma16();
            Array3::from_shape_fn((1, h, w), |(_, r, c)| buf.get_pixel(c as u32, r as u32)[0] as f32 / 65535.0)
        }
        (3, BitDepth::Eight) => {
            let buf = img.to_rgb8();
            Array3::from_shape_fn((3, h, w), |(ch, r, c)| buf.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0)
        }
        (3, BitDepth::Sixteen) => {
            let buf = img.to_rgb16();
            Array3::from_shape_fn((3, h, w), |(ch, r, c)| buf.get_pixel(c as u32, r as u32)[ch] as f32 / 65535.0)
        }
        (n, _) => bail!("unsupported channel count {n}"),
    };
    Ok(Loaded { image, depth })
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn save_png(path: &Path, image: &Image, depth: BitDepth) -> Result<()> {
    let (channels, h, w) = image.dim();
    let (w32, h32) = (w as u32, h as u32);
    let result = match (channels, depth) {
        (1, BitDepth::Eight) => ImageBuffer::<Luma<u8>, _>::from_fn(w32, h32, |c, r| {
            Luma([quantize(image[[0, r as usize, c as usize]], 255.0) as u8])
        })
        .save(path),
        (1, BitDepth::Sixteen) => ImageBuffer::<Luma<u16>, _>::from_fn(w32, h32, |c, r| {
            Luma([quantize(image[[0, r as usize, c as usize]], 65535.0) as u16])
        })
        .save(path),
        (3, BitDepth::Eight) => ImageBuffer::<Rgb<u8>, _>::from_fn(w32, h32, |c, r| {
            let px = |ch| quantize(image[[ch, r as usize, c as usize]], 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        })
        .save(path),
        (3, BitDepth::Sixteen) => ImageBuffer::<Rgb<u16>, _>::from_fn(w32, h32, |c, r| {
            let px = |ch| quantize(image[[ch, r as usize, c as usize]], 65535.0) as u16;
            Rgb([px(0), px(1), px(2)])
        })
        .save(path),
        (n, _) => bail!("cannot write a {n}-channel image"),
    };
    result.with_context(|| format!("writing {}", path.display()))
}
