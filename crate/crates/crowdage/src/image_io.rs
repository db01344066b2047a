//! PNG conversion between 8-bit RGB files and `[0, 1]` plane tensors.

use std::path::Path;

use crowdage_core::Image;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub fn to_rgb8(img: &Image) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        for c in 0..3 {
            let src = if img.channels == 3 { c } else { 0 };
            let v = img.data[src * plane + i];
            px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

pub fn from_rgb8(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut img = Image::zeros(3, h, w);
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            img.data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    img
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    to_rgb8(img)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads any supported file as RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_rgb8(&dynamic.to_rgb8()))
}

/// Rounds every value to the nearest 8-bit level, as a save/load cycle would.
pub fn quantize(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
