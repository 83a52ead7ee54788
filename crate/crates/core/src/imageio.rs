//! PNG import/export. Images are linear in memory and 8-bit sRGB on disk.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::types::ImageTensor;

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn to_rgb8(img: &ImageTensor) -> RgbImage {
    let w = img.width();
    RgbImage::from_fn(w as u32, img.height() as u32, |x, y| {
        let p = img.get(x as usize, y as usize);
        Rgb(p.map(|c| (linear_to_srgb(c) * 255.0).round() as u8))
    })
}

pub fn from_rgb8(rgb: &RgbImage) -> ImageTensor {
    let lut: Vec<f64> = (0..=255u8).map(|b| srgb_to_linear(b as f64 / 255.0)).collect();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().flat_map(|p| p.0.map(|b| lut[b as usize])).collect();
    ImageTensor::new(w as usize, h as usize, pixels).expect("decoded buffer matches its dimensions")
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb8(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}
