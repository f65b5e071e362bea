use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use super::{Mask, RasterImage};
use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB8 PNG (single-channel rasters are replicated to gray RGB).
pub fn write_png(path: impl AsRef<Path>, img: &RasterImage) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut bytes = Vec::with_capacity(h * w * 3);
    for px in img.data().chunks_exact(c) {
        match c {
            3 => bytes.extend(px.iter().map(|&v| quantize(v))),
            1 => bytes.extend([quantize(px[0]); 3]),
            _ => return Err(Error::dim("write_png", format!("{c} channels"))),
        }
    }
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::dim("write_png", "buffer size"))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    RasterImage::new(h as usize, w as usize, 3, data)
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let bytes = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .ok_or_else(|| Error::dim("write_mask_png", "buffer size"))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::new(h as usize, w as usize, img.into_raw().into_iter().map(|b| b >= 128).collect())
}

/// SHA-256 (hex) of an image's 8-bit quantized content, prefixed by its
/// dimensions. Stable across PNG encoder settings.
pub fn pixel_digest(img: &RasterImage) -> String {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    h.update((img.channels() as u64).to_le_bytes());
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    h.update(&bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
