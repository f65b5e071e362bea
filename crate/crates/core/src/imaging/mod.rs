//! Rasters, the bicubic degradation model, patch tokenization and the
//! full-reference quality metrics.

mod metrics;
mod patch;
mod png;
mod resize;

pub use metrics::{masked_mse, mse, psnr, psnr_from_mse, ssim, SSIM_WINDOW};
pub use patch::{patchify, patchify_tensor, unpatchify, unpatchify_tensor, PatchGrid};
pub use png::{pixel_digest, read_mask_png, read_png, write_mask_png, write_png};
pub use resize::{bicubic_resize, cubic_weight, CUBIC_A};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved `H x W x C` float raster. Nominal range is `[0, 1]`;
/// resampling may overshoot until [`RasterImage::clamp01`] is applied, and
/// PNG export always clamps.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(
                "raster",
                format!("{height}x{width}x{channels} has an empty side"),
            ));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "raster",
                format!("{height}x{width}x{channels} vs {} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "raster" });
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn expect_same_shape(&self, other: &RasterImage, op: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.height, self.width, self.channels, other.height, other.width, other.channels
                ),
            ));
        }
        Ok(())
    }

    pub fn clamp01(&self) -> RasterImage {
        RasterImage {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<RasterImage> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `[H, W, C]` tensor view of the same values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width, self.channels], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape()[..] {
            [h, w, c] => Self::new(h, w, c, t.to_vec()),
            _ => Err(Error::dim("raster", format!("expected [H, W, C], got {:?}", t.shape()))),
        }
    }

    /// Places images side by side with `gap` pixels of `background`.
    pub fn hstack(images: &[&RasterImage], gap: usize, background: f64) -> Result<RasterImage> {
        let first = images
            .first()
            .ok_or_else(|| Error::dim("hstack", "no images"))?;
        let (h, c) = (first.height, first.channels);
        if images.iter().any(|im| im.height != h || im.channels != c) {
            return Err(Error::dim("hstack", "heights or channel counts differ"));
        }
        let w = images.iter().map(|im| im.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = vec![background; h * w * c];
        let mut x0 = 0;
        for im in images {
            for y in 0..h {
                let src = &im.data[y * im.width * c..(y + 1) * im.width * c];
                out[(y * w + x0) * c..(y * w + x0 + im.width) * c].copy_from_slice(src);
            }
            x0 += im.width + gap;
        }
        RasterImage::new(h, w, c, out)
    }

    /// Stacks images vertically with `gap` rows of `background`.
    pub fn vstack(images: &[&RasterImage], gap: usize, background: f64) -> Result<RasterImage> {
        let first = images
            .first()
            .ok_or_else(|| Error::dim("vstack", "no images"))?;
        let (w, c) = (first.width, first.channels);
        if images.iter().any(|im| im.width != w || im.channels != c) {
            return Err(Error::dim("vstack", "widths or channel counts differ"));
        }
        let mut out = Vec::new();
        for (i, im) in images.iter().enumerate() {
            if i > 0 {
                out.extend(std::iter::repeat_n(background, gap * w * c));
            }
            out.extend_from_slice(&im.data);
        }
        let h = out.len() / (w * c);
        RasterImage::new(h, w, c, out)
    }
}

/// Binary per-pixel map; `true` marks changed land cover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("mask", format!("{height}x{width} vs {} bits", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn to_image(&self) -> RasterImage {
        RasterImage {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
