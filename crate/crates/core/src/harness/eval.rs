//! Sampling held-out scenes and scoring them against HR.
//!
//! Metrics CSV header:
//! `method,image,psnr,ssim,psnr_unchanged,psnr_changed,mse,mse_unchanged,mse_changed,changed_fraction`.
//! One row per image and method, then a `mean` row per method. Masked
//! columns are empty when the region has no pixels.

use std::time::Instant;

use rayon::prelude::*;

use super::data::{from_model_space, reference_input, to_model_space, Dataset, DatasetItem, RefMode};
use crate::error::Result;
use crate::flow::{euler_sample_observed, SamplerConfig, StepRecord, VelocityModel};
use crate::imaging::{masked_mse, mse, psnr_from_mse, ssim, Mask, RasterImage};
use crate::rng::SeededRng;

/// Name of the model-free bicubic-upsampling row.
pub const BASELINE: &str = "bicubic";

pub const METRICS_HEADER: &str =
    "method,image,psnr,ssim,psnr_unchanged,psnr_changed,mse,mse_unchanged,mse_changed,changed_fraction";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_unchanged: Option<f64>,
    pub psnr_changed: Option<f64>,
    pub mse: f64,
    pub mse_unchanged: Option<f64>,
    pub mse_changed: Option<f64>,
    /// Fraction of pixels marked changed.
    pub changed_fraction: f64,
}

impl ImageMetrics {
    pub fn compute(index: usize, pred: &RasterImage, hr: &RasterImage, mask: &Mask) -> Result<Self> {
        let m = mse(pred, hr)?;
        let mu = masked_mse(pred, hr, mask, false)?;
        let mc = masked_mse(pred, hr, mask, true)?;
        Ok(ImageMetrics {
            index,
            psnr: psnr_from_mse(m),
            ssim: ssim(pred, hr)?,
            psnr_unchanged: mu.map(psnr_from_mse),
            psnr_changed: mc.map(psnr_from_mse),
            mse: m,
            mse_unchanged: mu,
            mse_changed: mc,
            changed_fraction: mask.fraction(),
        })
    }
}

/// Means over images; masked means skip images where the region is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_unchanged: Option<f64>,
    pub psnr_changed: Option<f64>,
    pub mse: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodMetrics {
    pub name: String,
    pub images: Vec<ImageMetrics>,
}

impl MethodMetrics {
    pub fn aggregate(&self) -> Aggregate {
        let im = &self.images;
        Aggregate {
            psnr: mean(im.iter().map(|m| m.psnr)).unwrap_or(f64::NAN),
            ssim: mean(im.iter().map(|m| m.ssim)).unwrap_or(f64::NAN),
            psnr_unchanged: mean(im.iter().filter_map(|m| m.psnr_unchanged)),
            psnr_changed: mean(im.iter().filter_map(|m| m.psnr_changed)),
            mse: mean(im.iter().map(|m| m.mse)).unwrap_or(f64::NAN),
        }
    }

    fn csv_rows(&self, out: &mut String) {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.images {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.name,
                m.index,
                m.psnr,
                m.ssim,
                opt(m.psnr_unchanged),
                opt(m.psnr_changed),
                m.mse,
                opt(m.mse_unchanged),
                opt(m.mse_changed),
                m.changed_fraction
            ));
        }
        let a = self.aggregate();
        let frac = mean(self.images.iter().map(|m| m.changed_fraction)).unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},mean,{},{},{},{},{},,,{}\n",
            self.name,
            a.psnr,
            a.ssim,
            opt(a.psnr_unchanged),
            opt(a.psnr_changed),
            a.mse,
            frac
        ));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// The bicubic row first, then the evaluated methods.
    pub rows: Vec<MethodMetrics>,
    /// Settings echo (`key = value` text).
    pub config: String,
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn baseline(&self) -> &MethodMetrics {
        self.method(BASELINE).expect("reports always carry the baseline row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            r.csv_rows(&mut out);
        }
        out
    }

    /// One line per method with the aggregate numbers.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        self.rows
            .iter()
            .map(|r| {
                let a = r.aggregate();
                format!(
                    "{:<12} psnr {:.3}  ssim {:.4}  psnr_unchanged {}  psnr_changed {}\n",
                    r.name,
                    a.psnr,
                    a.ssim,
                    opt(a.psnr_unchanged),
                    opt(a.psnr_changed)
                )
            })
            .collect()
    }
}

/// Sampler settings for scene `index`: the run seed offset by the index.
pub fn scene_sampler(base: &SamplerConfig, index: usize) -> SamplerConfig {
    SamplerConfig {
        seed: base.seed.wrapping_add(index as u64),
        ..*base
    }
}

/// Samples one scene and clamps the result to `[0, 1]`.
pub fn sample_item(
    model: &dyn VelocityModel,
    item: &DatasetItem,
    sampler: &SamplerConfig,
    ref_mode: RefMode,
) -> Result<RasterImage> {
    sample_item_observed(model, item, sampler, ref_mode, &mut |_| Ok(()))
}

/// [`sample_item`] with a per-step observer.
pub fn sample_item_observed(
    model: &dyn VelocityModel,
    item: &DatasetItem,
    sampler: &SamplerConfig,
    ref_mode: RefMode,
    observer: &mut dyn FnMut(&StepRecord<'_>) -> Result<()>,
) -> Result<RasterImage> {
    let cfg = scene_sampler(sampler, item.index);
    let lr = to_model_space(&item.pair.lr_up);
    let mut rng = SeededRng::derive(sampler.seed, &format!("eval.ref_noise.{}", item.index));
    let reference = reference_input(&item.pair, ref_mode, &mut rng);
    let x1 = cfg.initial_noise(lr.shape());
    let x0 = euler_sample_observed(model, &x1, &lr, &reference, &cfg, observer)?;
    Ok(from_model_space(&x0)?.clamp01())
}

pub fn baseline_metrics(dataset: &Dataset) -> Result<MethodMetrics> {
    let images = dataset
        .items
        .par_iter()
        .map(|it| ImageMetrics::compute(it.index, &it.pair.lr_up, &it.pair.hr, &it.pair.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodMetrics {
        name: BASELINE.into(),
        images,
    })
}

/// Scores `model` on every scene; also returns the samples.
pub fn evaluate_method(
    name: &str,
    model: &dyn VelocityModel,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    ref_mode: RefMode,
) -> Result<(MethodMetrics, Vec<RasterImage>)> {
    sampler.validate()?;
    let results = dataset
        .items
        .par_iter()
        .map(|it| {
            let pred = sample_item(model, it, sampler, ref_mode)?;
            let m = ImageMetrics::compute(it.index, &pred, &it.pair.hr, &it.pair.mask)?;
            Ok((m, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, samples) = results.into_iter().unzip();
    Ok((
        MethodMetrics {
            name: name.into(),
            images,
        },
        samples,
    ))
}

/// Name of the model row in [`evaluate`] reports.
pub const MODEL_ROW: &str = "model";

/// Bicubic row plus the model row.
pub fn evaluate(
    model: &dyn VelocityModel,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    ref_mode: RefMode,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let (row, _) = evaluate_method(MODEL_ROW, model, dataset, sampler, ref_mode)?;
    let mut config = dataset.config.to_kv();
    config.push_str(&format!(
        "sampler_steps = {}\nomega = {}\nlambda_weak = {}\nlambda_strong = {}\nguidance = {}\nseed = {}\nref_mode = {ref_mode}\n",
        sampler.steps, sampler.omega, sampler.lambda_weak, sampler.lambda_strong, sampler.guidance, sampler.seed
    ));
    Ok(MetricsReport {
        rows: vec![baseline_metrics(dataset)?, row],
        config,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn enlarge(img: &RasterImage, zoom: usize) -> Result<RasterImage> {
    let zoom = zoom.max(1);
    RasterImage::from_fn(img.height() * zoom, img.width() * zoom, img.channels(), |y, x, c| {
        img.get(y / zoom, x / zoom, c)
    })
}

/// Grid of images: one row per inner vector, enlarged by `zoom`.
pub fn contact_sheet(rows: &[Vec<RasterImage>], zoom: usize) -> Result<RasterImage> {
    let gap = 2;
    let lines = rows
        .iter()
        .map(|r| {
            let big = r.iter().map(|im| enlarge(im, zoom)).collect::<Result<Vec<_>>>()?;
            RasterImage::hstack(&big.iter().collect::<Vec<_>>(), gap, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    RasterImage::vstack(&lines.iter().collect::<Vec<_>>(), gap, 1.0)
}
