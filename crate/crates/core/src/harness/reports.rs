//! Guidance-weight sweep and injection ablation.
//!
//! Sweep CSV header: `row,omega,psnr,ssim,psnr_unchanged,psnr_changed`
//! (`row` is `bicubic` or `omega`). Ablation CSV header:
//! `injection,params,final_loss,psnr,ssim,psnr_unchanged,psnr_changed,init_digest`.

use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::data::{to_model_space, Dataset, RefMode};
use super::eval::{baseline_metrics, contact_sheet, evaluate_method, MethodMetrics};
use super::train::{smoothed, train};
use crate::error::{Error, Result};
use crate::flow::{SamplerConfig, VelocityModel};
use crate::imaging::RasterImage;
use crate::model::{parameter_count, Model};
use crate::plw::InjectionKind;
use crate::tensor::Tensor;

/// Guidance weights swept by default.
pub const DEFAULT_OMEGAS: [f64; 7] = [0.0, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5];

/// Scenes shown in report contact sheets.
pub const SHEET_SCENES: usize = 4;
const SHEET_ZOOM: usize = 4;

pub const SWEEP_HEADER: &str = "row,omega,psnr,ssim,psnr_unchanged,psnr_changed";
pub const ABLATION_HEADER: &str = "injection,params,final_loss,psnr,ssim,psnr_unchanged,psnr_changed,init_digest";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub baseline: MethodMetrics,
    pub rows: Vec<(f64, MethodMetrics)>,
    /// Per shown scene: LR upsampled, one sample per weight, Ref, HR.
    pub sheet_rows: Vec<Vec<RasterImage>>,
    pub runtime_secs: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        let b = self.baseline.aggregate();
        out.push_str(&format!(
            "bicubic,,{},{},{},{}\n",
            b.psnr,
            b.ssim,
            opt(b.psnr_unchanged),
            opt(b.psnr_changed)
        ));
        for (omega, m) in &self.rows {
            let a = m.aggregate();
            out.push_str(&format!(
                "omega,{omega},{},{},{},{}\n",
                a.psnr,
                a.ssim,
                opt(a.psnr_unchanged),
                opt(a.psnr_changed)
            ));
        }
        out
    }

    pub fn contact_sheet(&self) -> Result<RasterImage> {
        contact_sheet(&self.sheet_rows, SHEET_ZOOM)
    }
}

/// Evaluates every weight in `omegas` with guidance on.
pub fn sweep_omega(
    model: &dyn VelocityModel,
    dataset: &Dataset,
    omegas: &[f64],
    base: &SamplerConfig,
    ref_mode: RefMode,
) -> Result<SweepReport> {
    if omegas.is_empty() {
        return Err(Error::Config("no guidance weights to sweep".into()));
    }
    let start = Instant::now();
    let shown = dataset.len().min(SHEET_SCENES);
    let mut sheet_rows: Vec<Vec<RasterImage>> = dataset.items[..shown]
        .iter()
        .map(|it| vec![it.pair.lr_up.clone()])
        .collect();
    let mut rows = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let cfg = SamplerConfig {
            omega,
            guidance: true,
            ..*base
        };
        let (m, samples) = evaluate_method(&format!("omega={omega}"), model, dataset, &cfg, ref_mode)?;
        for (row, s) in sheet_rows.iter_mut().zip(samples) {
            row.push(s);
        }
        rows.push((omega, m));
    }
    for (row, it) in sheet_rows.iter_mut().zip(&dataset.items) {
        row.push(it.pair.reference.clone());
        row.push(it.pair.hr.clone());
    }
    Ok(SweepReport {
        baseline: baseline_metrics(dataset)?,
        rows,
        sheet_rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub injection: InjectionKind,
    pub params: usize,
    /// Mean of the last (up to) 100 batch losses.
    pub final_loss: f64,
    pub losses: Vec<f64>,
    /// Digest of the untrained model's output on a fixed probe.
    pub init_digest: String,
    pub metrics: MethodMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub baseline: MethodMetrics,
    pub rows: Vec<AblationRow>,
    pub runtime_secs: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let a = r.metrics.aggregate();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.injection,
                r.params,
                r.final_loss,
                a.psnr,
                a.ssim,
                opt(a.psnr_unchanged),
                opt(a.psnr_changed),
                r.init_digest
            ));
        }
        out
    }
}

/// SHA-256 (hex) of a tensor's shape and bit pattern.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Output of `model` on a probe built from the first scene at `t = 0.5`.
pub fn probe_output(model: &Model, dataset: &Dataset) -> Result<Tensor> {
    let item = dataset
        .items
        .first()
        .ok_or_else(|| Error::Config("probe needs a non-empty dataset".into()))?;
    let lr = to_model_space(&item.pair.lr_up);
    let reference = to_model_space(&item.pair.reference);
    let xt = SamplerConfig::default().initial_noise(lr.shape());
    model.forward(&xt, 0.5, &lr, &reference, 1.0)
}

/// Trains and evaluates the four injection strategies from identical
/// seeds. `on_step(injection, step, loss)` sees every batch loss.
pub fn ablate_injection(
    base: &ExperimentConfig,
    dataset: &Dataset,
    on_step: &mut dyn FnMut(InjectionKind, u64, f64),
) -> Result<AblationReport> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(InjectionKind::ALL.len());
    for kind in InjectionKind::ALL {
        let mut cfg = base.clone();
        cfg.model.injection = kind;
        cfg.validate()?;
        let init_digest = tensor_digest(&probe_output(&Model::build(&cfg.model)?, dataset)?);
        let out = train(&cfg, None, &mut |step, loss| on_step(kind, step, loss))?;
        let final_loss = smoothed(&out.losses, 100).last().copied().unwrap_or(f64::NAN);
        let (metrics, _) = evaluate_method(kind.as_str(), &out.model, dataset, &cfg.sampler, cfg.train.ref_mode)?;
        rows.push(AblationRow {
            injection: kind,
            params: parameter_count(&cfg.model)?,
            final_loss,
            losses: out.losses,
            init_digest,
            metrics,
        });
    }
    Ok(AblationReport {
        baseline: baseline_metrics(dataset)?,
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::DatasetConfig;
    use crate::harness::eval::evaluate;
    use crate::model::ModelConfig;

    fn tiny() -> (ExperimentConfig, Dataset) {
        let mut c = ExperimentConfig::default().with_seed(5);
        c.model = ModelConfig {
            seed: 5,
            ..ModelConfig::tiny(16, 4, 16, 2, 1)
        };
        c.data.image_size = 16;
        c.train.steps = 3;
        c.train.batch = 2;
        c.sampler.steps = 3;
        let d = Dataset::generate(&DatasetConfig {
            count: 2,
            image_size: 16,
            ..Default::default()
        })
        .unwrap();
        (c, d)
    }

    #[test]
    fn sweep_identities() {
        let (c, d) = tiny();
        let model = Model::build(&c.model).unwrap().perturbed(1, 0.3).unwrap();
        let report = sweep_omega(&model, &d, &[0.0, 1.0], &c.sampler, RefMode::Reference).unwrap();
        assert_eq!(report.rows.len(), 2);
        let unguided = SamplerConfig {
            guidance: false,
            ..c.sampler
        };
        let (plain, _) = evaluate_method("plain", &model, &d, &unguided, RefMode::Reference).unwrap();
        assert_eq!(report.rows[1].1.images, plain.images);
        let weak = SamplerConfig {
            guidance: false,
            lambda_strong: 0.0,
            ..c.sampler
        };
        let (weak_only, _) = evaluate_method("weak", &model, &d, &weak, RefMode::Reference).unwrap();
        assert_eq!(report.rows[0].1.images, weak_only.images);
        assert_ne!(report.rows[0].1.images, report.rows[1].1.images);

        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("bicubic,"));
        assert_eq!(report.sheet_rows.len(), 2);
        // LR upsampled, two samples, Ref, HR
        assert_eq!(report.sheet_rows[0].len(), 5);
        let sheet = report.contact_sheet().unwrap();
        assert_eq!(sheet.width(), 5 * 16 * 4 + 4 * 2);
        assert_eq!(DEFAULT_OMEGAS, [0.0, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5]);

        let full = evaluate(&model, &d, &c.sampler, RefMode::Reference).unwrap();
        assert_eq!(full.baseline(), &report.baseline);
    }

    #[test]
    fn ablation_has_four_rows_identical_at_init_and_reproducible() {
        let (c, d) = tiny();
        let a = ablate_injection(&c, &d, &mut |_, _, _| {}).unwrap();
        assert_eq!(a.rows.len(), 4);
        let kinds: Vec<_> = a.rows.iter().map(|r| r.injection).collect();
        assert_eq!(kinds, InjectionKind::ALL.to_vec());
        assert!(a.rows.iter().all(|r| r.init_digest == a.rows[0].init_digest));
        // identical seeds: the first batch loss matches across rows too
        assert!(a.rows.iter().all(|r| r.losses[0].to_bits() == a.rows[0].losses[0].to_bits()));
        let b = ablate_injection(&c, &d, &mut |_, _, _| {}).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.to_csv().lines().count(), 5);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let (c, d) = tiny();
        let model = Model::build(&c.model).unwrap();
        assert!(sweep_omega(&model, &d, &[], &c.sampler, RefMode::Reference).is_err());
    }
}
