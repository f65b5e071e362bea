//! Rectified-flow objective, Euler sampling and autoguidance.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`); the target velocity is
//! `x1 - x0` and sampling integrates `t: 1 -> 0` with `x <- x - dt * v`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{write_dtns, Tensor};

/// A velocity predictor `(x_t, t, lr, ref, lambda) -> v`.
pub trait VelocityModel: Sync {
    fn velocity(&self, xt: &Tensor, t: f64, lr: &Tensor, reference: &Tensor, lambda: f64) -> Result<Tensor>;
}

fn check_unit(t: f64, op: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("{op}: t = {t} is outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t, "interpolate")?;
    x0.zip_map(x1, "interpolate", |a, b| (1.0 - t) * a + t * b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub v_target: Tensor,
}

impl FlowSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let v_target = x1.sub(&x0)?;
        Ok(FlowSample { x0, x1, t, xt, v_target })
    }

    /// Draws noise and a timestep for the data point `x0`.
    pub fn draw(x0: Tensor, schedule: TimestepSchedule, rng: &mut SeededRng) -> Result<Self> {
        let x1 = rng.normal_tensor(x0.shape());
        let t = schedule.sample(rng);
        FlowSample::new(x0, x1, t)
    }
}

/// Mean squared deviation of `v_pred` from `x1 - x0`.
pub fn rf_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    v_pred.expect_same_shape(x0, "rf_loss")?;
    x0.expect_same_shape(x1, "rf_loss")?;
    let total: f64 = v_pred
        .data()
        .iter()
        .zip(x0.data().iter().zip(x1.data()))
        .map(|(v, (a, b))| {
            let d = v - (b - a);
            d * d
        })
        .sum();
    Ok(total / v_pred.numel() as f64)
}

/// Training timestep distribution.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum TimestepSchedule {
    #[default]
    Uniform,
    /// `sigmoid(mean + std * n)` with `n ~ N(0, 1)`.
    LogitNormal { mean: f64, std: f64 },
}

impl TimestepSchedule {
    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            TimestepSchedule::Uniform => rng.uniform(),
            TimestepSchedule::LogitNormal { mean, std } => {
                let z = mean + std * rng.normal();
                1.0 / (1.0 + (-z).exp())
            }
        }
    }
}

impl fmt::Display for TimestepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimestepSchedule::Uniform => f.write_str("uniform"),
            TimestepSchedule::LogitNormal { mean, std } => write!(f, "logit_normal:{mean}:{std}"),
        }
    }
}

impl FromStr for TimestepSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(TimestepSchedule::Uniform);
        }
        let bad = || Error::Config(format!("unknown timestep schedule `{s}`"));
        let rest = s.strip_prefix("logit_normal:").ok_or_else(bad)?;
        let (m, sd) = rest.split_once(':').ok_or_else(bad)?;
        let mean: f64 = m.parse().map_err(|_| bad())?;
        let std: f64 = sd.parse().map_err(|_| bad())?;
        if !mean.is_finite() || !(std > 0.0) || !std.is_finite() {
            return Err(bad());
        }
        Ok(TimestepSchedule::LogitNormal { mean, std })
    }
}

/// One draw from the default (uniform) timestep distribution.
pub fn sample_timestep(rng: &mut SeededRng) -> f64 {
    TimestepSchedule::Uniform.sample(rng)
}

fn check_omega(omega: f64) -> Result<()> {
    if !(omega >= 0.0) || !omega.is_finite() {
        return Err(Error::Contract(format!("guidance weight must be finite and >= 0, got {omega}")));
    }
    Ok(())
}

/// `(1 - omega) * v_weak + omega * v_strong`.
pub fn autoguide(v_strong: &Tensor, v_weak: &Tensor, omega: f64) -> Result<Tensor> {
    check_omega(omega)?;
    v_strong.zip_map(v_weak, "autoguide", |s, w| (1.0 - omega) * w + omega * s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub omega: f64,
    /// Ref gate of the weak pass.
    pub lambda_weak: f64,
    /// Ref gate of the strong (or only) pass.
    pub lambda_strong: f64,
    pub guidance: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 40,
            omega: 1.2,
            lambda_weak: 0.0,
            lambda_strong: 1.0,
            guidance: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        check_omega(self.omega).map_err(|_| Error::Config(format!("omega must be >= 0, got {}", self.omega)))?;
        for l in [self.lambda_weak, self.lambda_strong] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
        }
        Ok(())
    }

    /// Starting noise for an image of `shape`, drawn from `seed`.
    pub fn initial_noise(&self, shape: &[usize]) -> Tensor {
        SeededRng::derive(self.seed, "sampler.noise").normal_tensor(shape)
    }
}

/// One Euler step as seen by an observer.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub step: usize,
    pub t: f64,
    pub xt: &'a Tensor,
    pub velocity: &'a Tensor,
}

/// Guided (or plain) velocity at one point.
pub fn guided_velocity(
    model: &dyn VelocityModel,
    xt: &Tensor,
    t: f64,
    lr: &Tensor,
    reference: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    if !cfg.guidance {
        return model.velocity(xt, t, lr, reference, cfg.lambda_strong);
    }
    let (strong, weak) = rayon::join(
        || model.velocity(xt, t, lr, reference, cfg.lambda_strong),
        || model.velocity(xt, t, lr, reference, cfg.lambda_weak),
    );
    autoguide(&strong?, &weak?, cfg.omega)
}

/// Integrates from the noise `x1` at `t = 1` down to `t = 0`.
pub fn euler_sample(
    model: &dyn VelocityModel,
    x1: &Tensor,
    lr: &Tensor,
    reference: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    euler_sample_observed(model, x1, lr, reference, cfg, &mut |_| Ok(()))
}

/// [`euler_sample`] with a callback before each update.
pub fn euler_sample_observed(
    model: &dyn VelocityModel,
    x1: &Tensor,
    lr: &Tensor,
    reference: &Tensor,
    cfg: &SamplerConfig,
    observer: &mut dyn FnMut(&StepRecord<'_>) -> Result<()>,
) -> Result<Tensor> {
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x1.clone();
    for step in 0..cfg.steps {
        let t = 1.0 - step as f64 * dt;
        let v = guided_velocity(model, &x, t, lr, reference, cfg).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteStep { step },
            other => other,
        })?;
        if v.shape() != x.shape() {
            return Err(Error::dim(
                "euler_sample",
                format!("model returned {:?} for state {:?}", v.shape(), x.shape()),
            ));
        }
        observer(&StepRecord { step, t, xt: &x, velocity: &v })?;
        x = x
            .zip_map(&v, "euler_step", |a, b| a - dt * b)
            .map_err(|_| Error::NonFiniteStep { step })?;
    }
    Ok(x)
}

/// Observer that writes `step_{k}_xt.dtns` and `step_{k}_v.dtns` into `dir`.
pub fn trajectory_dump(dir: impl AsRef<Path>) -> impl FnMut(&StepRecord<'_>) -> Result<()> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    move |rec| {
        std::fs::create_dir_all(&dir)?;
        write_dtns(dir.join(format!("step_{:03}_xt.dtns", rec.step)), rec.xt)?;
        write_dtns(dir.join(format!("step_{:03}_v.dtns", rec.step)), rec.velocity)
    }
}
