use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::data::{DatasetConfig, RefMode};
use crate::config::{render_kv, KvReader};
use crate::error::{Error, Result};
use crate::flow::{SamplerConfig, TimestepSchedule};
use crate::model::{AdamConfig, ModelConfig};

/// Peak learning rate of the desk-scale runs.
pub const DESK_LR: f64 = 3e-3;
/// Warmup of the desk-scale cosine schedule, in steps.
pub const DESK_WARMUP: u64 = 100;

/// Learning-rate multiplier over the course of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero at the
    /// last step. The curve follows the configured step count, so resuming
    /// with a larger `steps` continues on the stretched curve.
    Cosine { warmup: u64 },
}

impl LrSchedule {
    /// Multiplier for update `step` (0-based) of a `total`-step run.
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup } => {
                if step < warmup {
                    return (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let p = ((step - warmup) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::Cosine { warmup } => write!(f, "cosine:{warmup}"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "constant" {
            return Ok(LrSchedule::Constant);
        }
        let bad = || Error::Config(format!("unknown lr schedule `{s}` (constant | cosine:WARMUP)"));
        let warmup = s.strip_prefix("cosine:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(LrSchedule::Cosine { warmup })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub steps: u64,
    pub batch: usize,
    pub schedule: TimestepSchedule,
    pub lr_schedule: LrSchedule,
    pub log_every: u64,
    pub ref_mode: RefMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            adam: AdamConfig {
                lr: DESK_LR,
                ..AdamConfig::default()
            },
            steps: 2000,
            batch: 16,
            schedule: TimestepSchedule::Uniform,
            lr_schedule: LrSchedule::Cosine { warmup: DESK_WARMUP },
            log_every: 50,
            ref_mode: RefMode::Reference,
        }
    }
}

/// Everything a run needs. The model `seed` also drives the training
/// stream and the sampler noise; `data_seed` fixes the held-out scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub sampler: SamplerConfig,
    pub data: DatasetConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            sampler: SamplerConfig::default(),
            data: DatasetConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    /// Sets the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.sampler.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.sampler.validate()?;
        self.train.adam.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config("dataset and model image sizes differ".into()));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.train.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if self.sampler.seed != self.model.seed {
            return Err(Error::Config("sampler and model seeds differ".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut text = m.to_kv();
        let t = &self.train;
        let s = &self.sampler;
        text.push_str(&render_kv([
            ("lr", t.adam.lr.to_string()),
            ("wd", t.adam.weight_decay.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("steps", t.steps.to_string()),
            ("batch", t.batch.to_string()),
            ("schedule", t.schedule.to_string()),
            ("lr_schedule", t.lr_schedule.to_string()),
            ("log_every", t.log_every.to_string()),
            ("ref_mode", t.ref_mode.to_string()),
            ("omega", s.omega.to_string()),
            ("lambda_weak", s.lambda_weak.to_string()),
            ("lambda_strong", s.lambda_strong.to_string()),
            ("sampler_steps", s.steps.to_string()),
            ("guidance", s.guidance.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]));
        let data: Vec<_> = self.data.kv_pairs().into_iter().filter(|(k, _)| *k != "image_size").collect();
        text.push_str(&render_kv(data));
        text
    }

    /// Reads every key; unknown keys are an error.
    pub fn read(mut r: KvReader) -> Result<Self> {
        let model = ModelConfig::read(&mut r)?;
        let mut train = TrainSettings::default();
        r.take_into("lr", &mut train.adam.lr)?;
        r.take_into("wd", &mut train.adam.weight_decay)?;
        r.take_into("beta1", &mut train.adam.beta1)?;
        r.take_into("beta2", &mut train.adam.beta2)?;
        r.take_into("adam_eps", &mut train.adam.eps)?;
        r.take_into("steps", &mut train.steps)?;
        r.take_into("batch", &mut train.batch)?;
        r.take_into("schedule", &mut train.schedule)?;
        r.take_into("lr_schedule", &mut train.lr_schedule)?;
        r.take_into("log_every", &mut train.log_every)?;
        r.take_into("ref_mode", &mut train.ref_mode)?;
        let mut sampler = SamplerConfig {
            seed: model.seed,
            ..Default::default()
        };
        r.take_into("omega", &mut sampler.omega)?;
        r.take_into("lambda_weak", &mut sampler.lambda_weak)?;
        r.take_into("lambda_strong", &mut sampler.lambda_strong)?;
        r.take_into("sampler_steps", &mut sampler.steps)?;
        r.take_into("guidance", &mut sampler.guidance)?;
        let mut out_dir = ExperimentConfig::default().out_dir;
        if let Some(p) = r.take::<String>("out_dir")? {
            out_dir = PathBuf::from(p);
        }
        let data = DatasetConfig::read(&mut r, model.image_size)?;
        r.finish()?;
        let cfg = ExperimentConfig {
            model,
            train,
            sampler,
            data,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        ExperimentConfig::read(KvReader::parse(text)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        ExperimentConfig::from_kv(&std::fs::read_to_string(path)?)
    }
}
