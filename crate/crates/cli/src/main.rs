//! `dsdit` command-line driver.
//!
//! Every subcommand exits 0 on success. Failures print one JSON line
//! `{"error":{"kind":..,"message":..}}` on stderr and exit nonzero
//! (2 for command-line errors, 1 otherwise).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dsdit::config::{parse_kv, KvReader};
use dsdit::flow::trajectory_dump;
use dsdit::harness::train::write_loss_csv;
use dsdit::harness::{
    ablate_injection, emit_fixtures, evaluate, sample_item, sample_item_observed, sweep_omega, train, Dataset,
    ExperimentConfig, MetricsReport, DEFAULT_OMEGAS,
};
use dsdit::imaging::write_png;
use dsdit::model::{check_gradients, load_checkpoint, save_checkpoint, Architecture, Model, ModelConfig};
use dsdit::plw::InjectionKind;
use dsdit::{Error, Result};

/// Largest guidance weight the CLI accepts.
const MAX_OMEGA: f64 = 2.0;

#[derive(Parser, Debug)]
#[command(name = "dsdit", version, about = "Decoupled siamese DiT for reference-based super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a held-out scene set as a directory of PNGs.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Sample super-resolved images for a scene set.
    Sample(SampleArgs),
    /// Score a checkpoint against HR, with the bicubic baseline row.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over a grid of guidance weights.
    SweepOmega(SweepArgs),
    /// Train and compare the four injection strategies.
    AblateInjection(AblateArgs),
    /// Check model gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Write oracle DTNS fixtures and their manifest.
    Fixtures(FixturesArgs),
}

/// Flags mirroring the experiment config keys. Flags override `--config`.
#[derive(Args, Debug, Default, Clone)]
struct ConfigFlags {
    /// Experiment config file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed: model init, training stream and sampler noise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// dsdit | m3dit
    #[arg(long)]
    arch: Option<String>,
    /// none | variant_a | variant_b | plw
    #[arg(long)]
    injection: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW weight decay.
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// uniform | logit_normal:MEAN:STD
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    log_every: Option<u64>,
    /// reference | noise
    #[arg(long)]
    ref_mode: Option<String>,
    /// Guidance weight, in [0, 2].
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    lambda_weak: Option<f64>,
    #[arg(long)]
    sampler_steps: Option<usize>,
    #[arg(long)]
    guidance: Option<bool>,
    /// Degradation factor (8 or 16).
    #[arg(long)]
    scale: Option<usize>,
    /// Number of held-out scenes.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    change_min: Option<f64>,
    #[arg(long)]
    change_max: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Any config key as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        put("seed", self.seed.map(|v| v.to_string()));
        put("image_size", self.image_size.map(|v| v.to_string()));
        put("patch", self.patch.map(|v| v.to_string()));
        put("dim", self.dim.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("blocks", self.blocks.map(|v| v.to_string()));
        put("arch", s(&self.arch));
        put("injection", s(&self.injection));
        put("mlp_ratio", self.mlp_ratio.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("wd", self.wd.map(|v| v.to_string()));
        put("steps", self.steps.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("schedule", s(&self.schedule));
        put("log_every", self.log_every.map(|v| v.to_string()));
        put("ref_mode", s(&self.ref_mode));
        put("omega", self.omega.map(|v| v.to_string()));
        put("lambda_weak", self.lambda_weak.map(|v| v.to_string()));
        put("sampler_steps", self.sampler_steps.map(|v| v.to_string()));
        put("guidance", self.guidance.map(|v| v.to_string()));
        put("scale", self.scale.map(|v| v.to_string()));
        put("count", self.count.map(|v| v.to_string()));
        put("change_min", self.change_min.map(|v| v.to_string()));
        put("change_max", self.change_max.map(|v| v.to_string()));
        put("jitter", self.jitter.map(|v| v.to_string()));
        put("data_seed", self.data_seed.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Config file, then flags, then `extra` (highest precedence).
    fn resolve(&self, extra: &[(&str, String)]) -> Result<ExperimentConfig> {
        let mut map: BTreeMap<String, String> = match &self.config {
            Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        for (k, v) in self.overrides()? {
            map.insert(k, v);
        }
        for (k, v) in extra {
            map.insert(k.to_string(), v.clone());
        }
        let cfg = ExperimentConfig::read(KvReader::new(map))?;
        check_omega(cfg.sampler.omega)?;
        Ok(cfg)
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=MAX_OMEGA).contains(&omega) {
        return Err(Error::Config(format!("omega must be in [0, {MAX_OMEGA}], got {omega}")));
    }
    Ok(())
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output directory (checkpoint.dsck, loss.csv, config.txt).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint up to `steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

/// Scene source shared by the evaluation commands.
#[derive(Args, Debug)]
struct DataFlags {
    /// Scene directory from `gen-data`; generated in memory from the
    /// dataset keys when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataFlags {
    fn load(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        match &self.data {
            Some(dir) => Dataset::load(dir),
            None => Dataset::generate(&cfg.data),
        }
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Output directory for `NNNN_sample.png`.
    #[arg(long)]
    out: PathBuf,
    /// Only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
    /// Write per-step xt and velocity DTNS dumps under this directory.
    #[arg(long)]
    dump_trajectory: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Output directory (metrics.csv, report.txt).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Output directory (sweep.csv, sweep.png).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated guidance weights.
    #[arg(long, value_delimiter = ',')]
    omegas: Option<Vec<f64>>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataFlags,
    /// Output directory (ablation.csv).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value = "dsdit")]
    arch: Architecture,
    #[arg(long, default_value = "plw")]
    injection: InjectionKind,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn emit(v: Value) {
    println!("{v}");
}

fn model_row(report: &MetricsReport) -> Value {
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            let a = r.aggregate();
            json!({
                "method": r.name,
                "psnr": a.psnr,
                "ssim": a.ssim,
                "psnr_unchanged": a.psnr_unchanged,
                "psnr_changed": a.psnr_changed,
            })
        })
        .collect();
    json!(rows)
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path)?.model()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            // here `--seed` picks the scene set
            let extra: Vec<(&str, String)> = a.cfg.seed.map(|s| ("data_seed", s.to_string())).into_iter().collect();
            let cfg = a.cfg.resolve(&extra)?;
            let data = Dataset::generate(&cfg.data)?;
            data.save(&a.out)?;
            emit(json!({"status": "ok", "scenes": data.len(), "out": a.out}));
        }
        Command::Train(a) => {
            let extra: Vec<(&str, String)> =
                a.out.iter().map(|p| ("out_dir", p.display().to_string())).collect();
            let cfg = a.cfg.resolve(&extra)?;
            let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
            let first = resume.as_ref().map_or(0, |c| c.step);
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_kv())?;
            let every = cfg.train.log_every;
            let out = train(&cfg, resume, &mut |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step} loss {loss:.6}");
                }
            })?;
            save_checkpoint(cfg.out_dir.join("checkpoint.dsck"), &out.checkpoint)?;
            write_loss_csv(cfg.out_dir.join("loss.csv"), &out.losses, first, every)?;
            emit(json!({
                "status": "ok",
                "steps": out.checkpoint.step,
                "first_loss": out.losses.first(),
                "last_loss": out.losses.last(),
                "checkpoint": cfg.out_dir.join("checkpoint.dsck"),
            }));
        }
        Command::Sample(a) => {
            let cfg = a.cfg.resolve(&[])?;
            let model = load_model(&a.checkpoint)?;
            let data = a.data.load(&cfg)?;
            let data = data.truncated(a.limit.unwrap_or(data.len()));
            std::fs::create_dir_all(&a.out)?;
            for item in &data.items {
                let img = match &a.dump_trajectory {
                    Some(dir) => {
                        let mut dump = trajectory_dump(dir.join(format!("{:04}", item.index)));
                        sample_item_observed(&model, item, &cfg.sampler, cfg.train.ref_mode, &mut dump)?
                    }
                    None => sample_item(&model, item, &cfg.sampler, cfg.train.ref_mode)?,
                };
                write_png(a.out.join(format!("{:04}_sample.png", item.index)), &img)?;
            }
            emit(json!({"status": "ok", "samples": data.len(), "omega": cfg.sampler.omega, "out": a.out}));
        }
        Command::Eval(a) => {
            let cfg = a.cfg.resolve(&[])?;
            let model = load_model(&a.checkpoint)?;
            let data = a.data.load(&cfg)?;
            let report = evaluate(&model, &data, &cfg.sampler, cfg.train.ref_mode)?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("metrics.csv"), report.to_csv())?;
            std::fs::write(
                a.out.join("report.txt"),
                format!("{}\n{}runtime_secs = {}\n", report.summary(), report.config, report.runtime_secs),
            )?;
            emit(json!({"status": "ok", "rows": model_row(&report), "runtime_secs": report.runtime_secs}));
        }
        Command::SweepOmega(a) => {
            let cfg = a.cfg.resolve(&[])?;
            let omegas = a.omegas.unwrap_or_else(|| DEFAULT_OMEGAS.to_vec());
            for &w in &omegas {
                check_omega(w)?;
            }
            let model = load_model(&a.checkpoint)?;
            let data = a.data.load(&cfg)?;
            let report = sweep_omega(&model, &data, &omegas, &cfg.sampler, cfg.train.ref_mode)?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("sweep.csv"), report.to_csv())?;
            write_png(a.out.join("sweep.png"), &report.contact_sheet()?)?;
            let rows: Vec<Value> = report
                .rows
                .iter()
                .map(|(w, m)| json!({"omega": w, "psnr": m.aggregate().psnr}))
                .collect();
            emit(json!({"status": "ok", "rows": rows, "bicubic_psnr": report.baseline.aggregate().psnr}));
        }
        Command::AblateInjection(a) => {
            let cfg = a.cfg.resolve(&[])?;
            let data = a.data.load(&cfg)?;
            let report = ablate_injection(&cfg, &data, &mut |kind, step, loss| {
                if step % cfg.train.log_every == 0 {
                    eprintln!("{kind} step {step} loss {loss:.6}");
                }
            })?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("ablation.csv"), report.to_csv())?;
            let rows: Vec<Value> = report
                .rows
                .iter()
                .map(|r| json!({"injection": r.injection.as_str(), "final_loss": r.final_loss, "psnr": r.metrics.aggregate().psnr}))
                .collect();
            emit(json!({"status": "ok", "rows": rows}));
        }
        Command::GradCheck(a) => {
            let cfg = ModelConfig {
                arch: a.arch,
                injection: a.injection,
                seed: a.seed,
                ..ModelConfig::tiny(a.image_size, a.patch, a.dim, a.heads, a.blocks)
            };
            cfg.validate()?;
            let report = check_gradients(&cfg, a.seed, a.step)?;
            let worst = report.worst().map(|p| p.name.clone());
            let max = report.max_rel_error();
            if !(max <= a.tolerance) {
                return Err(Error::Contract(format!(
                    "max relative gradient error {max:e} in {} exceeds {:e}",
                    worst.unwrap_or_default(),
                    a.tolerance
                )));
            }
            emit(json!({
                "status": "ok",
                "max_rel_error": max,
                "params": report.params.len(),
                "entries": report.entries(),
                "worst": worst,
            }));
        }
        Command::Fixtures(a) => {
            let manifest = emit_fixtures(&a.out, a.seed)?;
            emit(json!({"status": "ok", "files": manifest.len(), "out": a.out}));
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"error": {"kind": kind, "message": message}}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
            }
            let message = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&message).trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
