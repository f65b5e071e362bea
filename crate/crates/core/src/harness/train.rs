use std::path::Path;

use super::config::ExperimentConfig;
use super::data::{reference_input, to_model_space};
use crate::error::{Error, Result};
use crate::flow::FlowSample;
use crate::model::{adamw_step, AdamConfig, AdamState, Checkpoint, Model, TrainingExample};
use crate::rng::SeededRng;

/// Result of [`train`]: the final model, a resumable checkpoint and the
/// per-step batch losses (`losses[k]` is the loss before update `k + 1`).
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Draws one training batch from `rng`: fresh scenes, noise and timesteps.
pub fn draw_batch(cfg: &ExperimentConfig, rng: &mut SeededRng) -> Result<Vec<TrainingExample>> {
    (0..cfg.train.batch)
        .map(|i| {
            let (seed, fraction) = cfg.data.draw_scene(rng);
            let item = cfg.data.make_item(i, seed, fraction)?;
            let reference = reference_input(&item.pair, cfg.train.ref_mode, rng);
            let flow = FlowSample::draw(to_model_space(&item.pair.hr), cfg.train.schedule, rng)?;
            Ok(TrainingExample {
                flow,
                lr: to_model_space(&item.pair.lr_up),
                reference,
            })
        })
        .collect()
}

/// Trains from scratch, or continues `resume` up to `cfg.train.steps`.
/// `on_step(step, loss)` sees every batch loss as it is computed.
pub fn train(
    cfg: &ExperimentConfig,
    resume: Option<Checkpoint>,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut opt, mut rng, start) = match resume {
        None => {
            let model = Model::build(&cfg.model)?;
            let opt = AdamState::new(model.params());
            (model, opt, SeededRng::derive(cfg.seed(), "train"), 0)
        }
        Some(ck) => {
            ck.expect_config(&cfg.model)?;
            let model = ck.model()?;
            let opt = ck.optimizer.clone().unwrap_or_else(|| AdamState::new(model.params()));
            (model, opt, SeededRng::from_state(ck.rng), ck.step)
        }
    };
    let mut losses = Vec::with_capacity(cfg.train.steps.saturating_sub(start) as usize);
    for step in start..cfg.train.steps {
        let batch = draw_batch(cfg, &mut rng)?;
        let (loss, grads) = model.batch_loss_and_grads(&batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: step as usize },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as usize });
        }
        on_step(step, loss);
        losses.push(loss);
        let adam = AdamConfig {
            lr: cfg.train.adam.lr * cfg.train.lr_schedule.factor(step, cfg.train.steps),
            ..cfg.train.adam
        };
        adamw_step(model.params_mut(), &grads, &mut opt, &adam).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: step as usize },
            other => other,
        })?;
    }
    let step = cfg.train.steps.max(start);
    let checkpoint = Checkpoint::from_model(&model, Some(opt), step, rng.state());
    Ok(TrainOutcome {
        model,
        checkpoint,
        losses,
    })
}

/// Trailing mean over `window` steps (shorter at the start).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// `step,loss` rows every `every` steps plus the last step.
pub fn loss_csv(losses: &[f64], first_step: u64, every: u64) -> String {
    let mut out = String::from("step,loss\n");
    let last = losses.len().saturating_sub(1);
    for (i, l) in losses.iter().enumerate() {
        let step = first_step + i as u64;
        if step.is_multiple_of(every.max(1)) || i == last {
            out.push_str(&format!("{step},{l:.17e}\n"));
        }
    }
    out
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64], first_step: u64, every: u64) -> Result<()> {
    std::fs::write(path, loss_csv(losses, first_step, every))?;
    Ok(())
}
