//! The velocity network: token embedders, timestep conditioning, a stack of
//! siamese (or fully joint) blocks, and a zero-initialized output head.
//!
//! All parameters live in one [`ParamStore`] under stable dotted names. The
//! Ref-branch tensors are drawn from the streams of their LR counterparts, so
//! both conditioning branches start identical and diverge only by training.

mod checkpoint;
mod config;
mod optim;

use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Architecture, ModelConfig, CHANNELS};
pub use optim::{adamw_step, AdamConfig, AdamState};

use crate::attention::{concatenated_attention, project, siamese_attention_vars, ProjectionVars};
use crate::autodiff::{grad_check, GradCheckReport, GradientMap, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowSample, VelocityModel};
use crate::imaging::{patchify_tensor, unpatchify_tensor, PatchGrid};
use crate::layers::{Dense, DenseVars, ParamStore};
use crate::plw::{InjectionParams, InjectionVars};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
/// Timesteps in `[0, 1]` are stretched by this factor before the
/// sinusoidal features.
pub const TIME_SCALE: f64 = 1000.0;

/// `[1, dim]` sinusoidal features of `t`: cosines then sines.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let arg = t * TIME_SCALE;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (arg * freq).cos();
        out[half + i] = (arg * freq).sin();
    }
    Tensor::from_parts(vec![1, dim], out)
}

/// Fixed 2-D sin/cos table for a `side x side` token grid, `[side^2, dim]`.
/// The first half of the channels encodes the row, the second the column.
pub fn sincos_2d(side: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut out = vec![0.0; side * side * dim];
    for r in 0..side {
        for c in 0..side {
            let row = &mut out[(r * side + c) * dim..(r * side + c + 1) * dim];
            for (offset, pos) in [(0, r), (dim / 2, c)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    row[offset + i] = (pos as f64 * omega).sin();
                    row[offset + quarter + i] = (pos as f64 * omega).cos();
                }
            }
        }
    }
    Tensor::from_parts(vec![side * side, dim], out)
}

/// Branch names used in parameter paths.
const BRANCHES: [&str; 3] = ["z", "lr", "ref"];

fn init_projection(store: &mut ParamStore, seed: u64, name: &str, label: &str, c: usize, bias: bool) {
    for w in ["wq", "wk", "wv"] {
        let d = Dense::init(seed, &format!("{label}.{w}"), c, c);
        store.insert(format!("{name}.{w}"), d.weight);
    }
    if bias {
        for b in ["bq", "bk", "bv"] {
            store.insert(format!("{name}.{b}"), Tensor::zeros([c]));
        }
    }
}

fn bind_projection(tape: &mut Tape, store: &ParamStore, name: &str, bias: bool) -> Result<ProjectionVars> {
    let w = |tape: &mut Tape, s: &str| store.bind(tape, &format!("{name}.{s}"));
    let bias = if bias {
        Some([w(tape, "bq")?, w(tape, "bk")?, w(tape, "bv")?])
    } else {
        None
    };
    Ok(ProjectionVars {
        wq: w(tape, "wq")?,
        wk: w(tape, "wk")?,
        wv: w(tape, "wv")?,
        bias,
    })
}

/// Initial parameters for `cfg`.
fn init_params(cfg: &ModelConfig) -> ParamStore {
    let (c, seed) = (cfg.dim, cfg.seed);
    let mut s = ParamStore::new();
    // the Ref branch reuses the LR branch's stream label
    let label = |name: &str| name.replace("ref", "lr");
    let dense = |s: &mut ParamStore, name: &str, i: usize, o: usize| {
        Dense::init(seed, &label(name), i, o).store(s, name);
    };
    for b in BRANCHES {
        dense(&mut s, &format!("embed.{b}"), cfg.token_dim(), c);
    }
    dense(&mut s, "time.fc1", cfg.time_dim, c);
    dense(&mut s, "time.fc2", c, c);
    let hidden = cfg.mlp_ratio * c;
    for k in 0..cfg.blocks {
        let p = format!("blocks.{k}");
        dense(&mut s, &format!("{p}.mod_z"), c, 6 * c);
        for b in ["lr", "ref"] {
            if cfg.cond_modulation {
                dense(&mut s, &format!("{p}.mod_{b}"), c, 6 * c);
            } else {
                for n in ["norm1", "norm2"] {
                    s.insert(format!("{p}.{n}_{b}.gain"), Tensor::ones([c]));
                    s.insert(format!("{p}.{n}_{b}.bias"), Tensor::zeros([c]));
                }
            }
        }
        for b in BRANCHES {
            let name = format!("{p}.qkv_{b}");
            init_projection(&mut s, seed, &name, &label(&name), c, cfg.qkv_bias);
            dense(&mut s, &format!("{p}.out_{b}"), c, c);
            dense(&mut s, &format!("{p}.mlp_{b}.fc1"), c, hidden);
            dense(&mut s, &format!("{p}.mlp_{b}.fc2"), hidden, c);
        }
        InjectionParams::init(cfg.injection, seed, &format!("{p}.inject"), c, cfg.plw_hidden)
            .store(&mut s, &format!("{p}.inject"));
    }
    dense(&mut s, "final.mod", c, 2 * c);
    Dense::zeros(c, cfg.token_dim()).store(&mut s, "final.head");
    s
}

/// Handles the forward pass records for one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// Noisy-token attention output before its output projection.
    pub noisy_attn: Var,
    /// The two siamese paths (`None` for the joint layout).
    pub noisy_from_lr: Option<Var>,
    pub noisy_from_ref: Option<Var>,
    pub h_z: Var,
    pub h_l: Var,
    pub h_r: Var,
    /// `h_z` after injection; the next block's noisy input.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[N, p*p*3]` velocity tokens.
    pub output: Var,
    pub blocks: Vec<BlockTrace>,
}

/// One training example in model space.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub flow: FlowSample,
    pub lr: Tensor,
    pub reference: Tensor,
}

struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    pos: Tensor,
    grid: PatchGrid,
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(cfg);
        Self::assemble(cfg.clone(), params)
    }

    fn assemble(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let side = config.image_size / config.patch;
        let pos = sincos_2d(side, config.dim);
        let grid = PatchGrid::new(config.image_size, config.image_size, CHANNELS, config.patch)?;
        Ok(Model { config, params, pos, grid })
    }

    /// A model with externally supplied parameters; names and shapes must
    /// match what `cfg` would build.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expect = init_params(cfg);
        if expect.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expect.len(),
                params.len()
            )));
        }
        for ((ne, te), (np, tp)) in expect.iter().zip(params.iter()) {
            if ne != np || te.shape() != tp.shape() {
                return Err(Error::Config(format!(
                    "parameter `{np}` {:?} does not match expected `{ne}` {:?}",
                    tp.shape(),
                    te.shape()
                )));
            }
        }
        Self::assemble(cfg.clone(), params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    /// Copy with `scale * N(0, 1)` added to every parameter, including the
    /// zero-initialized ones.
    pub fn perturbed(&self, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let mut out = self.clone();
        for (_, t) in out.params.iter_mut() {
            let noise = rng.normal_tensor(t.shape());
            *t = t.add(&noise.scale(scale)?)?;
        }
        Ok(out)
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.config.image_size, self.config.image_size, CHANNELS]
    }

    fn tokens_of(&self, img: &Tensor, what: &str) -> Result<Tensor> {
        if img.shape() != self.image_shape() {
            return Err(Error::dim(
                "forward",
                format!("{what} is {:?}, model expects {:?}", img.shape(), self.image_shape()),
            ));
        }
        Ok(patchify_tensor(img, self.config.patch)?.0)
    }

    fn embed(&self, tape: &mut Tape, img: &Tensor, what: &str, branch: &str, pos: Option<Var>) -> Result<Var> {
        let tokens = self.tokens_of(img, what)?;
        let x = tape.constant(tokens);
        let d = DenseVars::bind(tape, &self.params, &format!("embed.{branch}"))?;
        let h = d.apply(tape, x)?;
        match pos {
            Some(p) => tape.add(h, p),
            None => Ok(h),
        }
    }

    fn modulation(&self, tape: &mut Tape, cond: Var, name: &str) -> Result<Modulation> {
        let c = self.config.dim;
        let d = DenseVars::bind(tape, &self.params, name)?;
        let m = d.apply(tape, cond)?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            parts.push(tape.slice_cols(m, i * c, c)?);
        }
        Ok(Modulation {
            shift1: parts[0],
            scale1: parts[1],
            gate1: parts[2],
            shift2: parts[3],
            scale2: parts[4],
            gate2: parts[5],
        })
    }

    /// `LN(x) * (1 + scale) + shift`.
    fn modulated_norm(&self, tape: &mut Tape, x: Var, shift: Var, scale: Var, ones: Var) -> Result<Var> {
        let n = tape.layer_norm(x, None, None, LN_EPS)?;
        let s = tape.add(scale, ones)?;
        let y = tape.mul_row(n, s)?;
        tape.add_row(y, shift)
    }

    fn affine_norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.params.bind(tape, &format!("{name}.gain"))?;
        let b = self.params.bind(tape, &format!("{name}.bias"))?;
        tape.layer_norm(x, Some(g), Some(b), LN_EPS)
    }

    fn mlp(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let fc1 = DenseVars::bind(tape, &self.params, &format!("{name}.fc1"))?;
        let fc2 = DenseVars::bind(tape, &self.params, &format!("{name}.fc2"))?;
        let h = fc1.apply(tape, x)?;
        let h = tape.silu(h)?;
        fc2.apply(tape, h)
    }

    /// Pre-attention normalization of a conditioning branch, and the
    /// modulation (if any) for its second sublayer.
    fn cond_norm(
        &self,
        tape: &mut Tape,
        x: Var,
        block: &str,
        branch: &str,
        cond: Var,
        ones: Var,
    ) -> Result<(Var, Option<Modulation>)> {
        if self.config.cond_modulation {
            let m = self.modulation(tape, cond, &format!("{block}.mod_{branch}"))?;
            let n = self.modulated_norm(tape, x, m.shift1, m.scale1, ones)?;
            Ok((n, Some(m)))
        } else {
            Ok((self.affine_norm(tape, x, &format!("{block}.norm1_{branch}"))?, None))
        }
    }

    /// Attention residual plus MLP residual for a conditioning branch.
    fn cond_tail(
        &self,
        tape: &mut Tape,
        x: Var,
        attn: Var,
        block: &str,
        branch: &str,
        m: Option<&Modulation>,
        ones: Var,
    ) -> Result<Var> {
        let out = DenseVars::bind(tape, &self.params, &format!("{block}.out_{branch}"))?;
        let a = out.apply(tape, attn)?;
        let a = match m {
            Some(m) => tape.mul_row(a, m.gate1)?,
            None => a,
        };
        let x = tape.add(x, a)?;
        let n = match m {
            Some(m) => self.modulated_norm(tape, x, m.shift2, m.scale2, ones)?,
            None => self.affine_norm(tape, x, &format!("{block}.norm2_{branch}"))?,
        };
        let f = self.mlp(tape, n, &format!("{block}.mlp_{branch}"))?;
        let f = match m {
            Some(m) => tape.mul_row(f, m.gate2)?,
            None => f,
        };
        tape.add(x, f)
    }

    /// Records the full forward pass on `tape`. Inputs are `[H, W, 3]` images
    /// in model space; `lambda` gates the Ref attention path.
    pub fn forward_trace(
        &self,
        tape: &mut Tape,
        xt: &Tensor,
        t: f64,
        lr: &Tensor,
        reference: &Tensor,
        lambda: f64,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("forward: t = {t} is outside [0, 1]")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Contract(format!("forward: lambda must be >= 0, got {lambda}")));
        }
        let pos = cfg.pos_embed.then(|| tape.constant(self.pos.clone()));
        let z0 = self.embed(tape, xt, "xt", "z", pos)?;
        let l0 = self.embed(tape, lr, "lr", "lr", pos)?;
        let r0 = self.embed(tape, reference, "ref", "ref", pos)?;

        let feats = tape.constant(timestep_features(t, cfg.time_dim));
        let fc1 = DenseVars::bind(tape, &self.params, "time.fc1")?;
        let fc2 = DenseVars::bind(tape, &self.params, "time.fc2")?;
        let h = fc1.apply(tape, feats)?;
        let h = tape.silu(h)?;
        let temb = fc2.apply(tape, h)?;
        let cond = tape.silu(temb)?;
        let ones = tape.constant(Tensor::ones([1, cfg.dim]));
        let ref_scale = if cfg.lambda_gates_injection { lambda } else { 1.0 };

        let (mut z, mut l, mut r) = (z0, l0, r0);
        let mut traces = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let bp = format!("blocks.{k}");
            let mz = self.modulation(tape, cond, &format!("{bp}.mod_z"))?;
            let zn = self.modulated_norm(tape, z, mz.shift1, mz.scale1, ones)?;
            let (ln, ml) = self.cond_norm(tape, l, &bp, "lr", cond, ones)?;
            let (rn, mr) = self.cond_norm(tape, r, &bp, "ref", cond, ones)?;

            let pz = bind_projection(tape, &self.params, &format!("{bp}.qkv_z"), cfg.qkv_bias)?;
            let pl = bind_projection(tape, &self.params, &format!("{bp}.qkv_lr"), cfg.qkv_bias)?;
            let pr = bind_projection(tape, &self.params, &format!("{bp}.qkv_ref"), cfg.qkv_bias)?;
            let qz = project(tape, zn, &pz)?;
            let ql = project(tape, ln, &pl)?;
            let qr = project(tape, rn, &pr)?;

            let (noisy_attn, attn_l, attn_r, from_lr, from_ref) = match cfg.arch {
                Architecture::Dsdit => {
                    let s = siamese_attention_vars(tape, qz, ql, qr, cfg.heads, lambda)?;
                    (s.noisy, s.lr, s.reference, Some(s.noisy_from_lr), Some(s.noisy_from_ref))
                }
                Architecture::M3dit => {
                    let (parts, _) = concatenated_attention(tape, &[qz, ql, qr], cfg.heads)?;
                    (parts[0], parts[1], parts[2], None, None)
                }
            };

            let out_z = DenseVars::bind(tape, &self.params, &format!("{bp}.out_z"))?;
            let a = out_z.apply(tape, noisy_attn)?;
            let a = tape.mul_row(a, mz.gate1)?;
            let z1 = tape.add(z, a)?;
            let zn2 = self.modulated_norm(tape, z1, mz.shift2, mz.scale2, ones)?;
            let f = self.mlp(tape, zn2, &format!("{bp}.mlp_z"))?;
            let f = tape.mul_row(f, mz.gate2)?;
            let h_z = tape.add(z1, f)?;

            let h_l = self.cond_tail(tape, l, attn_l, &bp, "lr", ml.as_ref(), ones)?;
            let h_r = self.cond_tail(tape, r, attn_r, &bp, "ref", mr.as_ref(), ones)?;

            let inject = InjectionVars::bind(tape, &self.params, cfg.injection, &format!("{bp}.inject"))?;
            let fused = inject.apply(tape, h_z, h_l, h_r, ref_scale)?;
            traces.push(BlockTrace {
                noisy_attn,
                noisy_from_lr: from_lr,
                noisy_from_ref: from_ref,
                h_z,
                h_l,
                h_r,
                fused,
            });
            z = fused;
            if cfg.freeze_cond_tokens {
                (l, r) = (l0, r0);
            } else {
                (l, r) = (h_l, h_r);
            }
        }

        let fm = DenseVars::bind(tape, &self.params, "final.mod")?;
        let m = fm.apply(tape, cond)?;
        let shift = tape.slice_cols(m, 0, cfg.dim)?;
        let scale = tape.slice_cols(m, cfg.dim, cfg.dim)?;
        let zn = self.modulated_norm(tape, z, shift, scale, ones)?;
        let head = DenseVars::bind(tape, &self.params, "final.head")?;
        let output = head.apply(tape, zn)?;
        Ok(ForwardTrace { output, blocks: traces })
    }

    /// Predicted velocity image `[H, W, 3]`.
    pub fn forward(&self, xt: &Tensor, t: f64, lr: &Tensor, reference: &Tensor, lambda: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward_trace(&mut tape, xt, t, lr, reference, lambda)?;
        unpatchify_tensor(tape.value(trace.output), &self.grid)
    }

    /// Records the flow-matching loss of one example (Ref gate 1).
    pub fn example_loss(&self, tape: &mut Tape, ex: &TrainingExample) -> Result<Var> {
        let trace = self.forward_trace(tape, &ex.flow.xt, ex.flow.t, &ex.lr, &ex.reference, 1.0)?;
        let (target, _) = patchify_tensor(&ex.flow.v_target, self.config.patch)?;
        tape.mse(trace.output, &target)
    }

    pub fn loss_and_grads(&self, ex: &TrainingExample) -> Result<(f64, GradientMap)> {
        let mut tape = Tape::new();
        let loss = self.example_loss(&mut tape, ex)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, grads))
    }

    /// Mean loss and mean gradient over `batch`. Examples run in parallel;
    /// the reduction follows batch order so results are bit-reproducible.
    pub fn batch_loss_and_grads(&self, batch: &[TrainingExample]) -> Result<(f64, ParamStore)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let results: Vec<Result<(f64, GradientMap)>> = batch.par_iter().map(|ex| self.loss_and_grads(ex)).collect();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut acc: Vec<(String, Vec<f64>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (name, sum) in acc.iter_mut() {
                if let Some(grad) = g.get(name) {
                    for (s, v) in sum.iter_mut().zip(grad.data()) {
                        *s += v;
                    }
                }
            }
        }
        let mut out = ParamStore::new();
        for ((name, sum), (_, t)) in acc.into_iter().zip(self.params.iter()) {
            let data = sum.into_iter().map(|v| v * scale).collect();
            out.insert(name, Tensor::new(t.shape().to_vec(), data)?);
        }
        Ok((loss * scale, out))
    }
}

impl VelocityModel for Model {
    fn velocity(&self, xt: &Tensor, t: f64, lr: &Tensor, reference: &Tensor, lambda: f64) -> Result<Tensor> {
        self.forward(xt, t, lr, reference, lambda)
    }
}

/// Number of scalar parameters `cfg` builds.
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(init_params(cfg).numel())
}

/// Noise scale added to fresh parameters before a gradient check. Large
/// enough to wake the zero-initialized layers, small enough to keep the
/// patch-weight softmax out of saturation.
pub const GRAD_CHECK_PERTURBATION: f64 = 0.1;

/// Central-difference check of every parameter gradient of the loss on one
/// random example. The model is perturbed away from its zero-initialized
/// layers first so that every path carries gradient.
pub fn check_gradients(cfg: &ModelConfig, seed: u64, h: f64) -> Result<GradCheckReport> {
    let m = Model::build(cfg)?.perturbed(seed, GRAD_CHECK_PERTURBATION)?;
    let mut rng = SeededRng::derive(seed, "grad_check.example");
    let shape = [cfg.image_size, cfg.image_size, CHANNELS];
    let (x0, x1) = (rng.normal_tensor(&shape), rng.normal_tensor(&shape));
    let (lr, reference) = (rng.normal_tensor(&shape), rng.normal_tensor(&shape));
    let t = 0.05 + 0.9 * rng.uniform();
    let ex = TrainingExample {
        flow: FlowSample::new(x0, x1, t)?,
        lr,
        reference,
    };
    grad_check(
        |tape, ps| {
            let model = Model::from_params(cfg, ParamStore::from(ps.clone()))?;
            model.example_loss(tape, &ex)
        },
        m.params().as_map(),
        h,
    )
}
