//! Acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL` line per criterion and exits nonzero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dsdit::attention::{joint_attention, m3_attention, siamese_attention, BranchProjection, Modality, TokenSequence};
use dsdit::autodiff::Tape;
use dsdit::flow::{autoguide, euler_sample, SamplerConfig, VelocityModel};
use dsdit::harness::{
    ablate_injection, evaluate, sample_item, smoothed, train, Dataset, ExperimentConfig, RefMode, BASELINE,
    MODEL_ROW,
};
use dsdit::imaging::{psnr, ssim, RasterImage};
use dsdit::model::{check_gradients, Architecture, load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use dsdit::plw::InjectionKind;
use dsdit::rng::SeededRng;
use dsdit::{Result as DsResult, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T>(r: DsResult<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn max_abs(a: &Tensor, b: &Tensor) -> Result<f64, String> {
    ok(a.max_abs_diff(b))
}

// ---------------------------------------------------------------- 1

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (arch, injection) in [
        (Architecture::Dsdit, InjectionKind::Plw),
        (Architecture::Dsdit, InjectionKind::VariantA),
        (Architecture::Dsdit, InjectionKind::VariantB),
        (Architecture::M3dit, InjectionKind::None),
    ] {
        let cfg = ModelConfig {
            arch,
            injection,
            seed: 5,
            ..ModelConfig::tiny(4, 2, 8, 2, 2)
        };
        let report = ok(check_gradients(&cfg, 11, 1e-5))?;
        let err = report.max_rel_error();
        ensure(
            err <= GRAD_TOLERANCE,
            format!("{arch:?}/{injection}: max relative error {err:e} in {:?}", report.worst().map(|p| &p.name)),
        )?;
        worst = worst.max(err);
        entries += report.entries();
    }
    let took = start.elapsed();
    ensure(took <= GRAD_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{entries} entries, max relative error {worst:.2e}, {:.1}s", took.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

/// Per-head softmax attention over the concatenation of all streams,
/// written out with plain loops.
fn brute_force(streams: &[(&Tensor, &BranchProjection)], heads: usize) -> Vec<Vec<f64>> {
    let c = streams[0].0.shape()[1];
    let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
        let n = x.shape()[0];
        (0..n)
            .map(|i| {
                (0..c)
                    .map(|j| (0..c).map(|k| x.data()[i * c + k] * w.data()[k * c + j]).sum())
                    .collect()
            })
            .collect()
    };
    let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for (x, p) in streams {
        q.extend(proj(x, &p.wq));
        k.extend(proj(x, &p.wk));
        v.extend(proj(x, &p.wv));
    }
    let s = q.len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c]; s];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..s {
            let logits: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|x| q[i][x] * k[j][x]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for x in cols.clone() {
                    out[i][x] += e[j] / z * v[j][x];
                }
            }
        }
    }
    out
}

fn rows_diff(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    let c = t.shape()[1];
    let mut worst: f64 = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((t.data()[i * c + j] - v).abs());
        }
    }
    worst
}

fn random_projection(rng: &mut SeededRng, c: usize, heads: usize) -> Result<BranchProjection, String> {
    let mut w = || rng.normal_tensor(&[c, c]).scale(0.5);
    ok(BranchProjection::new(ok(w())?, ok(w())?, ok(w())?, heads))
}

fn attention_oracles() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let heads = [1, 2, 4][case % 3];
        let c = heads * (1 + rng.below(3));
        let n = 1 + rng.below(6);
        let seq = |rng: &mut SeededRng, m| ok(TokenSequence::new(rng.normal_tensor(&[n, c]), m));
        let z = seq(&mut rng, Modality::Noisy)?;
        let l = seq(&mut rng, Modality::Lr)?;
        let r = seq(&mut rng, Modality::Ref)?;
        let pz = random_projection(&mut rng, c, heads)?;
        let pl = random_projection(&mut rng, c, heads)?;
        let pr = random_projection(&mut rng, c, heads)?;

        let joint = ok(joint_attention(&z, &l, &pz, &pl))?;
        let oracle = brute_force(&[(&z.tokens, &pz), (&l.tokens, &pl)], heads);
        worst = worst.max(rows_diff(&joint.noisy.tokens, &oracle[..n]));
        worst = worst.max(rows_diff(&joint.cond.tokens, &oracle[n..]));

        let m3 = ok(m3_attention(&z, &l, &r, &pz, &pl, &pr))?;
        let oracle = brute_force(&[(&z.tokens, &pz), (&l.tokens, &pl), (&r.tokens, &pr)], heads);
        worst = worst.max(rows_diff(&m3.noisy.tokens, &oracle[..n]));
        worst = worst.max(rows_diff(&m3.lr.tokens, &oracle[n..2 * n]));
        worst = worst.max(rows_diff(&m3.reference.tokens, &oracle[2 * n..]));
        ensure(worst <= 1e-12, format!("case {case}: max abs error {worst:e}"))?;
    }
    Ok(format!("50 instances, max abs error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn nudge(t: &Tensor, rng: &mut SeededRng) -> Result<Tensor, String> {
    ok(t.add(&ok(rng.normal_tensor(t.shape()).scale(0.1))?))
}

fn decoupling() -> Outcome {
    // operator level
    let mut rng = SeededRng::new(33);
    let (n, c, heads) = (5, 8, 2);
    let z = ok(TokenSequence::new(rng.normal_tensor(&[n, c]), Modality::Noisy))?;
    let l = ok(TokenSequence::new(rng.normal_tensor(&[n, c]), Modality::Lr))?;
    let r = ok(TokenSequence::new(rng.normal_tensor(&[n, c]), Modality::Ref))?;
    let pz = random_projection(&mut rng, c, heads)?;
    let pl = random_projection(&mut rng, c, heads)?;
    let pr = random_projection(&mut rng, c, heads)?;
    let base = ok(siamese_attention(&z, &l, &r, &pz, &pl, &pr, 1.0))?;

    let mut pl2 = pl.clone();
    pl2.wq = nudge(&pl.wq, &mut rng)?;
    let lr_moved = ok(siamese_attention(&z, &l, &r, &pz, &pl2, &pr, 1.0))?;
    ensure(lr_moved.noisy_from_ref.tokens.bit_eq(&base.noisy_from_ref.tokens), "LR query moved the noisy<-Ref path")?;
    ensure(lr_moved.reference.tokens.bit_eq(&base.reference.tokens), "LR query moved the Ref tokens")?;
    ensure(!lr_moved.lr.tokens.bit_eq(&base.lr.tokens), "LR query had no effect on the LR tokens")?;

    let mut pz2 = pz.clone();
    pz2.wq = nudge(&pz.wq, &mut rng)?;
    let z_moved = ok(siamese_attention(&z, &l, &r, &pz2, &pl, &pr, 1.0))?;
    ensure(!z_moved.noisy_from_lr.tokens.bit_eq(&base.noisy_from_lr.tokens), "noisy query left the LR path")?;
    ensure(!z_moved.noisy_from_ref.tokens.bit_eq(&base.noisy_from_ref.tokens), "noisy query left the Ref path")?;

    // inside a perturbed model, block 0
    let model = ok(ok(Model::build(&ModelConfig::tiny(8, 4, 16, 2, 2)))?.perturbed(3, 0.3))?;
    let mut rng = SeededRng::new(34);
    let (x, lr, rf) = (rng.normal_tensor(&[8, 8, 3]), rng.normal_tensor(&[8, 8, 3]), rng.normal_tensor(&[8, 8, 3]));
    // (noisy<-Ref, new Ref tokens, noisy<-LR, new LR tokens)
    let trace_of = |m: &Model| -> Result<[Tensor; 4], String> {
        let mut tape = Tape::new();
        let tr = ok(m.forward_trace(&mut tape, &x, 0.4, &lr, &rf, 1.0))?;
        let b = &tr.blocks[0];
        let from_ref = b.noisy_from_ref.ok_or("no siamese paths")?;
        let from_lr = b.noisy_from_lr.ok_or("no siamese paths")?;
        Ok([from_ref, b.h_r, from_lr, b.h_l].map(|v| tape.value(v).clone()))
    };
    let with_param = |name: &str, rng: &mut SeededRng| -> Result<Model, String> {
        let mut params = model.params().clone();
        let t = ok(params.get(name))?.clone();
        params.insert(name, nudge(&t, rng)?);
        ok(Model::from_params(model.config(), params))
    };
    let base = trace_of(&model)?;
    let lr_moved = trace_of(&with_param("blocks.0.qkv_lr.wq", &mut rng)?)?;
    ensure(lr_moved[0].bit_eq(&base[0]) && lr_moved[1].bit_eq(&base[1]), "model: LR query moved the Ref path")?;
    ensure(!lr_moved[3].bit_eq(&base[3]), "model: LR query had no effect")?;
    let z_moved = trace_of(&with_param("blocks.0.qkv_z.wq", &mut rng)?)?;
    ensure(!z_moved[0].bit_eq(&base[0]) && !z_moved[2].bit_eq(&base[2]), "model: noisy query missed a path")?;
    Ok("LR query isolated from Ref path; noisy query reaches both (operator and model)".into())
}

// ---------------------------------------------------------------- 4

fn zero_init() -> Outcome {
    let mut rng = SeededRng::new(44);
    let size = 8;
    let (x, lr, rf) = (
        rng.normal_tensor(&[size, size, 3]),
        rng.normal_tensor(&[size, size, 3]),
        rng.normal_tensor(&[size, size, 3]),
    );
    let cfg = |injection| ModelConfig {
        injection,
        seed: 4,
        ..ModelConfig::tiny(size, 4, 16, 2, 3)
    };
    let fused = |kind| -> Result<(Vec<Tensor>, Tensor), String> {
        let m = ok(Model::build(&cfg(kind)))?;
        let mut tape = Tape::new();
        let tr = ok(m.forward_trace(&mut tape, &x, 0.7, &lr, &rf, 1.0))?;
        let blocks = tr.blocks.iter().map(|b| tape.value(b.fused).clone()).collect();
        Ok((blocks, ok(m.forward(&x, 0.7, &lr, &rf, 1.0))?))
    };
    let (base, base_out) = fused(InjectionKind::None)?;
    ensure(base_out.data().iter().all(|&v| v == 0.0), "fresh model velocity is not zero")?;
    for kind in [InjectionKind::VariantA, InjectionKind::VariantB, InjectionKind::Plw] {
        let (blocks, out) = fused(kind)?;
        for (i, (a, b)) in blocks.iter().zip(&base).enumerate() {
            ensure(a.bit_eq(b), format!("{kind}: block {i} differs from injection=none"))?;
        }
        ensure(out.bit_eq(&base_out), format!("{kind}: output differs"))?;
        ensure(out.data().iter().all(|&v| v == 0.0), format!("{kind}: velocity is not zero"))?;
    }
    Ok("variant_a, variant_b, plw bit-identical to none; velocity exactly zero".into())
}

// ---------------------------------------------------------------- 5

fn guidance_algebra() -> Outcome {
    let model = ok(ok(Model::build(&ModelConfig::tiny(8, 4, 16, 2, 2)))?.perturbed(5, 0.3))?;
    let mut rng = SeededRng::new(55);
    let (lr, rf) = (rng.normal_tensor(&[8, 8, 3]), rng.normal_tensor(&[8, 8, 3]));
    let base = SamplerConfig {
        steps: 6,
        seed: 5,
        ..Default::default()
    };
    let x1 = base.initial_noise(&[8, 8, 3]);
    let run = |cfg: SamplerConfig| ok(euler_sample(&model, &x1, &lr, &rf, &cfg));

    let unguided = run(SamplerConfig { guidance: false, ..base })?;
    let unit = run(SamplerConfig { omega: 1.0, ..base })?;
    ensure(unit.bit_eq(&unguided), "omega = 1 differs from unguided sampling")?;
    let zero = run(SamplerConfig { omega: 0.0, ..base })?;
    let weak_only = run(SamplerConfig {
        guidance: false,
        lambda_strong: 0.0,
        ..base
    })?;
    ensure(zero.bit_eq(&weak_only), "omega = 0 differs from the lambda = 0 run")?;
    ensure(!zero.bit_eq(&unguided), "Ref has no influence on the sample")?;

    let (s, w) = (rng.normal_tensor(&[16, 3]), rng.normal_tensor(&[16, 3]));
    let mut worst: f64 = 0.0;
    for omega in [0.0, 1.1, 1.2, 1.5] {
        let g = ok(autoguide(&s, &w, omega))?;
        let expect = ok(w.add(&ok(ok(s.sub(&w))?.scale(omega))?))?;
        worst = worst.max(max_abs(&g, &expect)?);
    }
    ensure(worst <= 1e-12, format!("autoguide off by {worst:e}"))?;
    Ok(format!("omega=1 and omega=0 identities bit-exact; autoguide max error {worst:.2e}"))
}

// ---------------------------------------------------------------- 6

struct ConstantVelocity(Tensor);

impl VelocityModel for ConstantVelocity {
    fn velocity(&self, _: &Tensor, _: f64, _: &Tensor, _: &Tensor, _: f64) -> DsResult<Tensor> {
        Ok(self.0.clone())
    }
}

fn sampler_exactness() -> Outcome {
    let mut rng = SeededRng::new(66);
    let (x0, x1) = (rng.normal_tensor(&[8, 8, 3]), rng.normal_tensor(&[8, 8, 3]));
    let stub = ConstantVelocity(ok(x1.sub(&x0))?);
    let cond = Tensor::zeros([8, 8, 3]);
    let mut worst: f64 = 0.0;
    for steps in [1, 2, 3, 7, 40, 64, 100, 1000] {
        for guidance in [false, true] {
            let cfg = SamplerConfig {
                steps,
                guidance,
                ..Default::default()
            };
            let out = ok(euler_sample(&stub, &x1, &cond, &cond, &cfg))?;
            worst = worst.max(max_abs(&out, &x0)?);
        }
    }
    ensure(worst <= 1e-12, format!("recovered x0 off by {worst:e}"))?;
    let steps = SamplerConfig::default().steps;
    ensure(steps == 40, format!("default step count is {steps}"))?;
    ensure(ExperimentConfig::default().sampler.steps == 40, "experiment default step count is not 40")?;
    Ok(format!("max error {worst:.2e} over 1..1000 steps; default 40 steps"))
}

// ---------------------------------------------------------------- 7

/// Minimum PSNR gain of the trained model over bicubic upsampling.
const MIN_GAIN_OVER_BICUBIC: f64 = 1.0;
/// Minimum unchanged-region PSNR gain over the run whose Ref is noise.
const MIN_UNCHANGED_GAIN_OVER_LR_ONLY: f64 = 0.5;
/// Largest final smoothed loss as a fraction of the step-0 loss (10%, plus 20% slack).
const MAX_FINAL_LOSS_RATIO: f64 = 0.12;

fn desk_scale_learning() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let data = ok(Dataset::generate(&cfg.data))?;
    let run = |ref_mode: RefMode| -> Result<(Vec<f64>, dsdit::harness::MetricsReport), String> {
        let mut c = cfg.clone();
        c.train.ref_mode = ref_mode;
        let out = ok(train(&c, None, &mut |step, loss| {
            if step % 250 == 0 {
                eprintln!("  [{ref_mode}] step {step} loss {loss:.4} ({:.0}s)", start.elapsed().as_secs_f64());
            }
        }))?;
        let report = ok(evaluate(&out.model, &data, &c.sampler, ref_mode))?;
        Ok((out.losses, report))
    };
    let (losses, full) = run(RefMode::Reference)?;
    let (_, lr_only) = run(RefMode::Noise)?;

    let bicubic = full.method(BASELINE).ok_or("no bicubic row")?.aggregate();
    let model = full.method(MODEL_ROW).ok_or("no model row")?.aggregate();
    let blind = lr_only.method(MODEL_ROW).ok_or("no model row")?.aggregate();
    let gain = model.psnr - bicubic.psnr;
    let unchanged = |a: &dsdit::harness::Aggregate| a.psnr_unchanged.ok_or("no unchanged pixels");
    let ref_gain = unchanged(&model)? - unchanged(&blind)?;
    let final_loss = smoothed(&losses, 100).last().copied().unwrap_or(f64::NAN);
    let ratio = final_loss / losses[0];
    let detail = format!(
        "{} scenes; psnr model {:.2} / bicubic {:.2} (gain {gain:.2} dB); unchanged-region psnr {:.2} vs LR-only {:.2} \
         (gain {ref_gain:.2} dB); loss {:.3} -> {final_loss:.3} ({:.1}%); {:.0}s",
        data.len(),
        model.psnr,
        bicubic.psnr,
        unchanged(&model)?,
        unchanged(&blind)?,
        losses[0],
        100.0 * ratio,
        start.elapsed().as_secs_f64()
    );
    ensure(data.len() == 64 && cfg.train.steps == 2000, format!("wrong setup: {detail}"))?;
    ensure(
        gain >= MIN_GAIN_OVER_BICUBIC && ref_gain >= MIN_UNCHANGED_GAIN_OVER_LR_ONLY && ratio <= MAX_FINAL_LOSS_RATIO,
        detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn small_experiment(seed: u64, steps: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default().with_seed(seed);
    c.model = ModelConfig {
        seed,
        ..ModelConfig::tiny(16, 4, 16, 2, 2)
    };
    c.data.image_size = 16;
    c.data.count = 4;
    c.train.steps = steps;
    c.train.batch = 2;
    c.sampler.steps = 4;
    c
}

fn ablation_parity() -> Outcome {
    let cfg = small_experiment(8, 6);
    let data = ok(Dataset::generate(&cfg.data))?;
    let a = ok(ablate_injection(&cfg, &data, &mut |_, _, _| {}))?;
    let b = ok(ablate_injection(&cfg, &data, &mut |_, _, _| {}))?;
    ensure(a.rows.len() == 4, format!("{} rows", a.rows.len()))?;
    let kinds: Vec<InjectionKind> = a.rows.iter().map(|r| r.injection).collect();
    for k in [InjectionKind::None, InjectionKind::VariantA, InjectionKind::VariantB, InjectionKind::Plw] {
        ensure(kinds.contains(&k), format!("missing row {k}"))?;
    }
    let digest = &a.rows[0].init_digest;
    ensure(a.rows.iter().all(|r| &r.init_digest == digest), "step-0 forward outputs differ between rows")?;
    ensure(a.to_csv() == b.to_csv(), "report is not reproducible")?;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        let bits = |v: &[f64]| v.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        ensure(bits(&x.losses) == bits(&y.losses), format!("{} losses differ", x.injection))?;
    }
    Ok(format!("4 rows, shared step-0 digest {}, reproducible", &digest[..12.min(digest.len())]))
}

// ---------------------------------------------------------------- 9

fn ssim_oracle(a: &RasterImage, b: &RasterImage) -> f64 {
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut g = [[0.0; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut n = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / norm;
                        mx += wt * a.get(y0 + i, x0 + j, ch);
                        my += wt * b.get(y0 + i, x0 + j, ch);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / norm;
                        let dx = a.get(y0 + i, x0 + j, ch) - mx;
                        let dy = b.get(y0 + i, x0 + j, ch) - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        total += acc / n as f64;
    }
    total / c as f64
}

fn psnr_oracle(a: &RasterImage, b: &RasterImage) -> f64 {
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    -10.0 * mse.log10()
}

fn random_image(rng: &mut SeededRng, h: usize, w: usize) -> Result<RasterImage, String> {
    ok(RasterImage::new(h, w, 3, (0..h * w * 3).map(|_| rng.uniform()).collect()))
}

fn metric_correctness() -> Outcome {
    let mut rng = SeededRng::new(99);
    let mut worst: f64 = 0.0;
    for (h, w) in [(11, 11), (16, 16), (19, 23), (32, 32)] {
        let a = random_image(&mut rng, h, w)?;
        let noisy = ok(a.map(|v| (v + 0.1 * (v * 37.0).sin()).clamp(0.0, 1.0)))?;
        let affine = ok(a.map(|v| 0.6 * v + 0.3))?;
        let other = random_image(&mut rng, h, w)?;
        for b in [&noisy, &affine, &other] {
            worst = worst.max((ok(ssim(&a, b))? - ssim_oracle(&a, b)).abs());
            worst = worst.max((ok(psnr(&a, b))? - psnr_oracle(&a, b)).abs());
        }
    }
    ensure(worst <= 1e-9, format!("metrics off by {worst:e}"))?;
    let a = ok(RasterImage::from_fn(16, 16, 3, |y, x, c| ((y * 16 + x) * 3 + c) as f64 / 1000.0))?;
    let shifted = ok(a.map(|v| v + 1.0 / 255.0))?;
    let offset = ok(psnr(&a, &shifted))?;
    let expect = 20.0 * 255f64.log10();
    ensure((offset - expect).abs() <= 1e-9, format!("1/255 offset gives {offset} dB"))?;
    ensure((offset - 48.13).abs() < 0.005, format!("1/255 offset gives {offset} dB"))?;
    Ok(format!("max oracle error {worst:.2e}; 1/255 offset -> {offset:.4} dB"))
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let cfg = small_experiment(10, 5);
    let data = ok(Dataset::generate(&cfg.data))?;
    let a = ok(train(&cfg, None, &mut |_, _| {}))?;
    let b = ok(train(&cfg, None, &mut |_, _| {}))?;
    let bits = |v: &[f64]| v.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.losses) == bits(&b.losses), "loss curves differ")?;
    ensure(a.model.params().bit_eq(b.model.params()), "trained parameters differ")?;
    for item in &data.items {
        let sa = ok(sample_item(&a.model, item, &cfg.sampler, cfg.train.ref_mode))?;
        let sb = ok(sample_item(&b.model, item, &cfg.sampler, cfg.train.ref_mode))?;
        ensure(sa.data() == sb.data(), format!("scene {} samples differ", item.index))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.dsck");
    ok(save_checkpoint(&path, &a.checkpoint))?;
    let back = ok(load_checkpoint(&path))?;
    ensure(back == a.checkpoint, "checkpoint changed on disk")?;
    let restored = ok(back.model())?;
    let mut rng = SeededRng::new(1010);
    for t in [0.05, 0.5, 0.95] {
        let (x, l, r) = (rng.normal_tensor(&[16, 16, 3]), rng.normal_tensor(&[16, 16, 3]), rng.normal_tensor(&[16, 16, 3]));
        for lambda in [0.0, 1.0] {
            let before = ok(a.model.forward(&x, t, &l, &r, lambda))?;
            let after = ok(restored.forward(&x, t, &l, &r, lambda))?;
            ensure(before.bit_eq(&after), format!("forward differs after reload at t={t}"))?;
        }
    }
    let bytes = ok(back.to_bytes())?;
    ensure(ok(Checkpoint::from_bytes(&bytes))? == back, "byte round trip differs")?;
    Ok(format!("{} losses and {} samples bit-identical; checkpoint round trip exact", a.losses.len(), data.len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "attention oracles", attention_oracles),
        (3, "shared-projection decoupling", decoupling),
        (4, "zero-init identities", zero_init),
        (5, "guidance algebra", guidance_algebra),
        (6, "sampler exactness", sampler_exactness),
        (8, "ablation parity", ablation_parity),
        (9, "metric correctness", metric_correctness),
        (10, "determinism and persistence", determinism),
        (7, "desk-scale learning", desk_scale_learning),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // `cargo test` passes harness flags such as `--list`; nothing to list here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
