//! Oracle fixtures: inputs and outputs of the core operators as DTNS files,
//! for checking other implementations against this one.
//!
//! `manifest.txt` lists `file sha256` for every emitted file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attention::{m3_attention, siamese_attention, BranchProjection, Modality, TokenSequence};
use crate::error::Result;
use crate::flow::{autoguide, euler_sample_observed, trajectory_dump, FlowSample, SamplerConfig};
use crate::imaging::{bicubic_resize, pixel_digest, write_png, RasterImage};
use crate::layers::ParamStore;
use crate::model::{save_checkpoint, Checkpoint, Model, ModelConfig};
use crate::plw::{compute_patch_weights, inject_plw, PlwParams, PostAttentionTokens};
use crate::rng::SeededRng;
use crate::tensor::{write_dtns, Tensor};

fn file_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Emitter<'a> {
    dir: &'a Path,
}

impl Emitter<'_> {
    fn tensor(&self, name: &str, t: &Tensor) -> Result<()> {
        write_dtns(self.dir.join(format!("{name}.dtns")), t)
    }

    fn params(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            self.tensor(&format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }
}

fn projection(rng: &mut SeededRng, c: usize, heads: usize) -> Result<BranchProjection> {
    let mut w = || rng.normal_tensor(&[c, c]).scale(0.4);
    BranchProjection::new(w()?, w()?, w()?, heads)
}

/// Writes the fixture set into `dir`; returns the manifest lines.
pub fn emit_fixtures(dir: impl AsRef<Path>, seed: u64) -> Result<Vec<(String, String)>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let e = Emitter { dir };
    let mut rng = SeededRng::derive(seed, "fixtures");

    // bicubic degradation at both scales
    let img = RasterImage::new(16, 16, 3, (0..16 * 16 * 3).map(|_| rng.uniform()).collect())?;
    e.tensor("bicubic_input", &img.to_tensor())?;
    for (scale, side) in [(8, 2), (16, 1)] {
        let down = bicubic_resize(&img, side, side)?;
        e.tensor(&format!("bicubic_down_x{scale}"), &down.to_tensor())?;
        e.tensor(&format!("bicubic_up_x{scale}"), &bicubic_resize(&down, 16, 16)?.to_tensor())?;
    }
    let checker = RasterImage::from_fn(8, 8, 3, |y, x, _| ((x / 2 + y / 2) % 2) as f64)?;
    write_png(dir.join("checkerboard.png"), &checker)?;
    std::fs::write(dir.join("checkerboard.digest"), pixel_digest(&checker) + "\n")?;

    // attention: 5 noisy, 4 LR, 3 Ref tokens of width 8 with 2 heads
    let (c, heads) = (8, 2);
    let seqs = [(5, Modality::Noisy, "z"), (4, Modality::Lr, "l"), (3, Modality::Ref, "r")]
        .map(|(n, m, name)| (TokenSequence::new(rng.normal_tensor(&[n, c]), m), name));
    let mut tokens = Vec::new();
    for (s, name) in seqs {
        let s = s?;
        e.tensor(&format!("attn_tokens_{name}"), &s.tokens)?;
        tokens.push(s);
    }
    let mut projs = Vec::new();
    for name in ["z", "l", "r"] {
        let p = projection(&mut rng, c, heads)?;
        e.tensor(&format!("attn_wq_{name}"), &p.wq)?;
        e.tensor(&format!("attn_wk_{name}"), &p.wk)?;
        e.tensor(&format!("attn_wv_{name}"), &p.wv)?;
        projs.push(p);
    }
    let (z, l, r) = (&tokens[0], &tokens[1], &tokens[2]);
    for lambda in [0.0, 1.0] {
        let out = siamese_attention(z, l, r, &projs[0], &projs[1], &projs[2], lambda)?;
        e.tensor(&format!("siamese_noisy_lambda{lambda}"), &out.noisy.tokens)?;
        if lambda == 1.0 {
            e.tensor("siamese_noisy_from_lr", &out.noisy_from_lr.tokens)?;
            e.tensor("siamese_noisy_from_ref", &out.noisy_from_ref.tokens)?;
            e.tensor("siamese_lr", &out.lr.tokens)?;
            e.tensor("siamese_ref", &out.reference.tokens)?;
            e.tensor("siamese_lr_weights", &out.lr_weights)?;
            e.tensor("siamese_ref_weights", &out.ref_weights)?;
        }
    }
    let m3 = m3_attention(z, l, r, &projs[0], &projs[1], &projs[2])?;
    e.tensor("m3_noisy", &m3.noisy.tokens)?;
    e.tensor("m3_lr", &m3.lr.tokens)?;
    e.tensor("m3_ref", &m3.reference.tokens)?;
    e.tensor("m3_weights", &m3.weights)?;

    // patch-level weights with a non-zero output projection
    let mut plw = PlwParams::init(seed, "plw", c, PlwParams::default_hidden(c));
    plw.zero.weight = rng.normal_tensor(&[c, c]).scale(0.3)?;
    plw.zero.bias = rng.normal_tensor(&[c]).scale(0.1)?;
    let mut store = ParamStore::new();
    plw.store(&mut store, "plw");
    e.params("plw_param", &store)?;
    let post = PostAttentionTokens::new(
        rng.normal_tensor(&[6, c]),
        rng.normal_tensor(&[6, c]),
        rng.normal_tensor(&[6, c]),
    )?;
    e.tensor("plw_h_z", &post.h_z)?;
    e.tensor("plw_h_l", &post.h_l)?;
    e.tensor("plw_h_r", &post.h_r)?;
    let (wl, wr) = compute_patch_weights(&post, &plw)?;
    e.tensor("plw_weight_lr", &wl)?;
    e.tensor("plw_weight_ref", &wr)?;
    e.tensor("plw_output", &inject_plw(&post, &plw)?)?;

    // flow interpolation and guidance
    let sample = FlowSample::new(rng.normal_tensor(&[4, 3]), rng.normal_tensor(&[4, 3]), 0.3)?;
    e.tensor("flow_x0", &sample.x0)?;
    e.tensor("flow_x1", &sample.x1)?;
    e.tensor("flow_xt_t0.3", &sample.xt)?;
    e.tensor("flow_v", &sample.v_target)?;
    let (s, w) = (rng.normal_tensor(&[4, 3]), rng.normal_tensor(&[4, 3]));
    e.tensor("guide_strong", &s)?;
    e.tensor("guide_weak", &w)?;
    for omega in [0.0, 1.1, 1.2, 1.5] {
        e.tensor(&format!("guide_omega{omega}"), &autoguide(&s, &w, omega)?)?;
    }

    // a small perturbed model: checkpoint, one forward and a short trajectory
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny(16, 4, 16, 2, 2)
    };
    let model = Model::build(&cfg)?.perturbed(seed, 0.3)?;
    save_checkpoint(
        dir.join("model.dsck"),
        &Checkpoint::from_model(&model, None, 0, SeededRng::new(seed).state()),
    )?;
    let shape = [16, 16, 3];
    let (xt, lr, reference) = (rng.normal_tensor(&shape), rng.normal_tensor(&shape), rng.normal_tensor(&shape));
    e.tensor("model_xt", &xt)?;
    e.tensor("model_lr", &lr)?;
    e.tensor("model_ref", &reference)?;
    for lambda in [0.0, 1.0] {
        e.tensor(&format!("model_out_t0.5_lambda{lambda}"), &model.forward(&xt, 0.5, &lr, &reference, lambda)?)?;
    }
    let sampler = SamplerConfig {
        steps: 4,
        seed,
        ..Default::default()
    };
    let x1 = sampler.initial_noise(&shape);
    e.tensor("sample_x1", &x1)?;
    let mut dump = trajectory_dump(dir.join("trajectory"));
    let x0 = euler_sample_observed(&model, &x1, &lr, &reference, &sampler, &mut dump)?;
    e.tensor("sample_x0_steps4_omega1.2", &x0)?;

    write_manifest(dir)
}

fn collect(dir: &Path, base: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect(&path, base, out)?;
            continue;
        }
        let rel = path.strip_prefix(base).expect("inside base").to_string_lossy().replace('\\', "/");
        if rel == "manifest.txt" {
            continue;
        }
        out.push((rel, file_digest(&std::fs::read(&path)?)));
    }
    Ok(())
}

fn write_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut lines = Vec::new();
    collect(dir, dir, &mut lines)?;
    let text: String = lines.iter().map(|(f, d)| format!("{f} {d}\n")).collect();
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(lines)
}
