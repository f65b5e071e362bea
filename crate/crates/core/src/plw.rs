//! Post-attention fusion of conditioning tokens into the noisy stream.
//!
//! The patch-level weighting ([`inject_plw`]) predicts a two-way softmax per
//! token from `[H^l, H^r, H^z]` and adds a zero-initialized projection of the
//! weighted mix. The two ablation variants replace the learned weights with
//! separate projections ([`inject_variant_a`]) or a plain sum
//! ([`inject_variant_b`]). Every variant is the identity on `H^z` until its
//! zero-initialized projection moves.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Dense, DenseVars, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum InjectionKind {
    #[default]
    None,
    VariantA,
    VariantB,
    Plw,
}

impl InjectionKind {
    pub const ALL: [InjectionKind; 4] = [
        InjectionKind::None,
        InjectionKind::VariantA,
        InjectionKind::VariantB,
        InjectionKind::Plw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InjectionKind::None => "none",
            InjectionKind::VariantA => "variant_a",
            InjectionKind::VariantB => "variant_b",
            InjectionKind::Plw => "plw",
        }
    }
}

impl fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InjectionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown injection `{s}`")))
    }
}

/// Weight MLP `3C -> h1 -> h2 -> 2` plus the zero-initialized `C -> C`
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PlwParams {
    pub mlp: [Dense; 3],
    pub zero: Dense,
}

impl PlwParams {
    /// Default hidden widths for channel width `c`.
    pub fn default_hidden(c: usize) -> [usize; 2] {
        [2 * c, c]
    }

    /// Fresh parameters: truncated-normal MLP, all-zero projection.
    pub fn init(seed: u64, prefix: &str, c: usize, hidden: [usize; 2]) -> Self {
        PlwParams {
            mlp: [
                Dense::init(seed, &format!("{prefix}.mlp0"), 3 * c, hidden[0]),
                Dense::init(seed, &format!("{prefix}.mlp1"), hidden[0], hidden[1]),
                Dense::init(seed, &format!("{prefix}.mlp2"), hidden[1], 2),
            ],
            zero: Dense::zeros(c, c),
        }
    }

    pub fn dim(&self) -> usize {
        self.zero.input_dim()
    }

    fn validate(&self) -> Result<()> {
        let c = self.dim();
        let [a, b, o] = &self.mlp;
        let chain = a.input_dim() == 3 * c
            && a.output_dim() == b.input_dim()
            && b.output_dim() == o.input_dim()
            && o.output_dim() == 2
            && self.zero.output_dim() == c;
        if !chain {
            return Err(Error::dim("plw", "weight MLP widths do not chain 3C -> .. -> 2"));
        }
        Ok(())
    }

    pub fn store(&self, store: &mut ParamStore, prefix: &str) {
        for (i, d) in self.mlp.iter().enumerate() {
            d.store(store, &format!("{prefix}.mlp{i}"));
        }
        self.zero.store(store, &format!("{prefix}.zero"));
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let p = PlwParams {
            mlp: [
                Dense::load(store, &format!("{prefix}.mlp0"))?,
                Dense::load(store, &format!("{prefix}.mlp1"))?,
                Dense::load(store, &format!("{prefix}.mlp2"))?,
            ],
            zero: Dense::load(store, &format!("{prefix}.zero"))?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> PlwVars {
        PlwVars {
            mlp: [
                self.mlp[0].register(tape, &format!("{prefix}.mlp0")),
                self.mlp[1].register(tape, &format!("{prefix}.mlp1")),
                self.mlp[2].register(tape, &format!("{prefix}.mlp2")),
            ],
            zero: self.zero.register(tape, &format!("{prefix}.zero")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlwVars {
    pub mlp: [DenseVars; 3],
    pub zero: DenseVars,
}

impl PlwVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(PlwVars {
            mlp: [
                DenseVars::bind(tape, store, &format!("{prefix}.mlp0"))?,
                DenseVars::bind(tape, store, &format!("{prefix}.mlp1"))?,
                DenseVars::bind(tape, store, &format!("{prefix}.mlp2"))?,
            ],
            zero: DenseVars::bind(tape, store, &format!("{prefix}.zero"))?,
        })
    }
}

/// Projections of the two ablation variants.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantAParams {
    pub zero_lr: Dense,
    pub zero_ref: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantBParams {
    pub zero: Dense,
}

impl VariantAParams {
    pub fn init(c: usize) -> Self {
        VariantAParams {
            zero_lr: Dense::zeros(c, c),
            zero_ref: Dense::zeros(c, c),
        }
    }
}

impl VariantBParams {
    pub fn init(c: usize) -> Self {
        VariantBParams { zero: Dense::zeros(c, c) }
    }
}

/// Injection parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub enum InjectionParams {
    None,
    VariantA(VariantAParams),
    VariantB(VariantBParams),
    Plw(PlwParams),
}

impl InjectionParams {
    pub fn init(kind: InjectionKind, seed: u64, prefix: &str, c: usize, hidden: [usize; 2]) -> Self {
        match kind {
            InjectionKind::None => InjectionParams::None,
            InjectionKind::VariantA => InjectionParams::VariantA(VariantAParams::init(c)),
            InjectionKind::VariantB => InjectionParams::VariantB(VariantBParams::init(c)),
            InjectionKind::Plw => InjectionParams::Plw(PlwParams::init(seed, prefix, c, hidden)),
        }
    }

    pub fn store(&self, store: &mut ParamStore, prefix: &str) {
        match self {
            InjectionParams::None => {}
            InjectionParams::VariantA(p) => {
                p.zero_lr.store(store, &format!("{prefix}.zero_lr"));
                p.zero_ref.store(store, &format!("{prefix}.zero_ref"));
            }
            InjectionParams::VariantB(p) => p.zero.store(store, &format!("{prefix}.zero")),
            InjectionParams::Plw(p) => p.store(store, prefix),
        }
    }
}

/// Tape handles for one block's injection.
#[derive(Clone, Copy, Debug)]
pub enum InjectionVars {
    None,
    VariantA { zero_lr: DenseVars, zero_ref: DenseVars },
    VariantB { zero: DenseVars },
    Plw(PlwVars),
}

impl InjectionVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, kind: InjectionKind, prefix: &str) -> Result<Self> {
        Ok(match kind {
            InjectionKind::None => InjectionVars::None,
            InjectionKind::VariantA => InjectionVars::VariantA {
                zero_lr: DenseVars::bind(tape, store, &format!("{prefix}.zero_lr"))?,
                zero_ref: DenseVars::bind(tape, store, &format!("{prefix}.zero_ref"))?,
            },
            InjectionKind::VariantB => InjectionVars::VariantB {
                zero: DenseVars::bind(tape, store, &format!("{prefix}.zero"))?,
            },
            InjectionKind::Plw => InjectionVars::Plw(PlwVars::bind(tape, store, prefix)?),
        })
    }

    /// Fuses `h_l`, `h_r` into `h_z`. `ref_scale` multiplies the Ref term
    /// (1 leaves the plain formulas).
    pub fn apply(&self, tape: &mut Tape, h_z: Var, h_l: Var, h_r: Var, ref_scale: f64) -> Result<Var> {
        match self {
            InjectionVars::None => Ok(h_z),
            InjectionVars::VariantA { zero_lr, zero_ref } => {
                let a = zero_lr.apply(tape, h_l)?;
                let b = zero_ref.apply(tape, h_r)?;
                let b = scale_unless_one(tape, b, ref_scale)?;
                let s = tape.add(h_z, a)?;
                tape.add(s, b)
            }
            InjectionVars::VariantB { zero } => {
                let r = scale_unless_one(tape, h_r, ref_scale)?;
                let mix = tape.add(h_l, r)?;
                let d = zero.apply(tape, mix)?;
                tape.add(h_z, d)
            }
            InjectionVars::Plw(p) => plw_vars(tape, p, h_z, h_l, h_r, ref_scale).map(|(out, _, _)| out),
        }
    }
}

fn scale_unless_one(tape: &mut Tape, v: Var, s: f64) -> Result<Var> {
    if s == 1.0 {
        Ok(v)
    } else {
        tape.scale(v, s)
    }
}

/// Per-token `(W^l, W^r)`, each `[N, 1]`.
pub fn patch_weights_vars(tape: &mut Tape, p: &PlwVars, h_z: Var, h_l: Var, h_r: Var) -> Result<(Var, Var)> {
    let x = tape.concat_cols(&[h_l, h_r, h_z])?;
    let a = p.mlp[0].apply(tape, x)?;
    let a = tape.silu(a)?;
    let b = p.mlp[1].apply(tape, a)?;
    let b = tape.silu(b)?;
    let logits = p.mlp[2].apply(tape, b)?;
    let w = tape.softmax(logits)?;
    Ok((tape.slice_cols(w, 0, 1)?, tape.slice_cols(w, 1, 1)?))
}

/// Returns the fused tokens and the two weight columns.
pub fn plw_vars(
    tape: &mut Tape,
    p: &PlwVars,
    h_z: Var,
    h_l: Var,
    h_r: Var,
    ref_scale: f64,
) -> Result<(Var, Var, Var)> {
    let (wl, wr) = patch_weights_vars(tape, p, h_z, h_l, h_r)?;
    let a = tape.mul_col(h_l, wl)?;
    let b = tape.mul_col(h_r, wr)?;
    let b = scale_unless_one(tape, b, ref_scale)?;
    let mix = tape.add(a, b)?;
    let d = p.zero.apply(tape, mix)?;
    Ok((tape.add(h_z, d)?, wl, wr))
}

/// Post-MLP tokens of the three branches.
#[derive(Clone, Debug, PartialEq)]
pub struct PostAttentionTokens {
    pub h_z: Tensor,
    pub h_l: Tensor,
    pub h_r: Tensor,
}

impl PostAttentionTokens {
    pub fn new(h_z: Tensor, h_l: Tensor, h_r: Tensor) -> Result<Self> {
        h_z.dims2("post_attention_tokens")?;
        if h_l.shape() != h_z.shape() || h_r.shape() != h_z.shape() {
            return Err(Error::dim(
                "post_attention_tokens",
                format!("{:?} / {:?} / {:?}", h_z.shape(), h_l.shape(), h_r.shape()),
            ));
        }
        Ok(PostAttentionTokens { h_z, h_l, h_r })
    }

    fn dim(&self) -> usize {
        self.h_z.shape()[1]
    }

    fn on_tape(&self, tape: &mut Tape) -> (Var, Var, Var) {
        (
            tape.constant(self.h_z.clone()),
            tape.constant(self.h_l.clone()),
            tape.constant(self.h_r.clone()),
        )
    }
}

fn check_width(tokens: &PostAttentionTokens, c: usize, op: &'static str) -> Result<()> {
    if tokens.dim() != c {
        return Err(Error::dim(op, format!("tokens of width {} vs parameters for {c}", tokens.dim())));
    }
    Ok(())
}

pub fn compute_patch_weights(tokens: &PostAttentionTokens, params: &PlwParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    check_width(tokens, params.dim(), "compute_patch_weights")?;
    let mut tape = Tape::new();
    let (z, l, r) = tokens.on_tape(&mut tape);
    let vars = params.register(&mut tape, "plw");
    let (wl, wr) = patch_weights_vars(&mut tape, &vars, z, l, r)?;
    Ok((tape.value(wl).clone(), tape.value(wr).clone()))
}

pub fn inject_plw(tokens: &PostAttentionTokens, params: &PlwParams) -> Result<Tensor> {
    params.validate()?;
    check_width(tokens, params.dim(), "inject_plw")?;
    let mut tape = Tape::new();
    let (z, l, r) = tokens.on_tape(&mut tape);
    let vars = params.register(&mut tape, "plw");
    let (out, _, _) = plw_vars(&mut tape, &vars, z, l, r, 1.0)?;
    Ok(tape.value(out).clone())
}

pub fn inject_variant_a(tokens: &PostAttentionTokens, params: &VariantAParams) -> Result<Tensor> {
    check_width(tokens, params.zero_lr.input_dim(), "inject_variant_a")?;
    let mut tape = Tape::new();
    let (z, l, r) = tokens.on_tape(&mut tape);
    let vars = InjectionVars::VariantA {
        zero_lr: params.zero_lr.register(&mut tape, "zero_lr"),
        zero_ref: params.zero_ref.register(&mut tape, "zero_ref"),
    };
    let out = vars.apply(&mut tape, z, l, r, 1.0)?;
    Ok(tape.value(out).clone())
}

pub fn inject_variant_b(tokens: &PostAttentionTokens, params: &VariantBParams) -> Result<Tensor> {
    check_width(tokens, params.zero.input_dim(), "inject_variant_b")?;
    let mut tape = Tape::new();
    let (z, l, r) = tokens.on_tape(&mut tape);
    let vars = InjectionVars::VariantB {
        zero: params.zero.register(&mut tape, "zero"),
    };
    let out = vars.apply(&mut tape, z, l, r, 1.0)?;
    Ok(tape.value(out).clone())
}
