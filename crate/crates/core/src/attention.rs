//! Joint attention between the noisy stream and conditioning streams.
//!
//! In the siamese layout the noisy tokens are projected to Q/K/V exactly
//! once per block. That single projection joins two independent joint
//! attentions, one against the LR tokens and one against the Ref tokens, and
//! the two noisy-token results are summed as `h_l + lambda * h_r`. LR and Ref
//! never share a softmax, so a change on one conditioning branch cannot reach
//! the other branch's attention path.
//!
//! The M3 baseline instead concatenates all three streams into one sequence.
//!
//! Everything here is written against the [`Tape`] so the model can train
//! through it; the `Tensor`-level entry points wrap a throwaway tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::PatchGrid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Noisy,
    Lr,
    Ref,
}

/// `N x C` tokens of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub modality: Modality,
    pub grid: Option<PatchGrid>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, modality: Modality) -> Result<Self> {
        tokens.dims2("token_sequence")?;
        Ok(TokenSequence {
            tokens,
            modality,
            grid: None,
        })
    }

    pub fn with_grid(mut self, grid: PatchGrid) -> Result<Self> {
        if grid.tokens() != self.len() {
            return Err(Error::dim(
                "token_sequence",
                format!("grid of {} tokens vs {}", grid.tokens(), self.len()),
            ));
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Square Q/K/V projections of one branch; biases are off unless set.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchProjection {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bias: Option<[Tensor; 3]>,
    pub heads: usize,
}

impl BranchProjection {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, heads: usize) -> Result<Self> {
        let p = BranchProjection {
            wq,
            wk,
            wv,
            bias: None,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let c = self.wq.shape().first().copied().unwrap_or(0);
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.shape() != [c, c] {
                return Err(Error::dim("branch_projection", format!("{:?} is not {c}x{c}", w.shape())));
            }
        }
        if let Some(bias) = &self.bias {
            if bias.iter().any(|b| b.numel() != c) {
                return Err(Error::dim("branch_projection", "bias length differs from C"));
            }
        }
        check_heads(c, self.heads)
    }

    /// Registers the weights on `tape` under `prefix` (`{prefix}.wq`, ...).
    /// Registering the same prefix twice yields the same variables.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> ProjectionVars {
        let bias = self.bias.as_ref().map(|[bq, bk, bv]| {
            [
                tape.param(&format!("{prefix}.bq"), bq),
                tape.param(&format!("{prefix}.bk"), bk),
                tape.param(&format!("{prefix}.bv"), bv),
            ]
        });
        ProjectionVars {
            wq: tape.param(&format!("{prefix}.wq"), &self.wq),
            wk: tape.param(&format!("{prefix}.wk"), &self.wk),
            wv: tape.param(&format!("{prefix}.wv"), &self.wv),
            bias,
        }
    }
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::dim("attention", format!("{heads} heads do not divide C = {c}")));
    }
    Ok(())
}

/// Projection weights living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bias: Option<[Var; 3]>,
}

/// One branch's projected queries, keys and values.
#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project(tape: &mut Tape, h: Var, p: &ProjectionVars) -> Result<Qkv> {
    let (bq, bk, bv) = match p.bias {
        Some([a, b, c]) => (Some(a), Some(b), Some(c)),
        None => (None, None, None),
    };
    Ok(Qkv {
        q: tape.linear(h, p.wq, bq)?,
        k: tape.linear(h, p.wk, bk)?,
        v: tape.linear(h, p.wv, bv)?,
    })
}

/// Attention over the concatenation of `parts` along the sequence axis.
/// Returns each part's slice of the output, in order, plus the attention
/// node (whose saved probabilities are `[heads, S, S]`).
pub fn concatenated_attention(
    tape: &mut Tape,
    parts: &[Qkv],
    heads: usize,
) -> Result<(Vec<Var>, Var)> {
    let lens: Vec<usize> = parts.iter().map(|p| tape.value(p.q).shape()[0]).collect();
    let q = tape.concat_rows(&parts.iter().map(|p| p.q).collect::<Vec<_>>())?;
    let k = tape.concat_rows(&parts.iter().map(|p| p.k).collect::<Vec<_>>())?;
    let v = tape.concat_rows(&parts.iter().map(|p| p.v).collect::<Vec<_>>())?;
    let out = tape.attention(q, k, v, heads)?;
    let mut start = 0;
    let mut pieces = Vec::with_capacity(parts.len());
    for len in lens {
        pieces.push(tape.slice_rows(out, start, len)?);
        start += len;
    }
    Ok((pieces, out))
}

/// `h_l + lambda * h_r` on the tape.
pub fn siamese_combine_vars(tape: &mut Tape, h_l: Var, h_r: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let scaled = tape.scale(h_r, lambda)?;
    tape.add(h_l, scaled)
}

/// Outputs of one siamese attention step, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct SiameseVars {
    /// `h_l^z + lambda * h_r^z`.
    pub noisy: Var,
    pub noisy_from_lr: Var,
    pub noisy_from_ref: Var,
    pub lr: Var,
    pub reference: Var,
    pub lr_attention: Var,
    pub ref_attention: Var,
}

/// Decoupled siamese attention. `qkv_z` is computed once by the caller and
/// used by both joint attentions.
pub fn siamese_attention_vars(
    tape: &mut Tape,
    qkv_z: Qkv,
    qkv_l: Qkv,
    qkv_r: Qkv,
    heads: usize,
    lambda: f64,
) -> Result<SiameseVars> {
    let (lr_out, lr_node) = concatenated_attention(tape, &[qkv_z, qkv_l], heads)?;
    let (ref_out, ref_node) = concatenated_attention(tape, &[qkv_z, qkv_r], heads)?;
    let noisy = siamese_combine_vars(tape, lr_out[0], ref_out[0], lambda)?;
    Ok(SiameseVars {
        noisy,
        noisy_from_lr: lr_out[0],
        noisy_from_ref: ref_out[0],
        lr: lr_out[1],
        reference: ref_out[1],
        lr_attention: lr_node,
        ref_attention: ref_node,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointAttentionOutput {
    pub noisy: TokenSequence,
    pub cond: TokenSequence,
    /// `[heads, 2N, 2N]` attention probabilities over the joint sequence.
    pub weights: Tensor,
}

fn expect_width(a: &TokenSequence, b: &TokenSequence, p: &BranchProjection) -> Result<()> {
    if a.dim() != b.dim() || a.dim() != p.dim() {
        return Err(Error::dim(
            "joint_attention",
            format!("channel widths {} / {} / projection {}", a.dim(), b.dim(), p.dim()),
        ));
    }
    Ok(())
}

fn relabel(tokens: Tensor, like: &TokenSequence) -> TokenSequence {
    TokenSequence {
        tokens,
        modality: like.modality,
        grid: like.grid,
    }
}

/// Joint attention of the noisy tokens with one conditioning stream.
pub fn joint_attention(
    noisy: &TokenSequence,
    cond: &TokenSequence,
    proj_z: &BranchProjection,
    proj_c: &BranchProjection,
) -> Result<JointAttentionOutput> {
    proj_z.validate()?;
    proj_c.validate()?;
    expect_width(noisy, cond, proj_z)?;
    expect_width(noisy, cond, proj_c)?;
    if proj_z.heads != proj_c.heads {
        return Err(Error::dim("joint_attention", "branches disagree on head count"));
    }
    let mut tape = Tape::new();
    let z = tape.constant(noisy.tokens.clone());
    let c = tape.constant(cond.tokens.clone());
    let pz = proj_z.register(&mut tape, "z");
    let pc = proj_c.register(&mut tape, "c");
    let qz = project(&mut tape, z, &pz)?;
    let qc = project(&mut tape, c, &pc)?;
    let (parts, node) = concatenated_attention(&mut tape, &[qz, qc], proj_z.heads)?;
    Ok(JointAttentionOutput {
        noisy: relabel(tape.value(parts[0]).clone(), noisy),
        cond: relabel(tape.value(parts[1]).clone(), cond),
        weights: tape.attention_probs(node).expect("attention node"),
    })
}

pub fn siamese_combine(h_l: &TokenSequence, h_r: &TokenSequence, lambda: f64) -> Result<TokenSequence> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let scaled = h_r.tokens.scale(lambda)?;
    Ok(relabel(h_l.tokens.add(&scaled)?, h_l))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseOutput {
    pub noisy: TokenSequence,
    pub noisy_from_lr: TokenSequence,
    pub noisy_from_ref: TokenSequence,
    pub lr: TokenSequence,
    pub reference: TokenSequence,
    pub lr_weights: Tensor,
    pub ref_weights: Tensor,
}

/// Both siamese paths with one shared noisy projection, then the
/// `lambda`-scaled combination.
pub fn siamese_attention(
    z: &TokenSequence,
    l: &TokenSequence,
    r: &TokenSequence,
    proj_z: &BranchProjection,
    proj_l: &BranchProjection,
    proj_r: &BranchProjection,
    lambda: f64,
) -> Result<SiameseOutput> {
    for p in [proj_z, proj_l, proj_r] {
        p.validate()?;
        expect_width(z, l, p)?;
        expect_width(z, r, p)?;
    }
    let mut tape = Tape::new();
    let hz = tape.constant(z.tokens.clone());
    let hl = tape.constant(l.tokens.clone());
    let hr = tape.constant(r.tokens.clone());
    let pz = proj_z.register(&mut tape, "z");
    let pl = proj_l.register(&mut tape, "l");
    let pr = proj_r.register(&mut tape, "r");
    let qz = project(&mut tape, hz, &pz)?;
    let ql = project(&mut tape, hl, &pl)?;
    let qr = project(&mut tape, hr, &pr)?;
    let out = siamese_attention_vars(&mut tape, qz, ql, qr, proj_z.heads, lambda)?;
    let v = |var: Var| tape.value(var).clone();
    Ok(SiameseOutput {
        noisy: relabel(v(out.noisy), z),
        noisy_from_lr: relabel(v(out.noisy_from_lr), z),
        noisy_from_ref: relabel(v(out.noisy_from_ref), z),
        lr: relabel(v(out.lr), l),
        reference: relabel(v(out.reference), r),
        lr_weights: tape.attention_probs(out.lr_attention).expect("attention node"),
        ref_weights: tape.attention_probs(out.ref_attention).expect("attention node"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct M3Output {
    pub noisy: TokenSequence,
    pub lr: TokenSequence,
    pub reference: TokenSequence,
    /// `[heads, 3N, 3N]`.
    pub weights: Tensor,
}

/// Single joint attention over the `[z, l, r]` concatenation.
pub fn m3_attention(
    z: &TokenSequence,
    l: &TokenSequence,
    r: &TokenSequence,
    proj_z: &BranchProjection,
    proj_l: &BranchProjection,
    proj_r: &BranchProjection,
) -> Result<M3Output> {
    for p in [proj_z, proj_l, proj_r] {
        p.validate()?;
        expect_width(z, l, p)?;
        expect_width(z, r, p)?;
    }
    let mut tape = Tape::new();
    let hz = tape.constant(z.tokens.clone());
    let hl = tape.constant(l.tokens.clone());
    let hr = tape.constant(r.tokens.clone());
    let pz = proj_z.register(&mut tape, "z");
    let pl = proj_l.register(&mut tape, "l");
    let pr = proj_r.register(&mut tape, "r");
    let qz = project(&mut tape, hz, &pz)?;
    let ql = project(&mut tape, hl, &pl)?;
    let qr = project(&mut tape, hr, &pr)?;
    let (parts, node) = concatenated_attention(&mut tape, &[qz, ql, qr], proj_z.heads)?;
    Ok(M3Output {
        noisy: relabel(tape.value(parts[0]).clone(), z),
        lr: relabel(tape.value(parts[1]).clone(), l),
        reference: relabel(tape.value(parts[2]).clone(), r),
        weights: tape.attention_probs(node).expect("attention node"),
    })
}
