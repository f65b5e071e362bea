use std::fmt;
use std::str::FromStr;

use crate::config::{render_kv, KvReader};
use crate::error::{Error, Result};
use crate::plw::{InjectionKind, PlwParams};

/// Image channels handled by the model.
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Architecture {
    /// Two decoupled joint attentions sharing the noisy projection.
    #[default]
    Dsdit,
    /// One joint attention over all three streams.
    M3dit,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Dsdit => "dsdit",
            Architecture::M3dit => "m3dit",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsdit" => Ok(Architecture::Dsdit),
            "m3dit" => Ok(Architecture::M3dit),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub arch: Architecture,
    pub injection: InjectionKind,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    /// Hidden width of the per-branch MLPs as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Hidden widths of the patch-weight MLP.
    pub plw_hidden: [usize; 2],
    /// Give the LR and Ref branches their own timestep modulation.
    pub cond_modulation: bool,
    /// Also scale the Ref term of the injection by the Ref gate.
    pub lambda_gates_injection: bool,
    /// Feed every block the embedded conditioning tokens instead of the
    /// previous block's updated ones.
    pub freeze_cond_tokens: bool,
    pub pos_embed: bool,
    /// Learnable Q/K/V biases in every attention projection.
    pub qkv_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 4,
            dim: 64,
            heads: 4,
            blocks: 4,
            arch: Architecture::Dsdit,
            injection: InjectionKind::Plw,
            time_dim: 64,
            mlp_ratio: 2,
            plw_hidden: PlwParams::default_hidden(64),
            cond_modulation: false,
            lambda_gates_injection: false,
            freeze_cond_tokens: false,
            pos_embed: true,
            qkv_bias: false,
            seed: 0,
        }
    }
}

fn parse_pair(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected `a,b`")?;
    let a = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok([a, b])
}

impl ModelConfig {
    /// A small configuration with the given width, suitable for checks.
    pub fn tiny(image_size: usize, patch: usize, dim: usize, heads: usize, blocks: usize) -> Self {
        ModelConfig {
            image_size,
            patch,
            dim,
            heads,
            blocks,
            time_dim: dim,
            plw_hidden: PlwParams::default_hidden(dim),
            ..Default::default()
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!("patch {} must divide image size {}", self.patch, self.image_size));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.blocks == 0 {
            return fail("blocks must be >= 1".into());
        }
        if self.pos_embed && !self.dim.is_multiple_of(4) {
            return fail(format!("2-D positional embedding needs dim divisible by 4, got {}", self.dim));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return fail(format!("time_dim must be even and positive, got {}", self.time_dim));
        }
        if self.mlp_ratio == 0 || self.plw_hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if self.arch == Architecture::M3dit && self.injection != InjectionKind::None {
            return fail(format!(
                "injection `{}` is defined for the siamese layout only; m3dit needs injection = none",
                self.injection
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        render_kv([
            ("image_size", self.image_size.to_string()),
            ("patch", self.patch.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("arch", self.arch.to_string()),
            ("injection", self.injection.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("plw_hidden", format!("{},{}", self.plw_hidden[0], self.plw_hidden[1])),
            ("cond_modulation", self.cond_modulation.to_string()),
            ("lambda_gates_injection", self.lambda_gates_injection.to_string()),
            ("freeze_cond_tokens", self.freeze_cond_tokens.to_string()),
            ("pos_embed", self.pos_embed.to_string()),
            ("qkv_bias", self.qkv_bias.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Reads the model keys from `r`, leaving every other key in place.
    /// When `dim` is given without `plw_hidden`, the hidden widths follow it.
    pub fn read(r: &mut KvReader) -> Result<Self> {
        let mut c = ModelConfig::default();
        r.take_into("image_size", &mut c.image_size)?;
        r.take_into("patch", &mut c.patch)?;
        r.take_into("dim", &mut c.dim)?;
        r.take_into("heads", &mut c.heads)?;
        r.take_into("blocks", &mut c.blocks)?;
        r.take_into("arch", &mut c.arch)?;
        r.take_into("injection", &mut c.injection)?;
        r.take_into("time_dim", &mut c.time_dim)?;
        r.take_into("mlp_ratio", &mut c.mlp_ratio)?;
        c.plw_hidden = match r.take::<String>("plw_hidden")? {
            Some(s) => parse_pair(&s).map_err(|e| Error::Config(format!("bad value for `plw_hidden` ({s}): {e}")))?,
            None => PlwParams::default_hidden(c.dim),
        };
        r.take_into("cond_modulation", &mut c.cond_modulation)?;
        r.take_into("lambda_gates_injection", &mut c.lambda_gates_injection)?;
        r.take_into("freeze_cond_tokens", &mut c.freeze_cond_tokens)?;
        r.take_into("pos_embed", &mut c.pos_embed)?;
        r.take_into("qkv_bias", &mut c.qkv_bias)?;
        r.take_into("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let c = ModelConfig::read(&mut r)?;
        r.finish()?;
        Ok(c)
    }
}
