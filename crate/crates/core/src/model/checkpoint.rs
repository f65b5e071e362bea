//! `DSCK` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "DSCK"  u32 version
//! u64 len, config text (key = value lines)
//! u64 training step
//! rng: [u8; 32] seed, u64 stream, u128 word position
//! table: u64 count, then per entry u64 name len, name, DTNS record
//! u8 optimizer flag; if 1: u64 optimizer step, moment-1 table, moment-2 table
//! u64 digest: first 8 bytes of SHA-256 over everything before it
//! ```
//!
//! Tables are written in name order.

use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamState, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::rng::RngState;
use crate::tensor::{read_dtns_from, write_dtns_to};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Limit on names and config text, to reject corrupt lengths early.
const MAX_TEXT: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub rng: RngState,
}

fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn put_table(out: &mut Vec<u8>, table: &ParamStore) -> Result<()> {
    out.extend((table.len() as u64).to_le_bytes());
    for (name, t) in table.iter() {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend(name.as_bytes());
        write_dtns_to(out, t)?;
    }
    Ok(())
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn get<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(b)
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    Ok(u64::from_le_bytes(get::<8>(r)?))
}

fn get_text(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = get_u64(r)?;
    if len > MAX_TEXT {
        return Err(bad(format!("text length {len}")));
    }
    let mut b = vec![0u8; len as usize];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    String::from_utf8(b).map_err(|_| bad("text is not UTF-8"))
}

fn get_table(r: &mut Cursor<&[u8]>) -> Result<ParamStore> {
    let count = get_u64(r)?;
    let mut out = ParamStore::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let name = get_text(r)?;
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(bad(format!("table is not in strict name order at `{name}`")));
        }
        let t = read_dtns_from(r).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        last = Some(name.clone());
        out.insert(name, t);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<AdamState>, step: u64, rng: RngState) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer,
            step,
            rng,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.config, self.params.clone())
    }

    /// Rejects resuming a run whose model configuration differs.
    pub fn expect_config(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.config != cfg {
            return Err(Error::Config(format!(
                "checkpoint was written for a different model:\n{}",
                self.config.to_kv()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_kv();
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.rng.seed);
        out.extend(self.rng.stream.to_le_bytes());
        out.extend(self.rng.word_pos.to_le_bytes());
        put_table(&mut out, &self.params)?;
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend(opt.step.to_le_bytes());
                put_table(&mut out, &opt.m)?;
                put_table(&mut out, &opt.v)?;
            }
        }
        let d = digest64(&out);
        out.extend(d.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing DSCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = digest64(body);
        if stored != computed {
            return Err(Error::Digest { stored, computed });
        }

        let mut r = Cursor::new(body);
        r.set_position(8);
        let config = ModelConfig::from_kv(&get_text(&mut r)?)?;
        let step = get_u64(&mut r)?;
        let rng = RngState {
            seed: get::<32>(&mut r)?,
            stream: get_u64(&mut r)?,
            word_pos: u128::from_le_bytes(get::<16>(&mut r)?),
        };
        let params = get_table(&mut r)?;
        let optimizer = match get::<1>(&mut r)?[0] {
            0 => None,
            1 => {
                let step = get_u64(&mut r)?;
                let m = get_table(&mut r)?;
                let v = get_table(&mut r)?;
                Some(AdamState { step, m, v })
            }
            f => return Err(bad(format!("optimizer flag {f}"))),
        };
        if r.position() != body.len() as u64 {
            return Err(bad("trailing bytes before digest"));
        }
        let ck = Checkpoint {
            config,
            params,
            optimizer,
            step,
            rng,
        };
        // validates names and shapes against the configuration
        ck.model()?;
        if let Some(opt) = &ck.optimizer {
            let same = |t: &ParamStore| {
                t.len() == ck.params.len()
                    && t.iter().zip(ck.params.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
            };
            if !same(&opt.m) || !same(&opt.v) {
                return Err(bad("optimizer moments do not match the parameter table"));
            }
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
