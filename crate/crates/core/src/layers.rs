//! Named parameters and the dense layer used throughout the model.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{matmul, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Flat, name-ordered parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Registers `name` on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    /// SHA-256 over names, shapes and the bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

impl From<BTreeMap<String, Tensor>> for ParamStore {
    fn from(map: BTreeMap<String, Tensor>) -> Self {
        ParamStore { map }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Tensor::zeros([input, output]),
            bias: Tensor::zeros([output]),
        }
    }

    /// Truncated-normal weight drawn from a stream keyed by `label`, zero bias.
    pub fn init(seed: u64, label: &str, input: usize, output: usize) -> Self {
        let mut rng = SeededRng::derive(seed, label);
        let w = (0..input * output).map(|_| rng.trunc_normal(INIT_STD)).collect();
        Dense {
            weight: Tensor::from_parts(vec![input, output], w),
            bias: Tensor::zeros([output]),
        }
    }

    /// Standard-normal weight and bias times `scale`.
    pub fn random(rng: &mut SeededRng, input: usize, output: usize, scale: f64) -> Self {
        Dense {
            weight: rng.normal_tensor(&[input, output]).scale(scale).expect("finite"),
            bias: rng.normal_tensor(&[output]).scale(scale).expect("finite"),
        }
    }

    pub fn identity(n: usize) -> Self {
        Dense {
            weight: Tensor::identity(n),
            bias: Tensor::zeros([n]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.register(&mut tape, "dense");
        let y = vars.apply(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> DenseVars {
        DenseVars {
            weight: tape.param(&format!("{prefix}.weight"), &self.weight),
            bias: tape.param(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn store(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.weight"), self.weight.clone());
        store.insert(format!("{prefix}.bias"), self.bias.clone());
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Dense {
            weight: store.get(&format!("{prefix}.weight"))?.clone(),
            bias: store.get(&format!("{prefix}.bias"))?.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(DenseVars {
            weight: store.bind(tape, &format!("{prefix}.weight"))?,
            bias: store.bind(tape, &format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, Some(self.bias))
    }
}

/// Plain `x W + b` without a tape, for oracles and inference helpers.
pub fn dense_forward(x: &Tensor, layer: &Dense) -> Result<Tensor> {
    let y = matmul(x, &layer.weight)?;
    let (n, o) = y.dims2("dense")?;
    if layer.bias.numel() != o {
        return Err(Error::dim("dense", "bias length"));
    }
    let mut out = y.to_vec();
    for row in out.chunks_exact_mut(o) {
        for (v, b) in row.iter_mut().zip(layer.bias.data()) {
            *v += b;
        }
    }
    Tensor::new(vec![n, o], out)
}
