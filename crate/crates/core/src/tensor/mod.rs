//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! differentiation tape and the model.
//!
//! Every public operation validates shapes up front and rejects non-finite
//! results, so a `Tensor` handed out by this module always satisfies
//! `product(shape) == data.len()` and contains only finite entries.

mod dump;
pub(crate) mod kernels;

use std::fmt;
use std::sync::Arc;

pub use dump::{read_dtns, read_dtns_from, write_dtns, write_dtns_to, DTNS_MAGIC};
pub use kernels::{gemm, layer_norm, matmul, silu, softmax_lastdim, LayerNormStats};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    /// Builds a tensor from data already known to be finite and well-shaped.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    /// Like [`Tensor::from_parts`], but rejects NaN/Inf in `data`.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Last extent, and the number of slices along it.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        (rows, cols)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::checked(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::checked(op, self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map("scale", |v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and every entry.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Concatenates rank-2 tensors along the row (sequence) axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_parts(vec![rows, c], data))
    }

    /// Concatenates rank-2 tensors along the column (channel) axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Self::from_parts(vec![r, total], data))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {r}")));
        }
        Ok(Self::from_parts(
            vec![len, c],
            self.data[start * c..(start + len) * c].to_vec(),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Self::from_parts(vec![r, len], data))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

/// Splits an `N x C` matrix into `[H, N, C/H]` head-major layout.
pub fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, c) = t.dims2("split_heads")?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim("split_heads", format!("{heads} heads do not divide {c}")));
    }
    let d = c / heads;
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let src = &t.data()[i * c + h * d..i * c + (h + 1) * d];
            out[(h * n + i) * d..(h * n + i + 1) * d].copy_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(vec![heads, n, d], out))
}

/// Inverse of [`split_heads`].
pub fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let (heads, n, d) = match t.shape()[..] {
        [h, n, d] => (h, n, d),
        _ => return Err(Error::dim("merge_heads", format!("expected rank 3, got {:?}", t.shape()))),
    };
    let c = heads * d;
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            out[i * c + h * d..i * c + (h + 1) * d]
                .copy_from_slice(&t.data()[(h * n + i) * d..(h * n + i + 1) * d]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        let big = Tensor::new(vec![1], vec![1e308]).unwrap();
        assert!(matches!(big.scale(10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![2, 2], (6..10).map(f64::from).collect()).unwrap();
        let cat = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 5]);
        assert_eq!(cat.slice_cols(0, 3).unwrap(), a);
        assert_eq!(cat.slice_cols(3, 2).unwrap(), b);
        let rows = Tensor::concat_rows(&[&a, &a]).unwrap();
        assert_eq!(rows.slice_rows(2, 2).unwrap(), a);
        assert!(Tensor::concat_rows(&[&a, &b]).is_err());
    }

    #[test]
    fn heads_round_trip_and_trivial_cases() {
        let t = Tensor::new(vec![3, 8], (0..24).map(f64::from).collect()).unwrap();
        for h in [1, 2, 4, 8] {
            assert_eq!(merge_heads(&split_heads(&t, h).unwrap()).unwrap(), t);
        }
        // one head is a reshape
        assert_eq!(split_heads(&t, 1).unwrap().data(), t.data());
        // H = C: head h, token i holds channel h of token i
        let s = split_heads(&t, 8).unwrap();
        for h in 0..8 {
            for i in 0..3 {
                assert_eq!(s.data()[h * 3 + i], t.data()[i * 8 + h]);
            }
        }
        assert!(split_heads(&t, 3).is_err());
    }
}
