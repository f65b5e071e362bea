use super::Tensor;
use crate::error::{Error, Result};

/// `c = a * b + beta * c` over strided row/column views.
///
/// Strides are in elements; a transposed operand is just swapped strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs buffer too small");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs buffer too small");
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the three asserts above bound every index dgemm can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents {m}x{k} * {k2}x{n}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        0.0,
        &mut out,
        n as isize,
        1,
    );
    Tensor::checked("matmul", vec![m, n], out)
}

pub(crate) fn softmax_rows(data: &[f64], cols: usize, out: &mut [f64]) {
    for (row, dst) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        let inv = 1.0 / total;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
}

pub fn softmax_lastdim(t: &Tensor) -> Result<Tensor> {
    let (_, cols) = t.rows_cols();
    if cols == 0 {
        return Err(Error::dim("softmax", "empty last axis"));
    }
    let mut out = vec![0.0; t.numel()];
    softmax_rows(t.data(), cols, &mut out);
    Tensor::checked("softmax", t.shape().to_vec(), out)
}

/// Per-row statistics saved by layer norm for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row normalization without the affine part; returns `x_hat` and stats.
pub(crate) fn normalize_rows(x: &[f64], cols: usize, eps: f64) -> (Vec<f64>, LayerNormStats) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mu = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mu) * r;
        }
        mean.push(mu);
        rstd.push(r);
    }
    (out, LayerNormStats { mean, rstd })
}

pub fn layer_norm(t: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (_, c) = t.dims2("layer_norm")?;
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::dim(
            "layer_norm",
            format!("C = {c}, gain {:?}, bias {:?}", gain.shape(), bias.shape()),
        ));
    }
    let (mut out, _) = normalize_rows(t.data(), c, eps);
    for row in out.chunks_exact_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::checked("layer_norm", t.shape().to_vec(), out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(t: &Tensor) -> Result<Tensor> {
    t.map("silu", |x| x * sigmoid(x))
}
