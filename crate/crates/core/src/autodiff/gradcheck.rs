use std::collections::BTreeMap;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so gradients that are
/// (numerically) zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// One parameter tensor's comparison.
///
/// `rel_error` is `|a - n| / max(|a|, |n|)` over the whole tensor (2-norms).
/// The entrywise maximum is kept for diagnosis only: entries whose gradient
/// is far below the finite-difference roundoff (about `1e-16 |loss| / h`)
/// get large entrywise ratios even when the gradient is right.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub max_entry_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares tape gradients of `f` with central differences of step `h`.
///
/// `f` must register every entry of `params` on the tape it is given (via
/// [`Tape::param`] under the same name) and return a scalar.
pub fn grad_check<F>(f: F, params: &BTreeMap<String, Tensor>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<Var>,
{
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let analytic = tape.backward(loss)?;

    let mut report = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut numeric_all = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let mut bumped = value.to_vec();
            bumped[i] = value.data()[i] + h;
            probe.insert(name.clone(), Tensor::new(value.shape().to_vec(), bumped.clone())?);
            let plus = eval(&probe)?;
            bumped[i] = value.data()[i] - h;
            probe.insert(name.clone(), Tensor::new(value.shape().to_vec(), bumped)?);
            let minus = eval(&probe)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
            numeric_all.push(numeric);
        }
        let diff = norm(grad.data().iter().zip(&numeric_all).map(|(a, n)| a - n));
        let scale = norm(grad.data().iter().copied()).max(norm(numeric_all.iter().copied()));
        probe.insert(name.clone(), value.clone());
        report.push(ParamCheck {
            name: name.clone(),
            rel_error: diff / scale.max(REL_FLOOR),
            max_entry_rel_error: max_rel,
            max_abs_error: max_abs,
            entries: value.numel(),
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn params(rng: &mut SeededRng, shapes: &[(&str, &[usize])]) -> BTreeMap<String, Tensor> {
        shapes
            .iter()
            .map(|(n, s)| (n.to_string(), rng.normal_tensor(s)))
            .collect()
    }

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = SeededRng::new(2);
        let a = rng.normal_tensor(&[4, 4]);
        let p = params(&mut rng, &[("x", &[1, 4])]);
        let report = grad_check(
            |tape, p| {
                let x = tape.param("x", &p["x"]);
                let m = tape.constant(a.clone());
                let ax = tape.matmul(x, m)?;
                let xax = tape.mul(ax, x)?;
                tape.sum(xax)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut rng = SeededRng::new(3);
        let p = params(&mut rng, &[("x", &[2, 3])]);
        let report = grad_check(
            |tape, p| {
                tape.param("x", &p["x"]);
                let c = tape.constant(Tensor::full([1], 4.0));
                tape.sum(c)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
        assert_eq!(report.params[0].max_abs_error, 0.0);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = SeededRng::new(8);
        let p = params(
            &mut rng,
            &[
                ("x", &[5, 8]),
                ("w", &[8, 8]),
                ("b", &[8]),
                ("g", &[8]),
                ("row", &[1, 8]),
                ("col", &[5, 1]),
                ("k", &[6, 8]),
                ("v", &[6, 8]),
            ],
        );
        let target = rng.normal_tensor(&[5, 12]);
        let report = grad_check(
            |tape, p| {
                let x = tape.param("x", &p["x"]);
                let w = tape.param("w", &p["w"]);
                let b = tape.param("b", &p["b"]);
                let g = tape.param("g", &p["g"]);
                let row = tape.param("row", &p["row"]);
                let col = tape.param("col", &p["col"]);
                let k = tape.param("k", &p["k"]);
                let v = tape.param("v", &p["v"]);
                let h = tape.layer_norm(x, Some(g), Some(b), 1e-6)?;
                let h = tape.linear(h, w, Some(b))?;
                let h = tape.silu(h)?;
                let h = tape.mul_row(h, row)?;
                let h = tape.add_row(h, row)?;
                let h = tape.mul_col(h, col)?;
                let kk = tape.concat_rows(&[k, h])?;
                let vv = tape.concat_rows(&[v, x])?;
                let a = tape.attention(h, kk, vv, 2)?;
                let a = tape.slice_rows(a, 1, 4)?;
                let s = tape.softmax(a)?;
                let s2 = tape.scale(s, 3.0)?;
                let x4 = tape.slice_rows(x, 0, 4)?;
                let wide = tape.concat_cols(&[s2, x4])?;
                let wide = tape.slice_cols(wide, 2, 12)?;
                let x4 = tape.matmul(x4, w)?;
                let x4 = tape.concat_cols(&[x4, s])?;
                let x4 = tape.slice_cols(x4, 4, 12)?;
                let sum = tape.add(wide, x4)?;
                let t4 = tape.constant(target.slice_rows(0, 4)?);
                let diff = tape.mul(sum, t4)?;
                let flat = tape.reshape(diff, &[48])?;
                let l1 = tape.mean(flat)?;
                let l2 = tape.mse(sum, &target.slice_rows(1, 4)?)?;
                tape.add(l1, l2)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }
}
