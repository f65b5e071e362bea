//! Cubic-convolution resampling (Keys kernel, `a = -0.5`).
//!
//! Pixel centers sit at half-integer coordinates, so output sample `j` reads
//! source coordinate `(j + 0.5) * in / out - 0.5`. Out-of-range taps are
//! mirrored about the border (`-1 -> 0`, `n -> n - 1`). There is no
//! anti-alias prefilter: downsampling by `s` evaluates the same four-tap
//! kernel at stride `s`.

use super::RasterImage;
use crate::error::{Error, Result};

pub const CUBIC_A: f64 = -0.5;

pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Four source indices and weights for every output position along one axis.
fn taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let src = (j as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let base = base as isize;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                idx[k] = reflect(base - 1 + k as isize, n_in);
                w[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

pub fn bicubic_resize(img: &RasterImage, out_h: usize, out_w: usize) -> Result<RasterImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bicubic_resize", format!("output {out_h}x{out_w}")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();

    let cols = taps(w, out_w);
    let mut horiz = vec![0.0; h * out_w * c];
    for y in 0..h {
        for (x, (idx, wt)) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * src[(y * w + idx[k]) * c + ch];
                }
                horiz[(y * out_w + x) * c + ch] = acc;
            }
        }
    }

    let rows = taps(h, out_h);
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, (idx, wt)) in rows.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * horiz[(idx[k] * out_w + x) * c + ch];
                }
                out[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    RasterImage::new(out_h, out_w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_shape() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert_eq!(cubic_weight(-1.5), cubic_weight(1.5));
        assert!(cubic_weight(1.5) < 0.0);
    }

    proptest! {
        #[test]
        fn weights_partition_unity(phase in 0.0f64..1.0) {
            let s: f64 = (0..4).map(|k| cubic_weight(phase - (k as f64 - 1.0))).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn weights_reproduce_linear(phase in 0.0f64..1.0) {
            // sum_k w_k * (k - 1) == phase: first-moment condition of linear precision
            let m: f64 = (0..4).map(|k| cubic_weight(phase - (k as f64 - 1.0)) * (k as f64 - 1.0)).sum();
            prop_assert!((m - phase).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = RasterImage::filled(12, 9, 3, 0.37).unwrap();
        for (h, w) in [(3, 2), (24, 18), (12, 9), (5, 31), (1, 1)] {
            let out = bicubic_resize(&img, h, w).unwrap();
            for v in out.data() {
                assert!((v - 0.37).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_exact_pass_through() {
        let img = RasterImage::from_fn(7, 5, 3, |y, x, c| ((y * 31 + x * 7 + c * 3) % 11) as f64 / 10.0).unwrap();
        assert_eq!(bicubic_resize(&img, 7, 5).unwrap(), img);
    }

    /// Direct 1-D kernel-sum oracle: resampling a ramp by cubic convolution
    /// evaluated tap by tap, without the separable two-pass machinery.
    fn oracle_1d(src: &[f64], n_out: usize) -> Vec<f64> {
        let n = src.len() as isize;
        let scale = src.len() as f64 / n_out as f64;
        (0..n_out)
            .map(|j| {
                let pos = (j as f64 + 0.5) * scale - 0.5;
                let mut acc = 0.0;
                for i in (pos.floor() as isize - 1)..=(pos.floor() as isize + 2) {
                    let mut r = i;
                    while r < 0 || r >= n {
                        r = if r < 0 { -r - 1 } else { 2 * n - r - 1 };
                    }
                    acc += cubic_weight(pos - i as f64) * src[r as usize];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn ramp_up_then_down_by_eight_reproduces_interior() {
        let ramp: Vec<f64> = (0..8).map(|x| 0.1 + 0.1 * x as f64).collect();
        let img = RasterImage::from_fn(8, 8, 1, |_, x, _| ramp[x]).unwrap();
        let up = bicubic_resize(&img, 64, 64).unwrap();
        let down = bicubic_resize(&up, 8, 8).unwrap();

        let up_1d = oracle_1d(&ramp, 64);
        let down_1d = oracle_1d(&up_1d, 8);
        for y in 0..8 {
            for x in 0..64 {
                assert!((up.get(y * 8, x, 0) - up_1d[x]).abs() <= 1e-12);
            }
            for x in 0..8 {
                assert!((down.get(y, x, 0) - down_1d[x]).abs() <= 1e-12);
            }
        }
        // Interior: both passes only read taps inside the ramp.
        for x in 2..6 {
            assert!((down.get(4, x, 0) - ramp[x]).abs() <= 1e-9, "x={x}");
        }
        for x in 12..52 {
            let expect = 0.1 + 0.1 * ((x as f64 + 0.5) / 8.0 - 0.5);
            assert!((up.get(3, x, 0) - expect).abs() <= 1e-9);
        }
    }

    #[test]
    fn eightfold_and_sixteenfold_downsampling() {
        let img = RasterImage::from_fn(512, 512, 3, |y, x, c| ((x + 2 * y + c) % 17) as f64 / 16.0).unwrap();
        assert_eq!(bicubic_resize(&img, 64, 64).unwrap().height(), 64);
        assert_eq!(bicubic_resize(&img, 32, 32).unwrap().width(), 32);
    }

    #[test]
    fn zero_output_is_rejected() {
        let img = RasterImage::filled(4, 4, 3, 0.0).unwrap();
        assert!(bicubic_resize(&img, 0, 4).is_err());
    }
}
