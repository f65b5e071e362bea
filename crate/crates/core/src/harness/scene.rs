//! Procedural HR / Ref pairs with a controlled change mask.

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, Mask, RasterImage};
use crate::rng::SeededRng;

/// Half-width of the per-channel gain range at unit jitter.
pub const GAIN_SPREAD: f64 = 0.1;
/// Half-width of the per-channel offset range at unit jitter.
pub const OFFSET_SPREAD: f64 = 0.05;
/// Largest jitter magnitude accepted (keeps gains positive).
pub const MAX_JITTER: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub hr: RasterImage,
    pub reference: RasterImage,
    /// `true` where the reference content changed.
    pub mask: Mask,
    pub change_fraction: f64,
    pub jitter: f64,
    pub seed: u64,
}

/// Super-resolution inputs derived from a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RefSrPair {
    pub lr: RasterImage,
    /// `lr` resized back to the HR grid.
    pub lr_up: RasterImage,
    pub reference: RasterImage,
    pub hr: RasterImage,
    pub mask: Mask,
}

/// Lattice value noise with smoothstep blending; `cells` lattice cells
/// span the image side.
fn value_noise(rng: &mut SeededRng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.uniform()).collect();
    let smooth = |u: f64| u * u * (3.0 - 2.0 * u);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f64 + 0.5) * cells as f64 / size as f64;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = (x as f64 + 0.5) * cells as f64 / size as f64;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |j: usize, i: usize| lattice[j * n + i];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn random_color(rng: &mut SeededRng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

/// Multi-octave colored noise with rectangles ("buildings") and straight
/// strips ("roads") drawn over it.
pub fn procedural_texture(rng: &mut SeededRng, size: usize) -> Result<RasterImage> {
    if size < 4 {
        return Err(Error::Contract(format!("texture side {size} is below 4")));
    }
    let (low, high) = (random_color(rng), random_color(rng));
    let mut lum = vec![0.0; size * size];
    let mut amp = 0.5;
    let mut total = 0.0;
    let mut cells = 2;
    while cells <= size / 2 {
        let layer = value_noise(rng, size, cells);
        for (l, v) in lum.iter_mut().zip(&layer) {
            *l += amp * v;
        }
        total += amp;
        amp *= 0.6;
        cells *= 2;
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for l in &lum {
        let u = l / total;
        for c in 0..3 {
            data.push(low[c] + (high[c] - low[c]) * u);
        }
    }

    let mut paint = |y0: usize, x0: usize, h: usize, w: usize, color: [f64; 3]| {
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                data[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    };
    let max_side = (size / 3).max(2);
    for _ in 0..2 + rng.below(4) {
        let h = 2 + rng.below(max_side - 1);
        let w = 2 + rng.below(max_side - 1);
        let (y0, x0) = (rng.below(size), rng.below(size));
        let color = random_color(rng);
        paint(y0, x0, h, w, color);
        if h > 3 && w > 3 {
            // roof line
            let shade = color.map(|v| v * 0.6);
            paint(y0 + h / 2, x0, 1, w, shade);
        }
    }
    for _ in 0..1 + rng.below(2) {
        let width = 1 + rng.below(2);
        let at = rng.below(size);
        let gray = 0.3 + 0.5 * rng.uniform();
        if rng.below(2) == 0 {
            paint(at, 0, width, size, [gray; 3]);
        } else {
            paint(0, at, size, width, [gray; 3]);
        }
    }
    Ok(RasterImage::new(size, size, 3, data)?.clamp01())
}

/// Smooth blobs covering `round(fraction * size^2)` pixels: a low-frequency
/// field thresholded at its rank quantile.
pub fn blob_mask(rng: &mut SeededRng, size: usize, fraction: f64) -> Result<Mask> {
    check_fraction(fraction)?;
    let coarse = value_noise(rng, size, 2);
    let fine = value_noise(rng, size, 4.min(size));
    let field: Vec<f64> = coarse.iter().zip(&fine).map(|(a, b)| a + 0.5 * b).collect();
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let changed = (fraction * field.len() as f64).round() as usize;
    let mut bits = vec![false; field.len()];
    for &i in &order[..changed] {
        bits[i] = true;
    }
    Mask::new(size, size, bits)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Contract(format!("change fraction {fraction} is outside [0, 1]")));
    }
    Ok(())
}

/// Per-channel `gain * v + offset`, clamped to `[0, 1]`.
fn photometric_jitter(img: &RasterImage, rng: &mut SeededRng, jitter: f64) -> Result<RasterImage> {
    let c = img.channels();
    let gains: Vec<f64> = (0..c)
        .map(|_| rng.uniform_range(1.0 - GAIN_SPREAD * jitter, 1.0 + GAIN_SPREAD * jitter))
        .collect();
    let offsets: Vec<f64> = (0..c)
        .map(|_| rng.uniform_range(-OFFSET_SPREAD * jitter, OFFSET_SPREAD * jitter))
        .collect();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (gains[i % c] * v + offsets[i % c]).clamp(0.0, 1.0))
        .collect();
    RasterImage::new(img.height(), img.width(), c, data)
}

/// HR texture, change mask and the matching reference. Outside the mask the
/// reference is the HR scene under photometric jitter; inside it comes from
/// an independent texture.
pub fn generate_scene(seed: u64, size: usize, change_fraction: f64, jitter: f64) -> Result<SyntheticScene> {
    check_fraction(change_fraction)?;
    if !(0.0..=MAX_JITTER).contains(&jitter) {
        return Err(Error::Contract(format!("jitter {jitter} is outside [0, {MAX_JITTER}]")));
    }
    let hr = procedural_texture(&mut SeededRng::derive(seed, "scene.hr"), size)?;
    let mask = blob_mask(&mut SeededRng::derive(seed, "scene.mask"), size, change_fraction)?;
    let other = procedural_texture(&mut SeededRng::derive(seed, "scene.changed"), size)?;
    let mut data = hr.data().to_vec();
    for (i, &changed) in mask.bits().iter().enumerate() {
        if changed {
            data[i * 3..i * 3 + 3].copy_from_slice(&other.data()[i * 3..i * 3 + 3]);
        }
    }
    let swapped = RasterImage::new(size, size, 3, data)?;
    let reference = photometric_jitter(&swapped, &mut SeededRng::derive(seed, "scene.jitter"), jitter)?;
    Ok(SyntheticScene {
        hr,
        reference,
        mask,
        change_fraction,
        jitter,
        seed,
    })
}

/// Bicubic degradation by `scale` and bicubic upsampling back.
pub fn make_pair(scene: &SyntheticScene, scale: usize) -> Result<RefSrPair> {
    let (h, w) = (scene.hr.height(), scene.hr.width());
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Config(format!("scale {scale} must divide the {h}x{w} image")));
    }
    let lr = bicubic_resize(&scene.hr, h / scale, w / scale)?.clamp01();
    let lr_up = bicubic_resize(&lr, h, w)?.clamp01();
    Ok(RefSrPair {
        lr,
        lr_up,
        reference: scene.reference.clone(),
        hr: scene.hr.clone(),
        mask: scene.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;
    use proptest::prelude::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn no_change_and_no_jitter_copies_hr() {
        for seed in 0..10 {
            let s = generate_scene(seed, 32, 0.0, 0.0).unwrap();
            assert_eq!(s.reference, s.hr);
            assert_eq!(s.mask.count(), 0);
        }
    }

    #[test]
    fn full_change_decorrelates() {
        let mut total = 0.0;
        let seeds = 100;
        for seed in 0..seeds {
            let s = generate_scene(seed, 32, 1.0, 0.0).unwrap();
            assert_eq!(s.mask.count(), 32 * 32);
            total += pearson(s.hr.data(), s.reference.data());
        }
        let mean = total / seeds as f64;
        assert!(mean.abs() <= 0.1, "mean correlation {mean}");
    }

    #[test]
    fn mask_area_tracks_fraction() {
        for seed in 0..100 {
            let f = (seed as f64 * 0.37) % 1.0;
            let s = generate_scene(seed, 32, f, 1.0).unwrap();
            let area = s.mask.bits().iter().filter(|&&b| b).count() as f64 / 1024.0;
            assert!((area - f).abs() <= 0.05, "seed {seed}: {area} vs {f}");
        }
    }

    #[test]
    fn changed_region_uses_independent_texture() {
        // the changed-region pixels do not depend on the HR stream: two
        // scenes differing only in fraction share their unchanged pixels
        let a = generate_scene(5, 32, 0.3, 0.0).unwrap();
        for (i, &changed) in a.mask.bits().iter().enumerate() {
            let same = (0..3).all(|c| a.reference.data()[i * 3 + c] == a.hr.data()[i * 3 + c]);
            if !changed {
                assert!(same);
            }
        }
        let differing = a
            .mask
            .bits()
            .iter()
            .enumerate()
            .filter(|(i, &m)| m && (0..3).any(|c| a.reference.data()[i * 3 + c] != a.hr.data()[i * 3 + c]))
            .count();
        assert!(differing * 10 > a.mask.count() * 9);
    }

    #[test]
    fn jitter_stays_within_declared_bounds() {
        let j = 1.0;
        for seed in 0..20 {
            let s = generate_scene(seed, 16, 0.25, j).unwrap();
            for (i, &changed) in s.mask.bits().iter().enumerate() {
                if changed {
                    continue;
                }
                for c in 0..3 {
                    let (h, r) = (s.hr.data()[i * 3 + c], s.reference.data()[i * 3 + c]);
                    let lo = ((1.0 - GAIN_SPREAD * j) * h - OFFSET_SPREAD * j).clamp(0.0, 1.0);
                    let hi = ((1.0 + GAIN_SPREAD * j) * h + OFFSET_SPREAD * j).clamp(0.0, 1.0);
                    assert!(r >= lo - 1e-15 && r <= hi + 1e-15, "{r} not in [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(generate_scene(0, 32, -0.1, 0.0).is_err());
        assert!(generate_scene(0, 32, 1.1, 0.0).is_err());
        assert!(generate_scene(0, 32, 0.5, -1.0).is_err());
        assert!(generate_scene(0, 2, 0.5, 0.0).is_err());
        let s = generate_scene(0, 32, 0.5, 1.0).unwrap();
        assert!(make_pair(&s, 5).is_err());
        assert!(make_pair(&s, 0).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_scene(9, 32, 0.4, 1.0).unwrap(), generate_scene(9, 32, 0.4, 1.0).unwrap());
        assert_ne!(generate_scene(9, 32, 0.4, 1.0).unwrap().hr, generate_scene(10, 32, 0.4, 1.0).unwrap().hr);
    }

    #[test]
    fn unit_scale_pair_is_pass_through() {
        let s = generate_scene(3, 32, 0.2, 1.0).unwrap();
        let p = make_pair(&s, 1).unwrap();
        assert_eq!(p.lr_up, s.hr);
        assert_eq!(p.lr, s.hr);
    }

    #[test]
    fn eightfold_and_sixteenfold_pairs() {
        let s = generate_scene(4, 32, 0.2, 1.0).unwrap();
        for (scale, side) in [(8, 4), (16, 2)] {
            let p = make_pair(&s, scale).unwrap();
            assert_eq!((p.lr.height(), p.lr.width()), (side, side));
            assert_eq!((p.lr_up.height(), p.lr_up.width()), (32, 32));
            let q = psnr(&p.lr_up, &p.hr).unwrap();
            assert!(q.is_finite() && q < 60.0, "{q}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn exact_mask_count(seed in any::<u64>(), f in 0.0f64..=1.0) {
            let m = blob_mask(&mut SeededRng::new(seed), 16, f).unwrap();
            prop_assert_eq!(m.count(), (f * 256.0).round() as usize);
        }
    }
}
