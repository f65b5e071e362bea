//! Held-out scene sets, their on-disk PNG layout and the model-space view.
//!
//! A dataset directory holds, per scene `NNNN`: `NNNN_hr.png`,
//! `NNNN_ref.png`, `NNNN_lr.png`, `NNNN_lr_up.png` and `NNNN_mask.png`,
//! plus `dataset.txt` (generation settings) and `manifest.txt`
//! (`file pixel-digest` per line).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::scene::{generate_scene, make_pair, RefSrPair, MAX_JITTER};
use crate::config::{render_kv, KvReader};
use crate::error::{Error, Result};
use crate::imaging::{pixel_digest, read_mask_png, read_png, write_mask_png, write_png, RasterImage};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Degradation factors the harness accepts.
pub const SCALES: [usize; 2] = [8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub image_size: usize,
    pub scale: usize,
    pub change_min: f64,
    pub change_max: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 64,
            image_size: 32,
            scale: 8,
            change_min: 0.1,
            change_max: 0.5,
            jitter: 1.0,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !SCALES.contains(&self.scale) {
            return fail(format!("scale must be one of {SCALES:?}, got {}", self.scale));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.scale) {
            return fail(format!("scale {} must divide image size {}", self.scale, self.image_size));
        }
        if !(0.0 <= self.change_min && self.change_min <= self.change_max && self.change_max <= 1.0) {
            return fail(format!(
                "change range [{}, {}] must satisfy 0 <= min <= max <= 1",
                self.change_min, self.change_max
            ));
        }
        if !(0.0..=MAX_JITTER).contains(&self.jitter) {
            return fail(format!("jitter must be in [0, {MAX_JITTER}], got {}", self.jitter));
        }
        Ok(())
    }

    /// Scene seed and change fraction of draw `rng`.
    pub fn draw_scene(&self, rng: &mut SeededRng) -> (u64, f64) {
        let seed = rng.next_u64();
        let fraction = rng.uniform_range(self.change_min, self.change_max);
        (seed, fraction)
    }

    pub fn make_item(&self, index: usize, scene_seed: u64, change_fraction: f64) -> Result<DatasetItem> {
        let scene = generate_scene(scene_seed, self.image_size, change_fraction, self.jitter)?;
        Ok(DatasetItem {
            index,
            scene_seed,
            change_fraction,
            pair: make_pair(&scene, self.scale)?,
        })
    }

    /// Keys `count`, `image_size`, `scale`, `change_min`, `change_max`,
    /// `jitter` and `data_seed`.
    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("count", self.count.to_string()),
            ("image_size", self.image_size.to_string()),
            ("scale", self.scale.to_string()),
            ("change_min", self.change_min.to_string()),
            ("change_max", self.change_max.to_string()),
            ("jitter", self.jitter.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }

    /// Reads the dataset keys except `image_size`, which the caller owns.
    pub fn read(r: &mut KvReader, image_size: usize) -> Result<Self> {
        let mut c = DatasetConfig {
            image_size,
            ..Default::default()
        };
        r.take_into("count", &mut c.count)?;
        r.take_into("scale", &mut c.scale)?;
        r.take_into("change_min", &mut c.change_min)?;
        r.take_into("change_max", &mut c.change_max)?;
        r.take_into("jitter", &mut c.jitter)?;
        r.take_into("data_seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        render_kv(self.kv_pairs())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut size = DatasetConfig::default().image_size;
        r.take_into("image_size", &mut size)?;
        let c = DatasetConfig::read(&mut r, size)?;
        r.finish()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub index: usize,
    pub scene_seed: u64,
    pub change_fraction: f64,
    pub pair: RefSrPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub items: Vec<DatasetItem>,
}

const KINDS: [&str; 5] = ["hr", "ref", "lr", "lr_up", "mask"];

impl Dataset {
    /// Scenes `0..count`; scene `i` is keyed by `(seed, i)` alone, so a
    /// larger set extends a smaller one.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let items = (0..config.count)
            .into_par_iter()
            .map(|i| {
                let mut rng = SeededRng::derive(config.seed, &format!("dataset.{i}"));
                let (seed, fraction) = config.draw_scene(&mut rng);
                config.make_item(i, seed, fraction)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: config.clone(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The first `n` items.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            config: DatasetConfig {
                count: n.min(self.len()),
                ..self.config.clone()
            },
            items: self.items.iter().take(n).cloned().collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for item in &self.items {
            let p = &item.pair;
            for (kind, img) in [
                ("hr", &p.hr),
                ("ref", &p.reference),
                ("lr", &p.lr),
                ("lr_up", &p.lr_up),
            ] {
                let name = format!("{:04}_{kind}.png", item.index);
                write_png(dir.join(&name), img)?;
                manifest.push_str(&format!("{name} {}\n", pixel_digest(img)));
            }
            let name = format!("{:04}_mask.png", item.index);
            write_mask_png(dir.join(&name), &p.mask)?;
            manifest.push_str(&format!("{name} {}\n", pixel_digest(&p.mask.to_image())));
        }
        let mut meta = self.config.to_kv();
        for item in &self.items {
            meta.push_str(&format!(
                "# scene {:04} seed {} change {}\n",
                item.index, item.scene_seed, item.change_fraction
            ));
        }
        std::fs::write(dir.join("dataset.txt"), meta)?;
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`], checking every file
    /// against the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("dataset.txt"))?;
        let config = DatasetConfig::from_kv(&text)?;
        let mut seeds = std::collections::BTreeMap::new();
        for line in text.lines().filter_map(|l| l.trim().strip_prefix("# scene ")) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if let [idx, "seed", seed, "change", change] = f[..] {
                let parse_err = || Error::Format {
                    what: "dataset.txt",
                    detail: format!("bad scene line `{line}`"),
                };
                let idx: usize = idx.parse().map_err(|_| parse_err())?;
                seeds.insert(
                    idx,
                    (seed.parse::<u64>().map_err(|_| parse_err())?, change.parse::<f64>().map_err(|_| parse_err())?),
                );
            }
        }
        let manifest: std::collections::BTreeMap<String, String> = std::fs::read_to_string(dir.join("manifest.txt"))?
            .lines()
            .filter_map(|l| l.split_once(' '))
            .map(|(a, b)| (a.to_string(), b.trim().to_string()))
            .collect();
        let check = |name: &str, img: &RasterImage| -> Result<()> {
            match manifest.get(name) {
                Some(d) if *d == pixel_digest(img) => Ok(()),
                Some(_) => Err(Error::Format {
                    what: "dataset",
                    detail: format!("{name} does not match its manifest digest"),
                }),
                None => Err(Error::Format {
                    what: "dataset",
                    detail: format!("{name} is missing from the manifest"),
                }),
            }
        };
        let mut items = Vec::with_capacity(config.count);
        for index in 0..config.count {
            let path = |kind: &str| dir.join(format!("{index:04}_{kind}.png"));
            let name = |kind: &str| format!("{index:04}_{kind}.png");
            let [hr, reference, lr, lr_up] = ["hr", "ref", "lr", "lr_up"].map(|k| read_png(path(k)));
            let (hr, reference, lr, lr_up) = (hr?, reference?, lr?, lr_up?);
            let mask = read_mask_png(path("mask"))?;
            for (k, img) in KINDS.iter().zip([&hr, &reference, &lr, &lr_up, &mask.to_image()]) {
                check(&name(k), img)?;
            }
            let (scene_seed, change_fraction) = seeds.get(&index).copied().unwrap_or((0, mask.fraction()));
            items.push(DatasetItem {
                index,
                scene_seed,
                change_fraction,
                pair: RefSrPair {
                    lr,
                    lr_up,
                    reference,
                    hr,
                    mask,
                },
            });
        }
        Ok(Dataset { config, items })
    }
}

/// What the Ref branch sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RefMode {
    #[default]
    Reference,
    /// Uniform noise in place of the reference (LR-only control).
    Noise,
}

impl fmt::Display for RefMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefMode::Reference => "reference",
            RefMode::Noise => "noise",
        })
    }
}

impl FromStr for RefMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(RefMode::Reference),
            "noise" => Ok(RefMode::Noise),
            _ => Err(Error::Config(format!("unknown ref_mode `{s}` (reference | noise)"))),
        }
    }
}

/// `[0, 1]` raster to the `[-1, 1]` model range.
pub fn to_model_space(img: &RasterImage) -> Tensor {
    let shape = vec![img.height(), img.width(), img.channels()];
    Tensor::from_parts(shape, img.data().iter().map(|v| 2.0 * v - 1.0).collect())
}

/// Inverse of [`to_model_space`], without clamping.
pub fn from_model_space(t: &Tensor) -> Result<RasterImage> {
    RasterImage::from_tensor(&t.map("from_model_space", |v| 0.5 * (v + 1.0))?)
}

/// The Ref-branch input for `pair` under `mode`; noise is drawn from `rng`.
pub fn reference_input(pair: &RefSrPair, mode: RefMode, rng: &mut SeededRng) -> Tensor {
    match mode {
        RefMode::Reference => to_model_space(&pair.reference),
        RefMode::Noise => {
            let shape = [pair.hr.height(), pair.hr.width(), pair.hr.channels()];
            let u = rng.uniform_tensor(&shape);
            Tensor::from_parts(shape.to_vec(), u.data().iter().map(|v| 2.0 * v - 1.0).collect())
        }
    }
}
