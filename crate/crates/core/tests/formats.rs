//! On-disk formats read back by hand, the way an outside tool would.

use dsdit::harness::{Dataset, ExperimentConfig};
use dsdit::imaging::{pixel_digest, read_mask_png, read_png};
use dsdit::model::{load_checkpoint, save_checkpoint, Architecture, Checkpoint, Model, ModelConfig};
use dsdit::plw::InjectionKind;
use dsdit::rng::SeededRng;
use dsdit::tensor::{read_dtns, write_dtns, Tensor};
use dsdit::Error;
use sha2::{Digest, Sha256};

struct Bytes<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Bytes<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        s
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn dtns(&mut self) -> (Vec<usize>, Vec<f64>) {
        assert_eq!(self.take(4), b"DTNS");
        let rank = self.u32() as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u64() as usize).collect();
        let data = (0..shape.iter().product::<usize>()).map(|_| self.f64()).collect();
        (shape, data)
    }
}

#[test]
fn dtns_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dtns");
    let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, 7.0, -0.0]).unwrap();
    write_dtns(&path, &t).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert_eq!(raw.len(), 4 + 4 + 2 * 8 + 6 * 8);
    let mut b = Bytes { buf: &raw, at: 0 };
    let (shape, data) = b.dtns();
    assert_eq!(shape, [2, 3]);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&data), bits(t.data()));
    assert!(read_dtns(&path).unwrap().bit_eq(&t));

    let scalar = Tensor::new(Vec::<usize>::new(), vec![4.0]).unwrap();
    write_dtns(&path, &scalar).unwrap();
    assert_eq!(std::fs::read(&path).unwrap().len(), 4 + 4 + 8);
}

#[test]
fn checkpoint_container() {
    let cfg = ModelConfig::tiny(8, 4, 8, 2, 1);
    let model = Model::build(&cfg).unwrap();
    let rng = SeededRng::new(5).state();
    let ck = Checkpoint::from_model(&model, None, 7, rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dsck");
    save_checkpoint(&path, &ck).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert_eq!(raw, ck.to_bytes().unwrap());

    let mut b = Bytes { buf: &raw, at: 0 };
    assert_eq!(b.take(4), b"DSCK");
    assert_eq!(b.u32(), 1);
    let len = b.u64() as usize;
    let text = std::str::from_utf8(b.take(len)).unwrap();
    assert!(text.contains("dim = 8\n"), "{text}");
    assert_eq!(b.u64(), 7);
    b.take(32 + 8 + 16);
    let count = b.u64() as usize;
    let params: Vec<_> = model.params().iter().collect();
    assert_eq!(count, params.len());
    let mut last = String::new();
    for (name, value) in params {
        let n = b.u64() as usize;
        let got = std::str::from_utf8(b.take(n)).unwrap().to_string();
        assert_eq!(&got, name);
        assert!(got > last, "table is not in name order");
        let (shape, data) = b.dtns();
        assert_eq!(shape, value.shape());
        assert_eq!(data, value.data());
        last = got;
    }
    assert_eq!(b.take(1), [0], "no optimizer state was stored");
    let body = b.at;
    let stored = b.u64();
    assert_eq!(b.at, raw.len());
    let sha = Sha256::digest(&raw[..body]);
    assert_eq!(stored, u64::from_le_bytes(sha[..8].try_into().unwrap()));

    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);

    let mut damaged = raw.clone();
    damaged[body - 3] ^= 0x10;
    std::fs::write(&path, &damaged).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Digest { .. })));
    std::fs::write(&path, &raw[..raw.len() - 5]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn documented_config_keys() {
    let text = "\
# every documented key
image_size = 16
patch = 2
dim = 32
heads = 4
blocks = 3
arch = dsdit
injection = variant_b
lr = 0.0005
wd = 0.01
steps = 123
batch = 4
seed = 9
omega = 1.1
lambda_weak = 0.25
sampler_steps = 12
";
    let c = ExperimentConfig::from_kv(text).unwrap();
    let m = &c.model;
    assert_eq!((m.image_size, m.patch, m.dim, m.heads, m.blocks), (16, 2, 32, 4, 3));
    assert_eq!((m.arch, m.injection, m.seed), (Architecture::Dsdit, InjectionKind::VariantB, 9));
    assert_eq!((c.train.adam.lr, c.train.adam.weight_decay), (0.0005, 0.01));
    assert_eq!((c.train.steps, c.train.batch), (123, 4));
    assert_eq!((c.sampler.omega, c.sampler.lambda_weak, c.sampler.steps, c.sampler.seed), (1.1, 0.25, 12, 9));
    assert_eq!(c.data.image_size, 16);
    assert_eq!(ExperimentConfig::from_kv(&c.to_kv()).unwrap(), c);

    let m3 = ExperimentConfig::from_kv("arch = m3dit\ninjection = none").unwrap();
    assert_eq!(m3.model.arch, Architecture::M3dit);
    assert!(matches!(ExperimentConfig::from_kv("arch = m3dit\ninjection = plw"), Err(Error::Config(_))));
}

#[test]
fn dataset_directory() {
    let cfg = dsdit::harness::DatasetConfig {
        count: 2,
        image_size: 16,
        ..Default::default()
    };
    let data = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2 * 5);
    for line in manifest.lines() {
        let (name, digest) = line.split_once(' ').unwrap();
        assert!(name.len() > 5 && name[..4].bytes().all(|c| c.is_ascii_digit()), "{name}");
        let img = if name.ends_with("_mask.png") {
            read_mask_png(dir.path().join(name)).unwrap().to_image()
        } else {
            read_png(dir.path().join(name)).unwrap()
        };
        assert_eq!(pixel_digest(&img), digest, "{name}");
        if !name.ends_with("_lr.png") {
            assert_eq!((img.height(), img.width()), (16, 16));
        }
    }
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in data.items.iter().zip(&back.items) {
        assert_eq!(a.pair.mask, b.pair.mask);
        assert_eq!(pixel_digest(&a.pair.hr), pixel_digest(&b.pair.hr));
    }

    let first = manifest.lines().next().unwrap().split_once(' ').unwrap().0;
    let img = read_png(dir.path().join(first)).unwrap();
    let flipped = img.map(|v| 1.0 - v).unwrap();
    dsdit::imaging::write_png(dir.path().join(first), &flipped).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}
