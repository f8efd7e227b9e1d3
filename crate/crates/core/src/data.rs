//! Desk-scale datasets: synthetic generators and a reader for the public
//! CIFAR binary archives.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;

/// Environment variable pointing at a directory holding CIFAR binary archives.
pub const DATA_ROOT_ENV: &str = "QAT_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(channels, height, width)` of one image.
    pub shape: [usize; 3],
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Which dataset a run used; stored in experiment records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Linearly separable: class `k` brightens channel `k mod C`.
    Separable {
        classes: usize,
        size: usize,
        train: usize,
        val: usize,
        seed: u64,
    },
    /// Oriented gratings with random phase, colour and additive noise.
    Gratings {
        classes: usize,
        size: usize,
        train: usize,
        val: usize,
        noise: f64,
        seed: u64,
    },
    Cifar10,
    Cifar100,
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Separable { classes, size, .. } => format!("separable{classes}-{size}px"),
            DatasetSpec::Gratings { classes, size, noise, .. } => format!("gratings{classes}-{size}px-n{noise}"),
            DatasetSpec::Cifar10 => "cifar10".into(),
            DatasetSpec::Cifar100 => "cifar100".into(),
        }
    }

    /// Train and validation splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match *self {
            DatasetSpec::Separable { classes, size, train, val, seed } => {
                Ok((separable(train, classes, size, seed), separable(val, classes, size, seed ^ 0x5eed_0001)))
            }
            DatasetSpec::Gratings { classes, size, train, val, noise, seed } => Ok((
                gratings(train, classes, size, noise, seed),
                gratings(val, classes, size, noise, seed ^ 0x5eed_0001),
            )),
            DatasetSpec::Cifar10 => load_cifar(&dataset_root()?, CifarVariant::Ten),
            DatasetSpec::Cifar100 => load_cifar(&dataset_root()?, CifarVariant::Hundred),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        !matches!(self, DatasetSpec::Cifar10 | DatasetSpec::Cifar100)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.shape;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor4 { shape: [indices.len(), c, h, w], data }, labels)
    }
}

/// Random 4-pixel-padded crop plus horizontal flip, applied per sample in place.
pub fn augment_crop_flip<R: Rng + ?Sized>(x: &mut Tensor4, rng: &mut R) {
    const PAD: i64 = 4;
    let [n, c, h, w] = x.shape;
    let mut buf = vec![0.0; c * h * w];
    for b in 0..n {
        let dy = rng.random_range(-PAD..=PAD) as isize;
        let dx = rng.random_range(-PAD..=PAD) as isize;
        let flip = rng.random_bool(0.5);
        let img = &x.data[b * c * h * w..(b + 1) * c * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let si = i as isize + dy;
                    let jj = if flip { w - 1 - j } else { j };
                    let sj = jj as isize + dx;
                    buf[(ch * h + i) * w + j] = if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        0.0
                    } else {
                        img[(ch * h + si as usize) * w + sj as usize]
                    };
                }
            }
        }
        x.data[b * c * h * w..(b + 1) * c * h * w].copy_from_slice(&buf);
    }
}

/// Three-channel images where class `k` adds +1 to channel `k mod 3` on top of
/// uniform noise in `[-0.3, 0.3]`; separable by per-channel means.
pub fn separable(n: usize, classes: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for ch in 0..3 {
            let offset = if ch == k % 3 { 1.0 } else { 0.0 };
            images.extend((0..plane).map(|_| offset + rng.random_range(-0.3..0.3)));
        }
        labels.push(k);
    }
    Dataset { shape: [3, size, size], classes, images, labels }
}

/// Sinusoidal gratings: class `k` fixes the orientation `pi * k / classes` and
/// alternates between two spatial frequencies; phase, contrast and colour
/// mixing are random per sample, plus Gaussian pixel noise of std `noise`.
pub fn gratings(n: usize, classes: usize, size: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let plane = size * size;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let theta = PI * k as f64 / classes as f64;
        let cycles = if k.is_multiple_of(2) { 2.0 } else { 3.5 };
        let freq = 2.0 * PI * cycles / size as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.6..1.0);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..1.0));
        let (s, c) = theta.sin_cos();
        for mix in colour {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * c + y as f64 * s) * freq + phase;
                    images.push(contrast * mix * u.sin() + gauss.sample(&mut rng));
                }
            }
        }
        labels.push(k);
    }
    Dataset { shape: [3, size, size], classes, images, labels }
}

pub fn dataset_root() -> Result<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::InvalidArgument(format!("{DATA_ROOT_ENV} is not set")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Ten,
    Hundred,
}

const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Parses CIFAR binary records. CIFAR-10 records carry one label byte,
/// CIFAR-100 two (coarse, fine); the fine label is used.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let label_bytes = match variant {
        CifarVariant::Ten => 1,
        CifarVariant::Hundred => 2,
    };
    let record = label_bytes + 3072;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::InvalidArgument(format!(
            "CIFAR archive of {} bytes is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let classes = if variant == CifarVariant::Ten { 10 } else { 100 };
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(record) {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::InvalidArgument(format!("CIFAR label {label} out of range")));
        }
        labels.push(label);
        for (ch, px) in rec[label_bytes..].chunks(1024).enumerate() {
            images.extend(px.iter().map(|&p| (p as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
        }
    }
    Ok(Dataset { shape: [3, 32, 32], classes, images, labels })
}

fn read_archive(path: &Path, variant: CifarVariant, into: &mut Option<Dataset>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let part = parse_cifar(&bytes, variant)?;
    match into {
        Some(d) => {
            d.images.extend(part.images);
            d.labels.extend(part.labels);
        }
        None => *into = Some(part),
    }
    Ok(())
}

/// Loads train and test splits from the standard binary layout under `root`
/// (`cifar-10-batches-bin/` or `cifar-100-binary/`).
pub fn load_cifar(root: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let (dir, train_files, test_file): (&str, Vec<String>, &str) = match variant {
        CifarVariant::Ten => {
            ("cifar-10-batches-bin", (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), "test_batch.bin")
        }
        CifarVariant::Hundred => ("cifar-100-binary", vec!["train.bin".into()], "test.bin"),
    };
    let base = root.join(dir);
    let mut train = None;
    for f in &train_files {
        read_archive(&base.join(f), variant, &mut train)?;
    }
    let mut test = None;
    read_archive(&base.join(test_file), variant, &mut test)?;
    Ok((train.expect("at least one archive"), test.expect("test archive")))
}
