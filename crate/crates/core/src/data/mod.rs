//! Datasets: binary format readers, augmentation, batching and synthetic
//! fixtures.

pub mod augment;
pub mod batch;
pub mod cifar;
pub mod mnist;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use augment::{AugmentConfig, Normalization};
pub use batch::{Batch, BatchIter, BatchOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    MnistIdx,
    Cifar10Bin,
    Cifar100Bin,
    Synthetic,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Cifar100Bin => 100,
            _ => 10,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::MnistIdx),
            "cifar10" => Ok(DatasetKind::Cifar10Bin),
            "cifar100" => Ok(DatasetKind::Cifar100Bin),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub split: Split,
}

impl DatasetSource {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSource { kind, root: root.into(), split }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self.kind {
            DatasetKind::MnistIdx => mnist::load_mnist(&self.root, self.split),
            DatasetKind::Cifar10Bin | DatasetKind::Cifar100Bin => cifar::load_cifar(self.kind, &self.root, self.split),
            DatasetKind::Synthetic => Err(Error::Config(
                "synthetic data is generated in memory; see data::synthetic".into(),
            )),
        }
    }
}

/// Images in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.n != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", images.n, labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::OutOfRange(format!("label {l} with {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::shape("empty subset"));
        }
        Ok(Dataset { images: self.images.slice_batch(0, n)?, labels: self.labels[..n].to_vec(), num_classes: self.num_classes })
    }

    /// `n` samples drawn without replacement by a seeded shuffle.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::shape("empty selection"));
        }
        let parts: Vec<&[f32]> = idx.iter().map(|&i| self.images.sample(i)).collect();
        let mut data = Vec::with_capacity(parts.len() * self.images.sample_len());
        for p in parts {
            data.extend_from_slice(p);
        }
        let [_, c, h, w] = self.images.shape();
        Ok(Dataset {
            images: Tensor4::from_vec([idx.len(), c, h, w], data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }
}

/// Root for datasets: `$RESFEAT_DATA` if set, else `data/`.
pub fn default_root() -> PathBuf {
    std::env::var_os("RESFEAT_DATA").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    use std::io::Read;
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// First existing path among `names` under `root`, also trying a `.gz` suffix.
pub(crate) fn find_file(root: &Path, names: &[&str]) -> Result<PathBuf> {
    for n in names {
        for cand in [root.join(n), root.join(format!("{n}.gz"))] {
            if cand.is_file() {
                return Ok(cand);
            }
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("none of {names:?} found under {}", root.display()),
    )))
}
