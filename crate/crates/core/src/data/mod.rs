//! Datasets: IDX files, synthetic blobs, and affine augmentation.

mod augment;
mod idx;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::losses::one_hot;
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

pub use augment::{affine_augment, affine_transform, AffineConfig, AffineParams};
pub use idx::{load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "DISCRIM_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },
    #[error("no {split} files for dataset under {dir}")]
    Missing { split: &'static str, dir: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn idx_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid(format!(
                "unknown split {other:?}, expected train or test"
            ))),
        }
    }
}

/// Images as `N x H x W x C` scaled to [0, 1], with class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be N x H x W x C, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Label { index, label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[H, W, C]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.images.len() / self.len().max(1);
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Stacks the listed samples into an image batch and one-hot labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let [h, w, c] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new(vec![indices.len(), h, w, c], data)?,
            one_hot(&labels, self.classes),
        ))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, _) = self.batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Dataset root from an explicit path, falling back to `DISCRIM_DATA_DIR`.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Loads an MNIST-style split from `dir`, accepting plain or gzipped files
/// with either `-idx3-ubyte` or `.idx3-ubyte` naming.
pub fn load_idx_split(dir: &Path, split: Split, classes: usize) -> Result<Dataset> {
    let find = |kind: &str, dims: u8| -> Option<PathBuf> {
        let p = split.idx_prefix();
        [
            format!("{p}-{kind}-idx{dims}-ubyte"),
            format!("{p}-{kind}.idx{dims}-ubyte"),
        ]
        .into_iter()
        .flat_map(|base| [format!("{base}.gz"), base])
        .map(|name| dir.join(name))
        .find(|path| path.is_file())
    };
    let missing = || DataError::Missing {
        split: split.name(),
        dir: dir.to_path_buf(),
    };
    let images = find("images", 3).ok_or_else(missing)?;
    let labels = find("labels", 1).ok_or_else(missing)?;
    let ds = load_idx(&images, &labels)?;
    Dataset::new(ds.images, ds.labels, classes.max(ds.classes))
}

/// Gaussian blobs with unit noise per value. Class `k` owns the `k`-th
/// contiguous slice of each sample and its mean is constant on that slice,
/// with norm `separation / sqrt(2)`, so class means sit `separation` apart.
/// With more classes than values per sample, the means point along random
/// unit directions instead.
pub fn synth_blobs(
    classes: usize,
    shape: [usize; 3],
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(DataError::Invalid("synthetic blobs need at least 2 classes".into()));
    }
    let dim: usize = shape.iter().product();
    if dim == 0 {
        return Err(DataError::Invalid("empty sample shape".into()));
    }
    let mut rng = Rng::derive(seed, crate::rng::streams::DATA);
    let scale = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            if classes <= dim {
                // Disjoint contiguous supports keep the means orthogonal and
                // give convolutions a spatially coherent signal.
                let owner = |j: usize| j * classes / dim;
                let support = (0..dim).filter(|&j| owner(j) == k).count() as f64;
                let level = scale / support.sqrt();
                (0..dim).map(|j| if owner(j) == k { level } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| scale * x / norm).collect()
            }
        })
        .collect();
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for (k, mean) in means.iter().enumerate() {
            data.extend(mean.iter().map(|m| m + rng.normal()));
            labels.push(k);
        }
    }
    let [h, w, c] = shape;
    Dataset::new(Tensor::new(vec![n, h, w, c], data)?, labels, classes)
}
