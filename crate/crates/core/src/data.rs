//! Datasets, MNIST IDX parsing and seeded batching.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::tensor::Tensor;

/// Overrides the directory searched for MNIST files.
pub const DATA_DIR_ENV: &str = "DIFFGATE_DATA_DIR";
pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const DEFAULT_BATCH_SIZE: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic {found}, expected {expected}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes after the header, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// `inputs` has shape `[N, ...]`; labels index classes `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self, DataError> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(DataError::Invalid(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!(
                "label {l} >= {n_classes} classes"
            )));
        }
        if !inputs.is_finite() {
            return Err(DataError::Invalid("non-finite input".into()));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example feature shape.
    pub fn feature_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn example_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let per = self.example_len();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.feature_shape());
        Dataset {
            inputs: Tensor::new(shape, data).expect("consistent selection"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n` examples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX file of unsigned bytes: returns dimensions and payload.
fn parse_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let bytes = read_file(path)?;
    let truncated = |expected, found| DataError::Truncated {
        path: path.to_path_buf(),
        expected,
        found,
    };
    if bytes.len() < 4 {
        return Err(truncated(4, bytes.len()));
    }
    let magic = be_u32(&bytes, 0);
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header, bytes.len()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| be_u32(&bytes, 4 + 4 * d) as usize)
        .collect();
    let len: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < len {
        return Err(truncated(len, body.len()));
    }
    Ok((dims, body[..len].to_vec()))
}

/// Loads an IDX image/label pair (raw or gzipped). Pixels are scaled by 1/255.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (dims, pixels) = parse_idx(images, IMAGE_MAGIC)?;
    let (ldims, label_bytes) = parse_idx(labels, LABEL_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let mut shape = vec![dims[0], 1];
    shape.extend_from_slice(&dims[1..]);
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let inputs = Tensor::new(shape, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, n_classes)
}

/// Train and test splits found in `dir`, using the standard MNIST file names
/// with or without a `.gz` suffix.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let find = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let train = load_mnist_idx(
        &find("train-images-idx3-ubyte"),
        &find("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &find("t10k-images-idx3-ubyte"),
        &find("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// `$DIFFGATE_DATA_DIR` if set, otherwise `fallback`.
pub fn data_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}

/// Writes unsigned-byte IDX data (uncompressed).
pub fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> io::Result<()> {
    assert_eq!(
        dims.len(),
        (magic & 0xff) as usize,
        "magic encodes the rank"
    );
    let mut f = io::BufWriter::new(File::create(path)?);
    f.write_all(&magic.to_be_bytes())?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        f.write_all(&d.to_be_bytes())?;
    }
    f.write_all(payload)?;
    f.flush()
}

/// Gaussian clusters in `[0, 1]^dim`: example `i` has label `i mod n_classes`,
/// class means are drawn uniformly in a box and kept at least four noise
/// standard deviations apart.
pub fn synthetic_blobs(n: usize, n_classes: usize, dim: usize, seed: u64) -> Dataset {
    assert!(
        n_classes >= 2 && n >= n_classes && dim >= 1,
        "need n >= n_classes >= 2"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0;
    let mut half_width = 4.0;
    let mut misses = 0;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while means.len() < n_classes {
        let spread = Uniform::new(-half_width, half_width).expect("valid range");
        let m: Vec<f64> = (0..dim).map(|_| spread.sample(&mut rng)).collect();
        let far = means.iter().all(|o| {
            let d2: f64 = o.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= 4.0 * std
        });
        if far {
            means.push(m);
        } else {
            misses += 1;
            if misses % 64 == 0 {
                half_width *= 1.5;
            }
        }
    }
    let noise = Normal::new(0.0, std).expect("positive std");
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut data: Vec<f64> = Vec::with_capacity(n * dim);
    for &l in &labels {
        data.extend(means[l].iter().map(|&m| m + noise.sample(&mut rng)));
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    data.iter_mut().for_each(|v| *v = (*v - lo) / range);
    Dataset::new(
        Tensor::new(vec![n, dim], data).expect("consistent shape"),
        labels,
        n_classes,
    )
    .expect("valid by construction")
}

/// Train/test pair drawn from the same clusters.
pub fn synthetic_blobs_split(
    n_train: usize,
    n_test: usize,
    n_classes: usize,
    dim: usize,
    seed: u64,
) -> (Dataset, Dataset) {
    let all = synthetic_blobs(n_train + n_test, n_classes, dim, seed);
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n_train + n_test).collect();
    (all.select(&train), all.select(&test))
}

/// Example order for one epoch: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Index batches of one epoch; the last partial batch is kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_and_permutation() {
        let b = batch_iter(5, 2, 7, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..5).collect::<Vec<_>>());
        assert_eq!(b, batch_iter(5, 2, 7, 0));
        assert_ne!(batch_iter(50, 10, 7, 0), batch_iter(50, 10, 7, 1));
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let d = synthetic_blobs(300, 3, 4, 11);
        for c in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(d, synthetic_blobs(300, 3, 4, 11));
        assert!(d.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_validation() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(t.clone(), vec![0, 1], 2).is_ok());
        assert!(Dataset::new(t.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(t, vec![0], 2).is_err());
    }

    #[test]
    fn select_preserves_rows() {
        let d = synthetic_blobs(10, 2, 3, 1);
        let s = d.select(&[4, 1]);
        assert_eq!(s.labels, vec![d.labels[4], d.labels[1]]);
        assert_eq!(&s.inputs.data()[..3], &d.inputs.data()[12..15]);
    }
}
