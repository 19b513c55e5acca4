//! Labelled datasets, the MNIST IDX reader and train/validation/test splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IdxErrorKind, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// One input sample (batch of one) with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Tensor,
    pub label: usize,
}

/// An ordered collection of equally shaped samples.
///
/// Features are held as `f32` to keep the full MNIST training set small in
/// memory; batches are widened to `f64` tensors on the way out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_dims: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        sample_dims: Vec<usize>,
        features: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_dims.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::Validation(format!(
                "{} feature values for {} samples of shape {sample_dims:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Dataset {
            sample_dims,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dims(&self) -> &[usize] {
        &self.sample_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn per_sample(&self) -> usize {
        self.sample_dims.iter().product()
    }

    pub fn example(&self, index: usize) -> Result<LabeledExample> {
        let (image, labels) = self.batch(&[index])?;
        Ok(LabeledExample {
            image,
            label: labels[0],
        })
    }

    /// Stacks the given samples into one `[B, ...]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let per = self.per_sample();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!(
                    "sample {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend(self.features[i * per..(i + 1) * per].iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(&self.sample_dims);
        Ok((Tensor::new(dims, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let per = self.per_sample();
        let mut features = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!("sample {i} out of range")));
            }
            features.extend_from_slice(&self.features[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Dataset::new(self.sample_dims.clone(), features, labels, self.num_classes)
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

/// Disjoint train / validation / test partitions.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

impl DatasetSplit {
    /// Shuffles `training` with `seed`, moves the last `validation` samples
    /// of the shuffled order into the validation set, and keeps `test` as is.
    pub fn carve(training: &Dataset, test: Dataset, validation: usize, seed: u64) -> Result<Self> {
        if validation >= training.len() {
            return Err(Error::Validation(format!(
                "validation size {validation} leaves no training data out of {}",
                training.len()
            )));
        }
        let mut order: Vec<usize> = (0..training.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = training.len() - validation;
        Ok(DatasetSplit {
            train: training.subset(&order[..cut])?,
            validation: training.subset(&order[cut..])?,
            test,
            seed,
        })
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn error(&self, kind: IdxErrorKind) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(self.error(IdxErrorKind::Truncated {
                needed: n as u64,
                available: available as u64,
            }));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let start = self.offset;
        let found = self.u32()?;
        if found != expected {
            self.offset = start;
            return Err(self.error(IdxErrorKind::BadMagic { expected, found }));
        }
        Ok(())
    }
}

/// Raw IDX image data: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader {
        path,
        bytes,
        offset: 0,
    };
    r.magic(IDX_IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let total = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| {
            r.error(IdxErrorKind::Truncated {
                needed: u64::MAX,
                available: (bytes.len() - r.offset) as u64,
            })
        })?;
    let pixels = r.take(total)?.to_vec();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader {
        path,
        bytes,
        offset: 0,
    };
    r.magic(IDX_LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    let labels = r.take(count)?;
    if let Some(pos) = labels.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        r.offset = 8 + pos;
        return Err(r.error(IdxErrorKind::BadLabel(labels[pos])));
    }
    Ok(labels.to_vec())
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn mnist_from_idx_bytes(
    images_path: &Path,
    images: &[u8],
    labels_path: &Path,
    labels: &[u8],
) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images_path, images)?;
    let labels = parse_idx_labels(labels_path, labels)?;
    if labels.len() != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            offset: 4,
            kind: IdxErrorKind::CountMismatch {
                images: count,
                labels: labels.len(),
            },
        });
    }
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(
        vec![1, rows, cols],
        features,
        labels.into_iter().map(usize::from).collect(),
        MNIST_CLASSES,
    )
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    mnist_from_idx_bytes(images_path, &images, labels_path, &labels)
}

/// The four standard (uncompressed) MNIST file names inside `dir`.
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .iter()
        .all(|p| p.is_file())
    }

    pub fn load_train(&self) -> Result<Dataset> {
        load_mnist_idx(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        load_mnist_idx(&self.test_images, &self.test_labels)
    }
}
