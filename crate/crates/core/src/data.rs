//! In-memory labeled image sets and seed-derived batch iteration.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{patchify_into, ModelConfig};
use crate::tensor::Tensor;

/// Images `[N×C×H×W]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim("labeled_images", images.shape(), &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} at index {i} outside [0, {num_classes})"
            )));
        }
        Ok(LabeledImages {
            images,
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

    pub fn image_len(&self) -> usize {
        self.images.len() / self.labels.len().max(1)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Copies the listed samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        LabeledImages::new(Tensor::new(&shape, data)?, labels, self.num_classes)
    }
}

/// One mini-batch in patch-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[size·num_patches × patch_dim]`
    pub patches: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// A split with every image already cut into patch rows.
#[derive(Debug, Clone)]
pub struct PatchedSplit {
    rows: Vec<f64>,
    labels: Vec<usize>,
    per_image: usize,
    patch_rows: usize,
    patch_dim: usize,
}

impl PatchedSplit {
    pub fn new(config: &ModelConfig, set: &LabeledImages) -> Result<Self> {
        let expected = [config.channels, config.image_size, config.image_size];
        if set.images.shape()[1..] != expected {
            return Err(Error::dim("patched_split", set.images.shape(), &expected));
        }
        if set.num_classes != config.num_classes {
            return Err(Error::Data(format!(
                "dataset has {} classes, model expects {}",
                set.num_classes, config.num_classes
            )));
        }
        let mut rows = Vec::with_capacity(set.images.len());
        for i in 0..set.len() {
            patchify_into(config, set.image(i), &mut rows);
        }
        Ok(PatchedSplit {
            rows,
            labels: set.labels.clone(),
            per_image: config.num_patches() * config.patch_dim(),
            patch_rows: config.num_patches(),
            patch_dim: config.patch_dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.per_image);
        for &i in indices {
            data.extend_from_slice(&self.rows[i * self.per_image..(i + 1) * self.per_image]);
        }
        let patches = Tensor::new(&[indices.len() * self.patch_rows, self.patch_dim], data)
            .expect("batch of at least one image");
        Batch {
            patches,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Batches in index order, for evaluation.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let order: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Seed-derived sample order for one epoch. The same `(seed, epoch)` always
/// yields the same permutation, independent of what the batches are used for.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}
