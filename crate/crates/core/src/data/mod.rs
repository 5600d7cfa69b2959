//! Image datasets: the IDX binary format and a seeded synthetic generator.

mod idx;
mod synthetic;

pub use idx::{
    decode_images, decode_labels, encode_images, encode_labels, read_idx_dataset, write_idx_dataset,
    IdxDataset, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use synthetic::{synthetic_blobs, BlobSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale images as `[H, W, 1]` tensors in `[0, 1]`, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    /// Converts IDX bytes to `[0, 1]` floats. `classes` defaults to
    /// `max(label) + 1`.
    pub fn from_idx(idx: &IdxDataset, classes: Option<usize>) -> Result<Self> {
        let per_image = idx.rows * idx.cols;
        let images = idx
            .images
            .chunks_exact(per_image)
            .map(|px| {
                let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
                Tensor::new(vec![idx.rows, idx.cols, 1], data)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = idx.labels.iter().map(|&l| usize::from(l)).collect();
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Dataset::new(images, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images[0].dims()[0]
    }

    pub fn samples(&self, indices: &[usize]) -> Vec<(&Tensor, usize)> {
        indices.iter().map(|&i| (&self.images[i], self.labels[i])).collect()
    }

    pub fn all_samples(&self) -> Vec<(&Tensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied()).collect()
    }
}
