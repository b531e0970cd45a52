//! Datasets: image/mask decoding, manifests, synthetic sets, and the
//! weight-file format.

pub mod image_io;
pub mod manifest;
pub mod synthetic;
pub mod weight_file;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// In-memory image/mask pairs: images (1, 3, H, W) in [0, 1], masks
/// (1, K, H, W) in {0, 1}.
#[derive(Clone, Debug, Default)]
pub struct SegDataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl SegDataset {
    pub fn new(ids: Vec<String>, images: Vec<Tensor>, masks: Vec<Tensor>) -> Result<Self> {
        if ids.len() != images.len() || images.len() != masks.len() {
            return Err(Error::Other("dataset ids, images and masks differ in length".into()));
        }
        for (im, m) in images.iter().zip(&masks) {
            let (a, b) = (im.shape(), m.shape());
            if a.n != 1 || b.n != 1 || a.h != b.h || a.w != b.w {
                return Err(Error::Shape {
                    op: "dataset",
                    lhs: a,
                    rhs: b,
                });
            }
        }
        Ok(SegDataset { ids, images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<Shape> {
        self.images.first().map(Tensor::shape)
    }

    /// Stacks the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let ims: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let ms: Vec<Tensor> = indices.iter().map(|&i| self.masks[i].clone()).collect();
        Ok((Tensor::stack(&ims)?, Tensor::stack(&ms)?))
    }

    pub fn subset(&self, indices: &[usize]) -> SegDataset {
        SegDataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}
