//! Procedural shapes dataset with ground-truth localization masks, IDX
//! ingestion, and the balanced per-class epoch sampler.

mod cache;
mod idx;
mod sampler;
mod shapes;

pub use cache::{load_dataset, save_dataset};
pub use idx::load_idx;
pub use sampler::{balanced_epoch, BalancedSample};
pub use shapes::{
    family_of_label, generate_shapes, Family, GeneratorKind, ShapeClass, ShapesConfig,
    ALL_CLASSES, NUM_CLASSES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn full(h: usize, w: usize) -> Self {
        BBox {
            r0: 0,
            c0: 0,
            r1: h - 1,
            c1: w - 1,
        }
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1)
    }

    /// Tight box around the true pixels of an h x w mask.
    pub fn tight(mask: &[bool], h: usize, w: usize) -> Option<Self> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for r in 0..h {
            for c in 0..w {
                if mask[r * w + c] {
                    any = true;
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r);
                    c1 = c1.max(c);
                }
            }
        }
        any.then_some(BBox { r0, c0, r1, c1 })
    }
}

/// One sample: image in [0,1], class label, and (for generated data) the
/// analytic object mask with its tight bounding box.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
    pub mask: Option<Vec<bool>>,
    pub bbox: Option<BBox>,
}

/// Train/val/test splits of labeled images.
#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub config: ShapesConfig,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Stacks images into one [n,c,h,w] tensor plus the label vector.
pub fn to_batch(items: &[LabeledImage]) -> Result<(Tensor, Vec<usize>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs: Vec<&Tensor> = items.iter().map(|s| &s.image).collect();
    let xs = crate::tensor::stack(&refs)?;
    let ys = items.iter().map(|s| s.label).collect();
    Ok((xs, ys))
}

/// Stacks a subset given by `indices`.
pub fn to_batch_indices(items: &[LabeledImage], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs: Vec<&Tensor> = indices.iter().map(|&i| &items[i].image).collect();
    let xs = crate::tensor::stack(&refs)?;
    let ys = indices.iter().map(|&i| items[i].label).collect();
    Ok((xs, ys))
}
