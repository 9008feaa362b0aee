//! Labeled image collections: IDX and PNG ingestion plus the synthetic
//! affine and diffeomorphic digit generators.

mod idx;
mod png;
mod synth;

pub use idx::{load_idx, read_idx_images, read_idx_labels, save_idx};
pub use png::{load_png_dir, resize_bilinear};
pub use synth::{
    base_exemplars, gen_affine_mnist, gen_diffeo_mnist, grid_folds, AffineRanges, AffineSample,
    SyntheticSplit, DIFFEO_GRID_LANDMARKS,
};

use std::fmt;

use crate::error::{Error, Result};
use crate::warp::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Unit-norm images of a common shape with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        split: Split,
        provenance: String,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(first) = images.first() {
            for img in &images {
                first.check_same_shape(img)?;
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// `per_class` samples of every class, skipping the first `skip` of each
    /// class, in original order.
    pub fn stratified(&self, per_class: usize, skip: usize) -> Result<Self> {
        let k = self.num_classes();
        let mut seen = vec![0usize; k];
        let mut taken = vec![0usize; k];
        let mut indices = Vec::with_capacity(per_class * k);
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] >= skip && taken[l] < per_class {
                indices.push(i);
                taken[l] += 1;
            }
            seen[l] += 1;
        }
        if let Some(c) = taken.iter().position(|&t| t < per_class) {
            return Err(Error::InsufficientData {
                needed: per_class + skip,
                available: seen[c],
            });
        }
        let mut out = self.subset(&indices);
        out.provenance = format!(
            "{} [stratified {per_class}/class, skip {skip}]",
            self.provenance
        );
        Ok(out)
    }
}
