//! Image datasets: procedural Shapes10, the CIFAR-10 binary layout,
//! SSL augmentation and batching.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

mod augment;
mod batch;
mod cifar;
mod shapes;

pub(crate) use augment::augment_batch_pairs;
pub use augment::{augment_pair, augment_view, AugmentParams, AugmentationRng};
pub use batch::batch_iter;
pub use cifar::{encode_cifar10, parse_cifar10, CIFAR_RECORD_LEN};
pub use shapes::{gen_shapes10, ShapeClass, ShapesVariant, SHAPE_CLASSES};

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_LEN: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Salt mixed into per-sample seeds: `seed ^ (code << 56) ^ index`.
    pub fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
}

/// `N` images of shape `[3,32,32]` with pixels in `[0,1]` and labels in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
    pub split: Split,
    pub provenance: Provenance,
}

impl ImageDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<u8>,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [3, 32, 32] {
            return Err(Error::Data(format!("images must be [N,3,32,32], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: NUM_CLASSES,
            });
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel outside [0,1]".into()));
        }
        Ok(ImageDataset {
            images,
            labels,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::from_parts(&[3, 32, 32], self.images.row(i).to_vec())
            .expect("dataset rows are [3,32,32]")
    }

    /// Images and labels for the given indices, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (self.images.gather_rows(indices), labels)
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// First `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> ImageDataset {
        let n = n.min(self.len());
        ImageDataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }
}

/// Pixel to byte, inverting the `/255` scaling exactly for byte-valued data.
pub fn pixel_to_byte(p: f32) -> u8 {
    libm::roundf(p.clamp(0.0, 1.0) * 255.0) as u8
}
