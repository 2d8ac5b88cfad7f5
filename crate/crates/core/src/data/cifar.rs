//! CIFAR-10 binary records: one label byte, then the R, G and B planes, each
//! 1024 bytes of a row-major 32×32 image.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{pixel_to_byte, ImageDataset, Provenance, Split, IMAGE_LEN, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 1 + IMAGE_LEN;

pub fn parse_cifar10(bytes: &[u8], split: Split, source: &str) -> Result<ImageDataset> {
    if bytes.is_empty() {
        return Err(Error::Data("empty CIFAR-10 file".into()));
    }
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let full = bytes.len() / CIFAR_RECORD_LEN;
        return Err(Error::Data(format!(
            "truncated record: file length {} is not a multiple of {CIFAR_RECORD_LEN} \
             (record {full} has {} bytes)",
            bytes.len(),
            bytes.len() % CIFAR_RECORD_LEN
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * IMAGE_LEN);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::Data(format!(
                "record {i}: label byte {} > 9",
                rec[0]
            )));
        }
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::from_parts(&[n, 3, 32, 32], data)?;
    ImageDataset::new(
        images,
        labels,
        split,
        Provenance {
            source: source.to_string(),
            seed: 0,
        },
    )
}

/// Serializes a dataset to CIFAR-10 records. Byte-valued datasets (anything
/// parsed from this format, and Shapes10) round-trip exactly.
pub fn encode_cifar10(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for i in 0..ds.len() {
        out.push(ds.labels()[i]);
        out.extend(ds.images().row(i).iter().map(|&p| pixel_to_byte(p)));
    }
    out
}
