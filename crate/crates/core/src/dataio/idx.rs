//! IDX files as used by MNIST: big-endian u32 magic, u32 dims, raw bytes.

use std::path::Path;

use super::{read_file, DataError};
use crate::nn::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())).ok_or(DataError::Truncated {
        what,
        expected: at + 4,
        found: bytes.len(),
    })
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let what = "image file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::NotImageFile { magic });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated { what, expected, found: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..expected].to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let what = "label file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::NotLabelFile { magic });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated { what, expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pairs an image and label file into a dataset with pixels scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_images(&read_file(images_path)?)?;
    let labels = parse_labels(&read_file(labels_path)?)?;
    to_dataset(&images, &labels)
}

pub fn to_dataset(images: &IdxImages, labels: &[u8]) -> Result<Dataset, DataError> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch { images: images.count, labels: labels.len() });
    }
    let pixels = images.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    Dataset::new([1, images.rows, images.cols], pixels, labels).map_err(|e| DataError::Targets(e.to_string()))
}

/// Loads one split from a directory holding the standard MNIST file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let (img, lbl) = split.file_names();
    load_idx(&dir.join(img), &dir.join(lbl))
}
