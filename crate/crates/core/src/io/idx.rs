//! The IDX binary container MNIST ships in: big-endian magic, counts and
//! dimensions, then raw unsigned bytes. Parsing normalizes pixels to
//! `[0, 1]`; serializing is the exact inverse, so round trips are
//! bit-identical.

use crate::data::{DataError, Dataset};
use byteorder::{BigEndian, ByteOrder};
use ndarray::Array2;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated payload: need {needed} bytes, have {have} (missing from offset {have})")]
    Truncated { needed: usize, have: usize },
    #[error("label {label} at index {index} outside [0, 9]")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Header fields of an IDX file, as printed by `inspect-idx`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub count: usize,
    pub dims: Vec<usize>,
}

/// Reads the header of either container kind without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<IdxHeader, IdxError> {
    if bytes.len() < 8 {
        return Err(IdxError::Truncated {
            needed: 8,
            have: bytes.len(),
        });
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let n_dims = match magic {
        IMAGES_MAGIC => 2,
        LABELS_MAGIC => 0,
        found => {
            return Err(IdxError::WrongMagic {
                expected: IMAGES_MAGIC,
                found,
            })
        }
    };
    let header_len = 8 + 4 * n_dims;
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            needed: header_len,
            have: bytes.len(),
        });
    }
    let dims = (0..n_dims)
        .map(|d| BigEndian::read_u32(&bytes[8 + 4 * d..12 + 4 * d]) as usize)
        .collect();
    Ok(IdxHeader { magic, count, dims })
}

/// Parsed image container: one row per image, pixels row-major in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub data: Array2<f64>,
    pub rows: usize,
    pub cols: usize,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            needed: 4,
            have: bytes.len(),
        });
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IMAGES_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < 16 {
        return Err(IdxError::Truncated {
            needed: 16,
            have: bytes.len(),
        });
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    let pixels = &bytes[16..needed];
    let data = Array2::from_shape_fn((count, rows * cols), |(i, p)| {
        f64::from(pixels[i * rows * cols + p]) / 255.0
    });
    Ok(IdxImages { data, rows, cols })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            needed: 4,
            have: bytes.len(),
        });
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != LABELS_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < 8 {
        return Err(IdxError::Truncated {
            needed: 8,
            have: bytes.len(),
        });
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    let labels = bytes[8..needed].to_vec();
    for (index, &label) in labels.iter().enumerate() {
        if label > 9 {
            return Err(IdxError::LabelOutOfRange { index, label });
        }
    }
    Ok(labels)
}

/// Serializes normalized images back to IDX bytes; the exact inverse of
/// [`parse_idx_images`].
pub fn write_idx_images(images: &Array2<f64>, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(images.ncols(), rows * cols, "pixel count mismatch");
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.nrows() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in images.iter() {
        bytes.push((v * 255.0).round() as u8);
    }
    bytes
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    bytes
}

/// Loads an image/label file pair into a ten-class dataset.
pub fn load_mnist<P: AsRef<Path>, Q: AsRef<Path>>(
    images_path: P,
    labels_path: Q,
) -> Result<Dataset, IdxError> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    Ok(Dataset::new(images.data, labels, 10)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> Vec<u8> {
        // one 2x2 image with pixels 0, 255, 128, 64
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        bytes
    }

    #[test]
    fn parses_hand_built_image_file() {
        let parsed = parse_idx_images(&tiny_images()).unwrap();
        assert_eq!(parsed.rows, 2);
        assert_eq!(parsed.cols, 2);
        let row: Vec<f64> = parsed.data.row(0).to_vec();
        assert_eq!(row, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn parses_hand_built_label_file() {
        let bytes = write_idx_labels(&[3, 7]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![3, 7]);
    }

    #[test]
    fn image_parser_rejects_label_magic() {
        let bytes = write_idx_labels(&[1]);
        match parse_idx_images(&bytes).unwrap_err() {
            IdxError::WrongMagic { expected, found } => {
                assert_eq!(expected, IMAGES_MAGIC);
                assert_eq!(found, LABELS_MAGIC);
            }
            other => panic!("expected WrongMagic, got {other}"),
        }
    }

    #[test]
    fn label_parser_rejects_out_of_range() {
        let bytes = write_idx_labels(&[3, 10]);
        match parse_idx_labels(&bytes).unwrap_err() {
            IdxError::LabelOutOfRange { index, label } => {
                assert_eq!((index, label), (1, 10));
            }
            other => panic!("expected LabelOutOfRange, got {other}"),
        }
    }

    #[test]
    fn truncation_reports_offsets() {
        let mut bytes = tiny_images();
        bytes.truncate(18);
        match parse_idx_images(&bytes).unwrap_err() {
            IdxError::Truncated { needed, have } => {
                assert_eq!(needed, 20);
                assert_eq!(have, 18);
            }
            other => panic!("expected Truncated, got {other}"),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let bytes = tiny_images();
        let parsed = parse_idx_images(&bytes).unwrap();
        let rewritten = write_idx_images(&parsed.data, parsed.rows, parsed.cols);
        assert_eq!(bytes, rewritten);

        let labels = write_idx_labels(&[0, 9, 4, 4]);
        let rewritten = write_idx_labels(&parse_idx_labels(&labels).unwrap());
        assert_eq!(labels, rewritten);
    }

    #[test]
    fn normalize_denormalize_recovers_every_pixel_value() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&16u32.to_be_bytes());
        bytes.extend_from_slice(&16u32.to_be_bytes());
        bytes.extend((0u16..256).map(|v| v as u8));
        let parsed = parse_idx_images(&bytes).unwrap();
        let rewritten = write_idx_images(&parsed.data, 16, 16);
        assert_eq!(bytes, rewritten);
    }

    #[test]
    fn header_inspection() {
        let h = read_header(&tiny_images()).unwrap();
        assert_eq!(h.magic, IMAGES_MAGIC);
        assert_eq!(h.count, 1);
        assert_eq!(h.dims, vec![2, 2]);

        let h = read_header(&write_idx_labels(&[1, 2, 3])).unwrap();
        assert_eq!(h.magic, LABELS_MAGIC);
        assert_eq!(h.count, 3);
        assert!(h.dims.is_empty());
    }
}
