//! IDX binary reader/writer (the MNIST container format).
//!
//! Header: big-endian `u32` magic, then one big-endian `u32` per dimension,
//! then raw unsigned bytes. Pixels are mapped `v ↦ 2·(v/255) − 1`.

use std::fs;
use std::path::Path;

use super::{DatasetError, LabeledDataset, Split};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32, DatasetError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DatasetError::Truncated {
            path: path.to_string(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<(), DatasetError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DatasetError::BadMagic {
            path: path.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, Vec<u8>), DatasetError> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>, DatasetError> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an image/label file pair. `num_classes` is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset, DatasetError> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (n, rows, cols, pixels) = parse_idx_images(&read(images_path)?, &img_name)?;
    let labels = parse_idx_labels(&read(labels_path)?, &lbl_name)?;
    if labels.len() != n {
        return Err(DatasetError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let data = pixels.iter().map(|&p| 2.0 * (f64::from(p) / 255.0) - 1.0).collect();
    let samples = Tensor::matrix(n, rows * cols, data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(samples, labels, num_classes, split)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[Vec<u8>]) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size must be rows × cols");
        out.extend_from_slice(img);
    }
    fs::write(path, out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img");
        let lbl = dir.join("lbl");
        write_idx_images(&img, 2, 2, &[vec![0, 255, 255, 0], vec![255, 255, 0, 0]]).unwrap();
        write_idx_labels(&lbl, &[1, 0]).unwrap();
        (img, lbl)
    }

    #[test]
    fn endpoints_map_to_plus_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture(dir.path());
        let ds = load_idx(&img, &lbl, Split::Train).unwrap();
        assert_eq!(ds.samples.shape(), &[2, 4]);
        assert_eq!(ds.samples.data(), &[-1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn swapped_files_report_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture(dir.path());
        let err = load_idx(&img, &img, Split::Train).unwrap_err();
        match err {
            DatasetError::BadMagic { expected, found, .. } => {
                assert_eq!(expected, IDX_LABELS_MAGIC);
                assert_eq!(found, IDX_IMAGES_MAGIC);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(load_idx(&lbl, &lbl, Split::Train), Err(DatasetError::BadMagic { .. })));
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture(dir.path());
        write_idx_labels(&lbl, &[1, 0, 1]).unwrap();
        assert!(matches!(
            load_idx(&img, &lbl, Split::Train),
            Err(DatasetError::CountMismatch { images: 2, labels: 3 })
        ));
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_idx(&img, &lbl, Split::Train),
            Err(DatasetError::Truncated { expected: 24, found: 23, .. })
        ));
        fs::write(&img, &bytes[..6]).unwrap();
        assert!(matches!(load_idx(&img, &lbl, Split::Train), Err(DatasetError::Truncated { .. })));
    }

    #[test]
    fn full_size_training_header() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        for v in [60_000u32, 28, 28] {
            bytes.extend(v.to_be_bytes());
        }
        bytes.resize(16 + 60_000 * 784, 7);
        let (n, rows, cols, pixels) = parse_idx_images(&bytes, "train").unwrap();
        assert_eq!((n, rows * cols), (60_000, 784));
        assert_eq!(pixels.len(), 60_000 * 784);
    }
}
