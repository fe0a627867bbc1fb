//! IDX reader and writer for MNIST-style image and label files.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for rank-3 unsigned-byte
//! images, `0x00000801` for rank-1 labels), one big-endian `u32` per
//! dimension, then the raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::Dataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: Option<&'a Path>,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.path,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("header")?;
        if got != expected {
            return Err(Error::parse(
                self.path,
                format!("bad magic 0x{got:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8], path: Option<&Path>) -> Result<IdxImages> {
    let mut c = Cursor { bytes, pos: 0, path };
    c.magic(IMAGES_MAGIC)?;
    let count = c.u32("header")? as usize;
    let rows = c.u32("header")? as usize;
    let cols = c.u32("header")? as usize;
    let pixels = c.take(count * rows * cols, "pixel payload")?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: Option<&Path>) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0, path };
    c.magic(LABELS_MAGIC)?;
    let count = c.u32("header")? as usize;
    Ok(c.take(count, "label payload")?.to_vec())
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair, scaling pixels to `[0, 1]` and
/// flattening each image to one row. Labels must be digits `0..10`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx_images(&fs::read(images)?, Some(images))?;
    let lab = parse_idx_labels(&fs::read(labels)?, Some(labels))?;
    if img.count != lab.len() {
        return Err(Error::parse(
            Some(labels),
            format!("{} labels for {} images in {}", lab.len(), img.count, images.display()),
        ));
    }
    let d = img.rows * img.cols;
    let data = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Matrix::from_vec(img.count, d, data)?;
    let split = images
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(inputs, lab.into_iter().map(usize::from).collect(), 10, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxImages {
        IdxImages {
            count: 1,
            rows: 2,
            cols: 2,
            pixels: vec![0, 51, 255, 102],
        }
    }

    #[test]
    fn one_image_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, write_idx_images(&fixture())).unwrap();
        fs::write(&lp, write_idx_labels(&[7])).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!((ds.len(), ds.dim()), (1, 4));
        assert_eq!(ds.inputs.row(0), &[0.0, 0.2, 1.0, 0.4]);
        assert_eq!(ds.labels, vec![7]);
    }

    #[test]
    fn writer_round_trips_bit_exactly() {
        let bytes = write_idx_images(&fixture());
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(write_idx_images(&parse_idx_images(&bytes, None).unwrap()), bytes);
        let lb = write_idx_labels(&[1, 2, 3]);
        assert_eq!(write_idx_labels(&parse_idx_labels(&lb, None).unwrap()), lb);
    }

    #[test]
    fn wrong_magic_names_the_expected_value() {
        let lb = write_idx_labels(&[1]);
        let err = parse_idx_images(&lb, None).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut bytes = write_idx_images(&fixture());
        bytes.pop();
        assert!(matches!(parse_idx_images(&bytes, None), Err(Error::Parse { .. })));
        assert!(parse_idx_labels(&[0, 0, 8], None).is_err());
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, write_idx_images(&fixture())).unwrap();
        fs::write(&lp, write_idx_labels(&[7, 1])).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("2 labels for 1 images"), "{err}");
    }

    #[test]
    fn labels_beyond_ten_classes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, write_idx_images(&fixture())).unwrap();
        fs::write(&lp, write_idx_labels(&[12])).unwrap();
        assert!(load_mnist_idx(&ip, &lp).is_err());
    }
}
