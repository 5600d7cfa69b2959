//! IDX files (the MNIST container): big-endian `u32` magic, big-endian `u32`
//! dimensions, then unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` pixels, image-major.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }
}

pub fn encode_images(ds: &IdxDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.count() as u32, ds.rows as u32, ds.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&ds.images);
    out
}

pub fn encode_labels(ds: &IdxDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.labels.len());
    for v in [IDX_LABELS_MAGIC, ds.count() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&ds.labels);
    out
}

fn header(bytes: &[u8], words: usize, what: &str) -> std::result::Result<Vec<u32>, String> {
    if bytes.len() < 4 * words {
        return Err(format!("{what} file truncated: {} bytes, header needs {}", bytes.len(), 4 * words));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn decode_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<u8>), String> {
    let h = header(bytes, 4, "image")?;
    if h[0] != IDX_IMAGES_MAGIC {
        return Err(format!(
            "bad image magic 0x{:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
            h[0]
        ));
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(format!(
            "image payload has {} bytes, header promises {count}×{rows}×{cols}",
            body.len()
        ));
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn decode_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let h = header(bytes, 2, "label")?;
    if h[0] != IDX_LABELS_MAGIC {
        return Err(format!(
            "bad label magic 0x{:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
            h[0]
        ));
    }
    let body = &bytes[8..];
    if body.len() != h[1] as usize {
        return Err(format!("label payload has {} bytes, header promises {}", body.len(), h[1]));
    }
    Ok(body.to_vec())
}

pub fn read_idx_dataset(images: &Path, labels: &Path) -> Result<IdxDataset> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (count, rows, cols, pixels) = decode_images(&img_bytes).map_err(|m| Error::format(images, m))?;
    let labels_vec = decode_labels(&lbl_bytes).map_err(|m| Error::format(labels, m))?;
    if labels_vec.len() != count {
        return Err(Error::format(
            labels,
            format!("{} labels for {count} images", labels_vec.len()),
        ));
    }
    Ok(IdxDataset {
        rows,
        cols,
        images: pixels,
        labels: labels_vec,
    })
}

pub fn write_idx_dataset(ds: &IdxDataset, images: &Path, labels: &Path) -> Result<()> {
    write_atomic(images, &encode_images(ds))?;
    write_atomic(labels, &encode_labels(ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxDataset {
        IdxDataset {
            rows: 3,
            cols: 2,
            images: (0..24).map(|i| (i * 11) as u8).collect(),
            labels: vec![0, 1, 2, 1],
        }
    }

    #[test]
    fn four_image_fixture_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
        let ds = fixture();
        write_idx_dataset(&ds, &ip, &lp).unwrap();
        let back = read_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.image(3), &ds.images[18..24]);
    }

    #[test]
    fn header_is_big_endian() {
        let bytes = encode_images(&fixture());
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 4]);
        let bytes = encode_labels(&fixture());
        assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
    }

    #[test]
    fn wrong_magic_names_expected_value() {
        let mut bytes = encode_images(&fixture());
        bytes[3] = 0x01;
        let err = decode_images(&bytes).unwrap_err();
        assert!(err.contains("0x00000803"), "{err}");
        let mut bytes = encode_labels(&fixture());
        bytes[3] = 0x03;
        let err = decode_labels(&bytes).unwrap_err();
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_images(&fixture());
        assert!(decode_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_images(&bytes[..10]).is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
        let mut ds = fixture();
        write_idx_dataset(&ds, &ip, &lp).unwrap();
        ds.labels.pop();
        std::fs::write(&lp, encode_labels(&ds)).unwrap();
        assert!(read_idx_dataset(&ip, &lp).is_err());
    }
}
