//! Reader for the raw (uncompressed) IDX archives of the handwritten-digits
//! corpus, with optional SHA-256 verification.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use sha2::{Digest, Sha256};

use super::{preprocess, Dataset, Normalization, Sample};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Paths to an image/label archive pair plus optional hex digests.
#[derive(Clone, Debug, Default)]
pub struct DigitsSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub images_sha256: Option<String>,
    pub labels_sha256: Option<String>,
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_verified(path: &Path, sha256: Option<&str>) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e.to_string()))?;
    if let Some(expected) = sha256 {
        let got: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        if !got.eq_ignore_ascii_case(expected.trim()) {
            return Err(data_err(path, format!("checksum mismatch: expected {expected}, got {got}")));
        }
    }
    Ok(bytes)
}

pub fn read_idx_images(path: &Path, sha256: Option<&str>) -> Result<IdxImages> {
    let bytes = read_verified(path, sha256)?;
    let mut r = Cursor::new(&bytes);
    let header = |r: &mut Cursor<&Vec<u8>>| r.read_u32::<BigEndian>().map_err(|_| data_err(path, "truncated header"));
    let magic = header(&mut r)?;
    if magic != IMAGES_MAGIC {
        return Err(data_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = header(&mut r)? as usize;
    let rows = header(&mut r)? as usize;
    let cols = header(&mut r)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels).map_err(|_| data_err(path, "truncated pixel data"))?;
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path, sha256: Option<&str>) -> Result<Vec<u8>> {
    let bytes = read_verified(path, sha256)?;
    let mut r = Cursor::new(&bytes);
    let magic = r.read_u32::<BigEndian>().map_err(|_| data_err(path, "truncated header"))?;
    if magic != LABELS_MAGIC {
        return Err(data_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = r.read_u32::<BigEndian>().map_err(|_| data_err(path, "truncated header"))? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels).map_err(|_| data_err(path, "truncated label data"))?;
    Ok(labels)
}

/// Grayscale digits replicated to three channels, resized to `image_size`
/// and normalized. `limit` keeps only the first records.
pub fn load_digits(
    src: &DigitsSource,
    domain: usize,
    image_size: usize,
    norm: &Normalization,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = read_idx_images(&src.images, src.images_sha256.as_deref())?;
    let labels = read_idx_labels(&src.labels, src.labels_sha256.as_deref())?;
    if labels.len() != images.count {
        return Err(data_err(
            &src.labels,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    let n = limit.map_or(images.count, |l| l.min(images.count));
    let plane = images.rows * images.cols;
    let mut samples = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate().take(n) {
        let px = &images.pixels[i * plane..(i + 1) * plane];
        let gray = image::GrayImage::from_raw(images.cols as u32, images.rows as u32, px.to_vec())
            .ok_or_else(|| data_err(&src.images, "inconsistent image dimensions"))?;
        let image = preprocess(&image::DynamicImage::ImageLuma8(gray), image_size, norm)?;
        samples.push(Sample {
            id: ((domain as u64) << 32) | i as u64,
            image,
            label: usize::from(label),
            domain,
        });
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;

    fn write_pair(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        for v in [IMAGES_MAGIC, n as u32, 28, 28] {
            img.write_u32::<BigEndian>(v).unwrap();
        }
        img.extend((0..n * 784).map(|i| (i % 251) as u8));
        let mut lab = Vec::new();
        lab.write_u32::<BigEndian>(LABELS_MAGIC).unwrap();
        lab.write_u32::<BigEndian>(n as u32).unwrap();
        lab.extend((0..n).map(|i| (i % 10) as u8));
        let (pi, pl) = (dir.join("images.idx"), dir.join("labels.idx"));
        fs::write(&pi, img).unwrap();
        fs::write(&pl, lab).unwrap();
        (pi, pl)
    }

    #[test]
    fn reads_archive_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_pair(dir.path(), 12);
        let src = DigitsSource { images, labels, ..Default::default() };
        let ds = load_digits(&src, 0, 28, &Normalization::IMAGENET, None).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.image_shape().unwrap(), &[3, 28, 28]);
        assert_eq!(ds.samples()[3].label, 3);
        let img = ds.samples()[0].image.data();
        // Channels carry the same gray value before normalization.
        let g0 = img[5] * 0.229 + 0.485;
        let g1 = img[784 + 5] * 0.224 + 0.456;
        assert!((g0 - g1).abs() < 1e-12);
        assert_eq!(load_digits(&src, 0, 28, &Normalization::IMAGENET, Some(4)).unwrap().len(), 4);
    }

    #[test]
    fn checksum_verification() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_pair(dir.path(), 2);
        let bytes = fs::read(&labels).unwrap();
        let good: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert!(read_idx_labels(&labels, Some(&good)).is_ok());
        let err = read_idx_labels(&labels, Some(&"0".repeat(64))).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        assert!(read_idx_images(&labels, None).is_err());
        assert!(read_idx_labels(&images, None).is_err());
    }

    #[test]
    fn truncated_archive_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = write_pair(dir.path(), 2);
        let bytes = fs::read(&images).unwrap();
        fs::write(&images, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_idx_images(&images, None).is_err());
    }
}
