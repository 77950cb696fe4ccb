use std::path::Path;

use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `(x - mean) / std` applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// Normalizes a `[3, H, W]` buffer of values in `[0, 1]` in place.
    pub fn apply(&self, chw: &mut [f64]) {
        let hw = chw.len() / 3;
        for (c, plane) in chw.chunks_mut(hw).enumerate() {
            for v in plane {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Resizes (no-op when already `target x target`), converts to RGB in
/// `[0, 1]` and normalizes. Returns `[3, target, target]`.
pub fn preprocess(img: &DynamicImage, target: usize, norm: &Normalization) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    norm.validate()?;
    let rgb = img.to_rgb8();
    let t = target as u32;
    let rgb = if rgb.width() == t && rgb.height() == t {
        rgb
    } else {
        image::imageops::resize(&rgb, t, t, FilterType::Triangle)
    };
    let hw = target * target;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = f64::from(px[c]) / 255.0;
        }
    }
    norm.apply(&mut data);
    Tensor::new(vec![3, target, target], data)
}

pub fn preprocess_file(path: &Path, target: usize, norm: &Normalization) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    preprocess(&img, target, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn mean_gray_normalizes_to_zero() {
        let px = Rgb([124u8, 116, 104]); // 0.485, 0.456, 0.406 rounded to bytes
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(8, 8, px));
        let t = preprocess(&img, 8, &Normalization::IMAGENET).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn output_shape_and_noop_resize() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(128, 128, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        }));
        let t = preprocess(&img, 128, &Normalization::IMAGENET).unwrap();
        assert_eq!(t.shape(), &[3, 128, 128]);
        // Pixel (x=5, y=3) in the red plane is untouched by resampling.
        let expect = (5.0 / 255.0 - 0.485) / 0.229;
        assert!((t.data()[3 * 128 + 5] - expect).abs() < 1e-12);
        let small = preprocess(&img, 28, &Normalization::IMAGENET).unwrap();
        assert_eq!(small.shape(), &[3, 28, 28]);
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.png");
        std::fs::write(&p, b"not an image").unwrap();
        let err = preprocess_file(&p, 8, &Normalization::IMAGENET).unwrap_err();
        assert!(err.to_string().contains("broken.png"));
    }
}
