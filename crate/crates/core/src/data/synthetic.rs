//! Parametric shape classes rendered under per-domain appearance transforms.
//! Class identity is the shape; domains differ in palette, background
//! texture and contrast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Normalization, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Plus,
    Cross,
    Ring,
    HBars,
    VBars,
    Frame,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Plus,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::HBars,
        ShapeKind::VBars,
        ShapeKind::Frame,
        ShapeKind::Diamond,
    ];

    /// Membership test in shape coordinates (`u, v` roughly in `[-1, 1]`,
    /// `v` pointing down) for stroke half-width `t`.
    fn contains(self, u: f64, v: f64, t: f64) -> bool {
        let box_inf = u.abs().max(v.abs());
        match self {
            ShapeKind::Disk => u * u + v * v <= 0.9,
            ShapeKind::Square => box_inf <= 0.8,
            ShapeKind::Triangle => v <= 0.8 && v >= -0.9 && u.abs() <= (v + 0.9) * 0.55,
            ShapeKind::Plus => (u.abs() <= t && v.abs() <= 0.95) || (v.abs() <= t && u.abs() <= 0.95),
            ShapeKind::Cross => {
                box_inf <= 0.85
                    && ((u - v).abs() / std::f64::consts::SQRT_2 <= t
                        || (u + v).abs() / std::f64::consts::SQRT_2 <= t)
            }
            ShapeKind::Ring => ((u * u + v * v).sqrt() - 0.72).abs() <= t,
            ShapeKind::HBars => u.abs() <= 0.9 && [-0.65, 0.0, 0.65].iter().any(|c| (v - c).abs() <= t * 0.8),
            ShapeKind::VBars => v.abs() <= 0.9 && [-0.65, 0.0, 0.65].iter().any(|c| (u - c).abs() <= t * 0.8),
            ShapeKind::Frame => box_inf <= 0.9 && box_inf >= 0.9 - 2.0 * t,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Foreground and background colors in `[0, 1]` RGB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Texture {
    Flat,
    /// Independent per-pixel background noise.
    Noise { amplitude: f64 },
    /// Diagonal background stripes.
    Stripes { period: f64, amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub shapes: Vec<ShapeKind>,
    pub image_size: usize,
    /// Domain `d` uses `palettes[d % len]`.
    pub palettes: Vec<Palette>,
    /// Domain `d` uses `textures[d % len]`.
    pub textures: Vec<Texture>,
    /// Foreground/background contrast is scaled by `1 ± contrast_jitter`.
    pub contrast_jitter: f64,
    pub pixel_noise: f64,
    /// Relative jitter of position (fraction of the image) and scale.
    pub position_jitter: f64,
    pub scale_range: [f64; 2],
    pub stroke_range: [f64; 2],
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            shapes: ShapeKind::ALL.to_vec(),
            image_size: 16,
            palettes: vec![
                Palette { foreground: [0.95, 0.95, 0.95], background: [0.05, 0.05, 0.05] },
                Palette { foreground: [0.95, 0.85, 0.45], background: [0.2, 0.1, 0.3] },
                Palette { foreground: [0.55, 0.95, 0.65], background: [0.35, 0.1, 0.1] },
                Palette { foreground: [0.9, 0.6, 0.95], background: [0.1, 0.3, 0.2] },
                Palette { foreground: [0.6, 0.9, 0.95], background: [0.3, 0.15, 0.05] },
            ],
            textures: vec![
                Texture::Flat,
                Texture::Noise { amplitude: 0.25 },
                Texture::Stripes { period: 4.0, amplitude: 0.2 },
            ],
            contrast_jitter: 0.2,
            pixel_noise: 0.03,
            position_jitter: 0.1,
            scale_range: [0.55, 0.8],
            stroke_range: [0.18, 0.26],
            normalization: Normalization::IMAGENET,
            seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.shapes.len() < 2 {
            return bad("at least two shape classes are required");
        }
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if self.palettes.is_empty() || self.textures.is_empty() {
            return bad("palettes and textures must be nonempty");
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) || self.pixel_noise < 0.0 {
            return bad("contrast_jitter must be in [0, 1) and pixel_noise >= 0");
        }
        let ok_range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0;
        if !ok_range(self.scale_range) || !ok_range(self.stroke_range) {
            return bad("scale and stroke ranges must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..0.5).contains(&self.position_jitter) {
            return bad("position_jitter must be in [0, 0.5)");
        }
        self.normalization.validate()
    }
}

/// Renders one shape mask with 4x4 supersampling; values in `[0, 1]`.
pub fn render_shape(kind: ShapeKind, size: usize, cx: f64, cy: f64, scale: f64, stroke: f64) -> Vec<f64> {
    const SS: usize = 4;
    let half = size as f64 / 2.0;
    let radius = scale * half;
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let u = (px - cx) / radius;
                    let v = (py - cy) / radius;
                    if kind.contains(u, v, stroke) {
                        hits += 1;
                    }
                }
            }
            mask[y * size + x] = hits as f64 / (SS * SS) as f64;
        }
    }
    mask
}

fn texture_value(tex: Texture, x: usize, y: usize, phase: f64, rng: &mut ChaCha8Rng) -> f64 {
    match tex {
        Texture::Flat => 0.0,
        Texture::Noise { amplitude } => amplitude * (rng.gen::<f64>() - 0.5) * 2.0,
        Texture::Stripes { period, amplitude } => {
            let t = (x + y) as f64 / period + phase;
            amplitude * (2.0 * std::f64::consts::PI * t).sin()
        }
    }
}

fn render_sample(spec: &SyntheticDomainSpec, domain: usize, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = spec.image_size;
    let s = size as f64;
    let palette = spec.palettes[domain % spec.palettes.len()];
    let texture = spec.textures[domain % spec.textures.len()];
    let jitter = spec.position_jitter * s;
    let cx = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let cy = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let scale = rng.gen_range(spec.scale_range[0]..=spec.scale_range[1]);
    let stroke = rng.gen_range(spec.stroke_range[0]..=spec.stroke_range[1]);
    let contrast = 1.0 + rng.gen_range(-spec.contrast_jitter..=spec.contrast_jitter);
    let phase = rng.gen::<f64>();
    let mask = render_shape(spec.shapes[class], size, cx, cy, scale, stroke);
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let hw = size * size;
    let mut out = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let tex = texture_value(texture, x, y, phase, rng);
            for c in 0..3 {
                let bg = palette.background[c];
                let fg = bg + contrast * (palette.foreground[c] - bg);
                let bg = bg + tex;
                let mut v = mask[i] * fg + (1.0 - mask[i]) * bg;
                if spec.pixel_noise > 0.0 {
                    v += noise.sample(rng);
                }
                out[c * hw + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// One dataset per domain, `n_per_class` samples of every shape class.
/// Sample ids encode `(domain, index)` and are unique across domains.
/// Images are returned normalized with `spec.normalization`.
pub fn generate_synthetic_domains(
    spec: &SyntheticDomainSpec,
    n_domains: usize,
    n_per_class: usize,
) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let size = spec.image_size;
    (0..n_domains)
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(d as u64));
            let mut samples = Vec::with_capacity(n_per_class * spec.shapes.len());
            for class in 0..spec.shapes.len() {
                for _ in 0..n_per_class {
                    let mut data = render_sample(spec, d, class, &mut rng);
                    spec.normalization.apply(&mut data);
                    samples.push(Sample {
                        id: ((d as u64) << 32) | samples.len() as u64,
                        image: Tensor::new(vec![3, size, size], data)?,
                        label: class,
                        domain: d,
                    });
                }
            }
            Dataset::new(samples)
        })
        .collect()
}
