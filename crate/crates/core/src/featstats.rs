//! Instance-level feature statistics, normalization and restyling.
//!
//! Statistics are always taken per instance and per channel over the spatial
//! axes. The standard deviation is the population form (divide by `H*W`).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Activation tensor with axes (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Empty(format!(
                "feature map with shape {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::InvalidValue("feature map has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(shape.to_vec(), data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated at construction")
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Per-instance, per-channel `(mean, std)`, laid out instance-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    batch: usize,
    channels: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl StyleStats {
    pub fn new(batch: usize, channels: usize, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != batch * channels || std.len() != mean.len() {
            return shape_err(format!(
                "style stats for {batch}x{channels}: mean {} / std {} values",
                mean.len(),
                std.len()
            ));
        }
        if std.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidValue("negative standard deviation".into()));
        }
        Ok(Self {
            batch,
            channels,
            mean,
            std,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn mean_row(&self, i: usize) -> &[f64] {
        &self.mean[i * self.channels..(i + 1) * self.channels]
    }

    pub fn std_row(&self, i: usize) -> &[f64] {
        &self.std[i * self.channels..(i + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &StyleStats) -> bool {
        self.batch == other.batch && self.channels == other.channels
    }

    /// `[mean; std]` for instance `i`, the style descriptor used for diversity.
    pub fn concat_row(&self, i: usize) -> Vec<f64> {
        let mut v = self.mean_row(i).to_vec();
        v.extend_from_slice(self.std_row(i));
        v
    }

    pub fn mean_tensor(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.channels], self.mean.clone()).expect("validated")
    }

    pub fn std_tensor(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.channels], self.std.clone()).expect("validated")
    }

    pub fn from_tensors(mean: &Tensor, std: &Tensor) -> Result<Self> {
        let (n, c) = mean.dims2()?;
        Self::new(n, c, mean.data().to_vec(), std.data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    pub epsilon: f64,
}

impl StatsConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    /// Exact identity checks need the guard switched off; this bypasses the
    /// positivity invariant and is intended for verification code only.
    pub fn unguarded() -> Self {
        Self { epsilon: 0.0 }
    }
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5 }
    }
}

pub fn compute_instance_stats(f: &FeatureMap) -> StyleStats {
    let (n, c, _, _) = f.dims();
    let mean = spatial_mean(f.tensor()).expect("validated 4-d map");
    let std = spatial_std(f.tensor()).expect("validated 4-d map");
    StyleStats::new(n, c, mean.into_data(), std.into_data()).expect("shapes agree")
}

pub fn instance_normalize(f: &FeatureMap, s: &StyleStats, cfg: StatsConfig) -> Result<FeatureMap> {
    let (n, c, _, _) = f.dims();
    let zeros = vec![0.0; n * c];
    let ones = vec![1.0; n * c];
    check_stats_shape(f, s)?;
    FeatureMap::new(restyle_raw(
        f.tensor(),
        s.mean(),
        s.std(),
        &zeros,
        &ones,
        cfg.epsilon,
    )?)
}

/// Re-imposes `target` statistics on `f`, whose own statistics are `original`:
/// `target.mean + target.std * (f - original.mean) / (original.std + eps)`.
pub fn restyle(
    f: &FeatureMap,
    original: &StyleStats,
    target: &StyleStats,
    cfg: StatsConfig,
) -> Result<FeatureMap> {
    check_stats_shape(f, original)?;
    check_stats_shape(f, target)?;
    if !target.mean.iter().chain(&target.std).all(|v| v.is_finite()) {
        return Err(Error::InvalidValue("target style has non-finite values".into()));
    }
    FeatureMap::new(restyle_raw(
        f.tensor(),
        original.mean(),
        original.std(),
        target.mean(),
        target.std(),
        cfg.epsilon,
    )?)
}

fn check_stats_shape(f: &FeatureMap, s: &StyleStats) -> Result<()> {
    let (n, c, _, _) = f.dims();
    if s.batch != n || s.channels != c {
        return shape_err(format!(
            "feature map has {n}x{c} instance-channels, stats have {}x{}",
            s.batch, s.channels
        ));
    }
    Ok(())
}

/// Mean over all cross pairs of `1 - cos(a, b)`.
pub fn mean_cosine_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("cosine distance needs two nonempty sets".into()));
    }
    let dim = a[0].len();
    let normalize = |v: &Vec<f64>| -> Result<Vec<f64>> {
        if v.len() != dim {
            return shape_err(format!("vector of length {} among length {dim}", v.len()));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidValue("zero-norm vector in cosine distance".into()));
        }
        Ok(v.iter().map(|x| x / norm).collect())
    };
    let an = a.iter().map(normalize).collect::<Result<Vec<_>>>()?;
    let bn = b.iter().map(normalize).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for u in &an {
        for v in &bn {
            let cos: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            total += 1.0 - cos.clamp(-1.0, 1.0);
        }
    }
    Ok(total / (an.len() * bn.len()) as f64)
}

pub(crate) fn spatial_mean(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Empty("spatial extent is zero".into()));
    }
    let data = t
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub(crate) fn spatial_std(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Empty("spatial extent is zero".into()));
    }
    let data = t
        .data()
        .chunks(hw)
        .map(|p| {
            let m = p.iter().sum::<f64>() / hw as f64;
            (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64).sqrt()
        })
        .collect();
    Tensor::new(vec![n, c], data)
}

pub(crate) fn restyle_raw(
    x: &Tensor,
    mu_src: &[f64],
    sd_src: &[f64],
    mu_dst: &[f64],
    sd_dst: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let planes = n * c;
    if [mu_src.len(), sd_src.len(), mu_dst.len(), sd_dst.len()]
        .iter()
        .any(|&l| l != planes)
    {
        return shape_err(format!("restyle: statistics must have {planes} entries"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(x.len());
    for (plane, xs) in x.data().chunks(hw).enumerate() {
        let gain = sd_dst[plane] / (sd_src[plane] + eps);
        out.extend(xs.iter().map(|v| mu_dst[plane] + gain * (v - mu_src[plane])));
    }
    Tensor::new(x.shape().to_vec(), out)
}
