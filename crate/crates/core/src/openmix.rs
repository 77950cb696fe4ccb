//! Pseudo-open sample synthesis.
//!
//! [`FeatAggNet`] predicts a per-dimension weight `alpha` in `(0, 1)` from two
//! different-class embeddings and fuses them as `alpha*e1 + (1-alpha)*e3`.
//! The image-space baselines (half crop, pixel mean, patch replacement) build
//! open samples without learning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{BatchNorm, Linear};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// `2D -> D`, rectifier, batch norm, `D -> D`, sigmoid.
#[derive(Clone, Debug)]
pub struct FeatAggNet {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    dim: usize,
}

impl FeatAggNet {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        bn_momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), 2 * dim, dim, rng),
            bn: BatchNorm::new(ps, &format!("{name}.bn"), dim, bn_momentum),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim, rng),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Returns the mixing-weight node.
    pub fn alpha(&self, g: &mut Graph, e1: NodeId, e3: NodeId) -> Result<NodeId> {
        for e in [e1, e3] {
            let (_, d) = g.value(e).dims2()?;
            if d != self.dim {
                return shape_err(format!("feature aggregation expects dim {}, got {d}", self.dim));
            }
        }
        let x = g.concat_cols(&[e1, e3])?;
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.bn.forward(g, h)?;
        let a = self.fc2.forward(g, h)?;
        Ok(g.sigmoid(a))
    }

    /// Returns `(open embedding, alpha)` nodes.
    pub fn forward(&self, g: &mut Graph, e1: NodeId, e3: NodeId) -> Result<(NodeId, NodeId)> {
        let alpha = self.alpha(g, e1, e3)?;
        let open = g.mix(alpha, e1, e3)?;
        Ok((open, alpha))
    }
}

/// Fuses two batches of embeddings (`[N, D]` each). In `train_mode` the batch
/// norm uses batch statistics; running statistics are not updated here.
pub fn aggregate_open(
    net: &FeatAggNet,
    params: &ParamSet,
    e1: &Tensor,
    e3: &Tensor,
    train_mode: bool,
) -> Result<(Tensor, Tensor)> {
    if e1.shape() != e3.shape() {
        return shape_err(format!("aggregate_open: {:?} vs {:?}", e1.shape(), e3.shape()));
    }
    let mut g = Graph::new(params, train_mode);
    let a = g.input(e1.clone());
    let b = g.input(e3.clone());
    let (open, alpha) = net.forward(&mut g, a, b)?;
    Ok((g.value(open).clone(), g.value(alpha).clone()))
}

/// `alpha * e1 + (1 - alpha) * e3` with an explicit `alpha`.
pub fn mix_embeddings(e1: &Tensor, e3: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if e1.shape() != e3.shape() || alpha.shape() != e1.shape() {
        return shape_err("mix_embeddings: shape mismatch");
    }
    let data = alpha
        .data()
        .iter()
        .zip(e1.data().iter().zip(e3.data()))
        .map(|(t, (x, y))| t * x + (1.0 - t) * y)
        .collect();
    Tensor::new(e1.shape().to_vec(), data)
}

fn image_dims(x1: &Tensor, x3: &Tensor) -> Result<(usize, usize, usize)> {
    if x1.shape() != x3.shape() {
        return shape_err(format!("image shapes differ: {:?} vs {:?}", x1.shape(), x3.shape()));
    }
    match x1.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(format!("expected (channels, height, width), got {:?}", x1.shape())),
    }
}

/// Left `floor(W/2)` columns from `x1`, the rest from `x3`.
pub fn baseline_half_crop(x1: &Tensor, x3: &Tensor) -> Result<Tensor> {
    let (_, _, w) = image_dims(x1, x3)?;
    let split = w / 2;
    let data = x1
        .data()
        .iter()
        .zip(x3.data())
        .enumerate()
        .map(|(i, (a, b))| if i % w < split { *a } else { *b })
        .collect();
    Tensor::new(x1.shape().to_vec(), data)
}

pub fn baseline_pixel_mean(x1: &Tensor, x3: &Tensor) -> Result<Tensor> {
    image_dims(x1, x3)?;
    let data = x1
        .data()
        .iter()
        .zip(x3.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::new(x1.shape().to_vec(), data)
}

/// `x1` with one uniformly placed `patch x patch` region (all channels)
/// replaced by the co-located region of `x3`.
pub fn baseline_patch_replace(x1: &Tensor, x3: &Tensor, patch: usize, seed: u64) -> Result<Tensor> {
    let (c, h, w) = image_dims(x1, x3)?;
    if patch == 0 || h < patch || w < patch {
        return shape_err(format!("{h}x{w} image is smaller than a {patch}x{patch} patch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - patch);
    let left = rng.gen_range(0..=w - patch);
    let mut out = x1.clone();
    let src = x3.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in top..top + patch {
            let row = (ch * h + y) * w;
            dst[row + left..row + left + patch].copy_from_slice(&src[row + left..row + left + patch]);
        }
    }
    Ok(out)
}
