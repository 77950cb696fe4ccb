//! Learned style synthesis: a two-layer network that maps a pair of noisy
//! same-class style descriptors to a novel `(mean, std)`, the band-margin loss
//! that keeps the synthesized style a bounded distance from its inputs, and
//! the MixStyle interpolation baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::featstats::StyleStats;
use crate::graph::{l2_distance, Graph, NodeId};
use crate::nn::Linear;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// `4C -> 3C -> 2C`, rectifier after both layers. The first `C` outputs are
/// the new mean, the last `C` the new standard deviation.
#[derive(Clone, Debug)]
pub struct StyleSynthNet {
    pub fc1: Linear,
    pub fc2: Linear,
    channels: usize,
}

impl StyleSynthNet {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), 4 * channels, 3 * channels, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), 3 * channels, 2 * channels, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Graph-level forward. `noise` holds one tensor per input vector
    /// (`mu1, sd1, mu2, sd2`), each shaped like the statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: [NodeId; 4],
        noise: Option<[Tensor; 4]>,
    ) -> Result<(NodeId, NodeId)> {
        for &i in &inputs {
            let (_, c) = g.value(i).dims2()?;
            if c != self.channels {
                return shape_err(format!(
                    "style synthesis expects {} channels, got {c}",
                    self.channels
                ));
            }
        }
        let mut parts = Vec::with_capacity(4);
        match noise {
            Some(noise) => {
                for (i, d) in inputs.into_iter().zip(noise) {
                    let d = g.input(d);
                    parts.push(g.add(i, d)?);
                }
            }
            None => parts.extend(inputs),
        }
        let x = g.concat_cols(&parts)?;
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        let o = self.fc2.forward(g, h)?;
        let o = g.relu(o);
        let mu = g.slice_cols(o, 0, self.channels)?;
        let sd = g.slice_cols(o, self.channels, self.channels)?;
        Ok((mu, sd))
    }
}

/// Additive Gaussian perturbation applied to every element of the four
/// style vectors before synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
}

impl NoiseSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if std.is_nan() || std < 0.0 || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Config(format!("invalid noise N({mean}, {std})")));
        }
        Ok(Self { mean, std })
    }

    pub fn sample(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> [Tensor; 4] {
        let draw = |rng: &mut ChaCha8Rng| -> Tensor {
            let data = if self.std == 0.0 {
                vec![self.mean; rows * cols]
            } else {
                let normal = Normal::new(self.mean, self.std).expect("validated std");
                (0..rows * cols).map(|_| normal.sample(rng)).collect()
            };
            Tensor::new(vec![rows, cols], data).expect("sized")
        };
        [draw(rng), draw(rng), draw(rng), draw(rng)]
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Admissible `[lo, hi]` interval for the distance between a synthesized
/// style vector and a source style vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleBand {
    pub lo: f64,
    pub hi: f64,
}

impl StyleBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let band = Self { lo, hi };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 0.0 && self.lo < self.hi && self.hi.is_finite()) {
            return Err(Error::Config(format!(
                "style band needs 0 <= lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn default_mean() -> Self {
        Self { lo: 1.5, hi: 3.5 }
    }

    pub fn default_std() -> Self {
        Self { lo: 0.1, hi: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixStyleConfig {
    pub beta_param: f64,
}

impl MixStyleConfig {
    pub fn new(beta_param: f64) -> Result<Self> {
        if beta_param.is_nan() || beta_param <= 0.0 || !beta_param.is_finite() {
            return Err(Error::Config(format!("MixStyle Beta parameter must be > 0, got {beta_param}")));
        }
        Ok(Self { beta_param })
    }

    /// One mixing coefficient per instance.
    pub fn sample_lambdas(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let beta = Beta::new(self.beta_param, self.beta_param).expect("validated");
        (0..n).map(|_| beta.sample(rng)).collect()
    }
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self { beta_param: 0.1 }
    }
}

/// Zero inside `[lo, hi]`, `lo - d` below, `d - hi` above.
pub fn band_hinge(d: f64, lo: f64, hi: f64) -> f64 {
    if d < lo {
        lo - d
    } else if d > hi {
        d - hi
    } else {
        0.0
    }
}

pub fn synthesize_style(
    net: &StyleSynthNet,
    params: &ParamSet,
    s1: &StyleStats,
    s2: &StyleStats,
    noise: NoiseSpec,
    seed: u64,
) -> Result<StyleStats> {
    if !s1.same_shape(s2) {
        return shape_err("style pair has mismatched shapes");
    }
    let mut g = Graph::new(params, false);
    let inputs = [
        g.input(s1.mean_tensor()),
        g.input(s1.std_tensor()),
        g.input(s2.mean_tensor()),
        g.input(s2.std_tensor()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = noise.sample(s1.batch(), s1.channels(), &mut rng);
    let (mu, sd) = net.forward(&mut g, inputs, Some(noise))?;
    StyleStats::from_tensors(g.value(mu), g.value(sd))
}

/// Sum of the four band hinges (new mean vs each source mean, new std vs
/// each source std), each computed per instance and averaged over the batch.
pub fn style_margin_loss(
    new: &StyleStats,
    s1: &StyleStats,
    s2: &StyleStats,
    band_mu: StyleBand,
    band_sigma: StyleBand,
) -> Result<f64> {
    band_mu.validate()?;
    band_sigma.validate()?;
    if !new.same_shape(s1) || !new.same_shape(s2) {
        return shape_err("style margin loss: mismatched statistics");
    }
    let n = new.batch();
    let mut total = 0.0;
    for i in 0..n {
        for src in [s1, s2] {
            total += band_hinge(
                l2_distance(new.mean_row(i), src.mean_row(i)),
                band_mu.lo,
                band_mu.hi,
            );
            total += band_hinge(
                l2_distance(new.std_row(i), src.std_row(i)),
                band_sigma.lo,
                band_sigma.hi,
            );
        }
    }
    Ok(total / n as f64)
}

/// Graph-level margin loss; the source statistics are treated as constants.
pub fn style_margin_loss_node(
    g: &mut Graph,
    new: (NodeId, NodeId),
    s1: (NodeId, NodeId),
    s2: (NodeId, NodeId),
    band_mu: StyleBand,
    band_sigma: StyleBand,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(4);
    for (mu_src, sd_src) in [s1, s2] {
        let mu_src = g.detach(mu_src);
        let sd_src = g.detach(sd_src);
        terms.push((g.band_hinge(new.0, mu_src, band_mu.lo, band_mu.hi)?, 1.0));
        terms.push((g.band_hinge(new.1, sd_src, band_sigma.lo, band_sigma.hi)?, 1.0));
    }
    g.weighted_sum(&terms)
}

pub fn mixstyle_baseline(
    s1: &StyleStats,
    s2: &StyleStats,
    cfg: MixStyleConfig,
    seed: u64,
) -> Result<StyleStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas = cfg.sample_lambdas(s1.batch(), &mut rng);
    mix_styles(s1, s2, &lambdas)
}

/// `lambda_i * s1 + (1 - lambda_i) * s2` for each instance `i`.
pub fn mix_styles(s1: &StyleStats, s2: &StyleStats, lambdas: &[f64]) -> Result<StyleStats> {
    if !s1.same_shape(s2) || lambdas.len() != s1.batch() {
        return shape_err("mixstyle: mismatched statistics or coefficients");
    }
    let c = s1.channels();
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(j, (x, y))| {
                let l = lambdas[j / c];
                l * x + (1.0 - l) * y
            })
            .collect()
    };
    StyleStats::new(
        s1.batch(),
        c,
        blend(s1.mean(), s2.mean()),
        blend(s1.std(), s2.std()).into_iter().map(|v| v.max(0.0)).collect(),
    )
}
