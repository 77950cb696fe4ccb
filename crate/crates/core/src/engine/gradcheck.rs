//! Central finite-difference verification of the analytic gradients.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
//! Coordinates whose forward and backward one-sided differences disagree
//! sit on a kink (rectifier, max, absolute value, hinge corner) and are
//! skipped and replaced by another sample.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::CE_FLOOR;
use crate::nn::Linear;
use crate::openmix::FeatAggNet;
use crate::params::{ParamId, ParamSet};
use crate::stylesynth::{style_margin_loss_node, NoiseSpec, StyleBand, StyleSynthNet};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-6;
/// One-sided differences further apart than this (relative to
/// `max(1, |fwd|, |bwd|)`) mark a non-differentiable point.
pub const KINK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradComponent {
    /// Style synthesis network, margin loss and restyling.
    Ssnet,
    /// Feature aggregation network and mixing, batch norm frozen.
    Fanet,
    /// Classifier head with cross-entropy.
    Head,
    /// Cross-entropy and the discriminability loss w.r.t. logits.
    Losses,
    /// Toy encoder convolutions, pooling and the seam restyle.
    Encoder,
}

impl GradComponent {
    pub const ALL: [GradComponent; 5] = [
        GradComponent::Ssnet,
        GradComponent::Fanet,
        GradComponent::Head,
        GradComponent::Losses,
        GradComponent::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradComponent::Ssnet => "ssnet",
            GradComponent::Fanet => "fanet",
            GradComponent::Head => "head",
            GradComponent::Losses => "losses",
            GradComponent::Encoder => "encoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            samples: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: GradComponent,
    pub step: f64,
    pub sampled: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst_index: usize,
    pub passed: bool,
}

/// Checks `analytic` against central differences of `f` at `point`.
pub fn check_function(
    component: GradComponent,
    point: &[f64],
    analytic: &[f64],
    f: impl Fn(&[f64]) -> Result<f64>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape("gradient length differs from point length".into()));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "{}: non-finite analytic gradient at coordinate {i}",
            component.name()
        )));
    }
    let mut order: Vec<usize> = (0..point.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let f0 = f(point)?;
    let mut x = point.to_vec();
    let h = cfg.step;
    let (mut sampled, mut skipped, mut worst, mut worst_i) = (0, 0, 0.0f64, 0);
    for &i in &order {
        if sampled >= cfg.samples {
            break;
        }
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "{}: non-finite loss when perturbing coordinate {i}",
                component.name()
            )));
        }
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > KINK_TOLERANCE * 1f64.max(fwd.abs()).max(bwd.abs()) {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst {
            worst = rel;
            worst_i = i;
        }
        sampled += 1;
    }
    Ok(GradCheckReport {
        component,
        step: h,
        sampled,
        skipped_kinks: skipped,
        max_rel_error: worst,
        worst_index: worst_i,
        passed: sampled >= cfg.samples.min(point.len()) && worst < TOLERANCE,
    })
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Flattens the listed parameters, checks the scalar loss built by `build`.
fn check_params(
    component: GradComponent,
    params: &ParamSet,
    ids: &[ParamId],
    build: impl Fn(&mut Graph) -> Result<NodeId>,
    train: bool,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(params, train);
        let root = build(&mut g)?;
        let grads = g.backward(root)?;
        ids.iter()
            .flat_map(|&id| {
                grads
                    .param(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; params.get(id).len()])
            })
            .collect::<Vec<f64>>()
    };
    let point: Vec<f64> = ids.iter().flat_map(|&id| params.get(id).data().to_vec()).collect();
    let eval = |x: &[f64]| -> Result<f64> {
        let mut ps = params.clone();
        let mut off = 0;
        for &id in ids {
            let t = ps.get_mut(id).data_mut();
            t.copy_from_slice(&x[off..off + t.len()]);
            off += t.len();
        }
        let mut g = Graph::new(&ps, train);
        let root = build(&mut g)?;
        Ok(g.value(root).item())
    };
    check_function(component, &point, &analytic, eval, cfg)
}

fn linear_ids(l: &Linear) -> [ParamId; 2] {
    [l.weight, l.bias]
}

fn check_ssnet(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (c, n) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    let net = StyleSynthNet::new(&mut ps, "ssnet", c, &mut rng);
    let feat = random_tensor(&[n, c, 3, 3], -2.0, 2.0, &mut rng);
    let pair = random_tensor(&[n, c, 3, 3], -2.0, 2.0, &mut rng);
    let noise = NoiseSpec::default().sample(n, c, &mut rng);
    let weights: Vec<f64> = (0..feat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Narrow bands so that every hinge is active on one side or the other.
    let (band_mu, band_sd) = (StyleBand { lo: 1.0, hi: 1.2 }, StyleBand { lo: 0.5, hi: 0.6 });
    let ids: Vec<ParamId> = linear_ids(&net.fc1).into_iter().chain(linear_ids(&net.fc2)).collect();
    check_params(
        GradComponent::Ssnet,
        &ps,
        &ids,
        |g| {
            let f = g.input(feat.clone());
            let f2 = g.input(pair.clone());
            let mu1 = g.spatial_mean(f)?;
            let sd1 = g.spatial_std(f)?;
            let mu2 = g.spatial_mean(f2)?;
            let sd2 = g.spatial_std(f2)?;
            let (mu, sd) = net.forward(g, [mu1, sd1, mu2, sd2], Some(noise.clone()))?;
            let sm = style_margin_loss_node(g, (mu, sd), (mu1, sd1), (mu2, sd2), band_mu, band_sd)?;
            let styled = g.restyle(f, mu1, sd1, mu, sd, 1e-5)?;
            let probe = g.dot(styled, weights.clone())?;
            g.weighted_sum(&[(sm, 1.0), (probe, 0.1)])
        },
        true,
        cfg,
    )
}

fn check_fanet(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (d, n) = (12, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut ps = ParamSet::new();
    let net = FeatAggNet::new(&mut ps, "fanet", d, 0.1, &mut rng);
    // Nontrivial frozen statistics.
    *ps.get_mut(net.bn.params.running_mean) = random_tensor(&[d], -0.5, 0.5, &mut rng);
    *ps.get_mut(net.bn.params.running_var) = random_tensor(&[d], 0.5, 2.0, &mut rng);
    *ps.get_mut(net.bn.params.gamma) = random_tensor(&[d], 0.5, 1.5, &mut rng);
    *ps.get_mut(net.bn.params.beta) = random_tensor(&[d], -0.5, 0.5, &mut rng);
    let e1 = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
    let e3 = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
    let weights: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut ids: Vec<ParamId> = linear_ids(&net.fc1).to_vec();
    ids.extend([net.bn.params.gamma, net.bn.params.beta]);
    ids.extend(linear_ids(&net.fc2));
    check_params(
        GradComponent::Fanet,
        &ps,
        &ids,
        |g| {
            let a = g.input(e1.clone());
            let b = g.input(e3.clone());
            let (open, _) = net.forward(g, a, b)?;
            g.dot(open, weights.clone())
        },
        false,
        cfg,
    )
}

fn check_head(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (d, c, n) = (10, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut ps = ParamSet::new();
    let head = Linear::new(&mut ps, "head.fc", d, c + 1, &mut rng);
    let e = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % (c + 1)).collect();
    check_params(
        GradComponent::Head,
        &ps,
        &linear_ids(&head),
        |g| {
            let x = g.input(e.clone());
            let logits = head.forward(g, x)?;
            let p = g.softmax(logits)?;
            g.cross_entropy(p, &labels, CE_FLOOR)
        },
        true,
        cfg,
    )
}

fn disc_objective(g: &mut Graph, logits: NodeId, n_closed: usize, n_open: usize, c: usize) -> Result<NodeId> {
    let p = g.softmax(logits)?;
    let mut labels: Vec<usize> = (0..n_closed).map(|i| i % c).collect();
    labels.extend(std::iter::repeat(c).take(n_open));
    let ce = g.cross_entropy(p, &labels, CE_FLOOR)?;
    let closed = g.slice_rows(p, 0, n_closed)?;
    let open = g.slice_rows(p, n_closed, n_open)?;
    let ent = g.entropy(open)?;
    let margin = g.closed_margin(closed, c)?;
    g.weighted_sum(&[(ce, 1.0), (ent, 1.0), (margin, -1.0)])
}

fn check_losses(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (c, n_closed, n_open) = (5, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let logits = random_tensor(&[n_closed + n_open, c + 1], -3.0, 3.0, &mut rng);
    let empty = ParamSet::new();
    let analytic = {
        let mut g = Graph::new(&empty, true);
        let x = g.input_with_grad(logits.clone());
        let root = disc_objective(&mut g, x, n_closed, n_open, c)?;
        g.backward(root)?.wrt(x).expect("input gradient").to_vec()
    };
    let f = |v: &[f64]| -> Result<f64> {
        let mut g = Graph::new(&empty, true);
        let x = g.input(Tensor::new(logits.shape().to_vec(), v.to_vec())?);
        let root = disc_objective(&mut g, x, n_closed, n_open, c)?;
        Ok(g.value(root).item())
    };
    check_function(GradComponent::Losses, logits.data(), &analytic, f, cfg)
}

fn check_encoder(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let model = Model::new(ModelConfig::toy(3, 8, cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let x = random_tensor(&[2, 3, 8, 8], -2.0, 2.0, &mut rng);
    let x2 = random_tensor(&[2, 3, 8, 8], -2.0, 2.0, &mut rng);
    let noise = NoiseSpec::default().sample(2, model.encoder.feat_channels(), &mut rng);
    let labels = vec![0, 2];
    let ids: Vec<ParamId> = model
        .params
        .ids()
        .filter(|&id| {
            let e = model.params.entry(id);
            e.trainable && (e.name.starts_with("encoder.") || e.name.starts_with("ssnet."))
        })
        .collect();
    check_params(
        GradComponent::Encoder,
        &model.params,
        &ids,
        |g| {
            let xi = g.input(Tensor::concat_rows(&[&x, &x2])?);
            let f = model.encoder.early(g, xi)?;
            let f1 = g.slice_rows(f, 0, 2)?;
            let f2 = g.slice_rows(f, 2, 2)?;
            let s = model.styled_nodes(g, f1, f2, Some(noise.clone()))?;
            let both = g.concat_rows(&[f1, s.restyled])?;
            let e = model.encoder.late(g, both)?;
            let p = model.posteriors(g, e)?;
            let mut y = labels.clone();
            y.extend_from_slice(&labels);
            g.cross_entropy(p, &y, CE_FLOOR)
        },
        true,
        cfg,
    )
}

pub fn grad_check(component: GradComponent, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    match component {
        GradComponent::Ssnet => check_ssnet(cfg),
        GradComponent::Fanet => check_fanet(cfg),
        GradComponent::Head => check_head(cfg),
        GradComponent::Losses => check_losses(cfg),
        GradComponent::Encoder => check_encoder(cfg),
    }
}

pub fn grad_check_all(cfg: GradCheckConfig) -> Result<HashMap<GradComponent, GradCheckReport>> {
    GradComponent::ALL
        .iter()
        .map(|&c| grad_check(c, cfg).map(|r| (c, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_hinge_region_has_zero_gradient() {
        // Distances well inside a wide band: analytic and numeric both 0.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let net = StyleSynthNet::new(&mut ps, "ssnet", 4, &mut rng);
        let s = random_tensor(&[2, 4], 0.5, 1.0, &mut rng);
        let band = StyleBand { lo: 0.0, hi: 1e6 };
        let ids = linear_ids(&net.fc1);
        let r = check_params(
            GradComponent::Ssnet,
            &ps,
            &ids,
            |g| {
                let a = g.input(s.clone());
                let (mu, sd) = net.forward(g, [a, a, a, a], None)?;
                style_margin_loss_node(g, (mu, sd), (a, a), (a, a), band, band)
            },
            true,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let point = [1.0, 2.0];
        let ok = check_function(GradComponent::Losses, &point, &[2.0, 4.0], f, GradCheckConfig::default()).unwrap();
        assert!(ok.passed);
        let bad = check_function(GradComponent::Losses, &point, &[2.0, 4.1], f, GradCheckConfig::default()).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_index, 1);
    }

    #[test]
    fn kink_is_skipped() {
        let f = |x: &[f64]| Ok(x[0].abs() + x[1]);
        let r = check_function(GradComponent::Losses, &[0.0, 1.0], &[0.0, 1.0], f, GradCheckConfig::default()).unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.sampled, 1);
    }
}
