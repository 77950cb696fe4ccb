//! One optimization step builds the clean, styled and open branches on a
//! single graph, combines the loss terms and applies SGD with momentum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{OpenSynthesis, StyleAugment, TrainConfig};
use super::optim::{apply_bn_updates, Sgd};
use crate::backbone::Model;
use crate::data::{build_triplets, Dataset, Triplet};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::CE_FLOOR;
use crate::openmix::{baseline_half_crop, baseline_patch_replace, baseline_pixel_mean};
use crate::params::ParamId;
use crate::stylesynth::style_margin_loss_node;
use crate::tensor::Tensor;

/// Names of the logged loss components, in logging order.
pub const LOSS_COMPONENTS: [&str; 3] = ["ce", "disc", "sm"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub component: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub y1: Vec<usize>,
    pub y3: Vec<usize>,
}

impl TripletBatch {
    pub fn gather(data: &Dataset, triplets: &[Triplet]) -> Result<Self> {
        let pick = |f: fn(&Triplet) -> usize| -> Vec<usize> { triplets.iter().map(f).collect() };
        let (i1, i2, i3) = (pick(|t| t.x1), pick(|t| t.x2), pick(|t| t.x3));
        let labels = |idx: &[usize]| idx.iter().map(|&i| data.samples()[i].label).collect();
        Ok(Self {
            x1: data.batch(&i1)?,
            x2: data.batch(&i2)?,
            x3: data.batch(&i3)?,
            y1: labels(&i1),
            y3: labels(&i3),
        })
    }

    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f64,
    pub disc: f64,
    pub sm: f64,
    pub total: f64,
}

pub(crate) struct StepGraph {
    pub total: NodeId,
    pub losses: StepLosses,
    /// Style statistics for diagnostics: `(mu1, sd1, mu_new, sd_new)`.
    pub stats: Option<[NodeId; 4]>,
}

fn rows_per_sample(x: &Tensor) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    (0..n)
        .map(|i| Tensor::new(vec![c, h, w], x.row(i).to_vec()))
        .collect()
}

fn open_images(x1: &Tensor, x3: &Tensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (a, b) = (rows_per_sample(x1)?, rows_per_sample(x3)?);
    let size = x1.shape()[3];
    let patch = cfg.patch_for(size.min(x1.shape()[2]));
    let mixed = a
        .iter()
        .zip(&b)
        .map(|(p, q)| match cfg.open {
            OpenSynthesis::HalfCrop => baseline_half_crop(p, q),
            OpenSynthesis::PixelMean => baseline_pixel_mean(p, q),
            OpenSynthesis::PatchReplace => baseline_patch_replace(p, q, patch, rng.gen()),
            _ => unreachable!("image-space baselines only"),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&mixed.iter().collect::<Vec<_>>())
}

fn scalar(g: &Graph, id: NodeId) -> f64 {
    g.value(id).item()
}

/// Builds the full training objective for one batch on `g`.
pub(crate) fn build_step(
    model: &Model,
    g: &mut Graph,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepGraph> {
    let n = batch.len();
    let c = model.config.num_known;
    let open_index = model.head.open_index();
    if let Some(&bad) = batch.y1.iter().chain(&batch.y3).find(|&&y| y >= c) {
        return Err(Error::Label(format!("training label {bad} out of range for {c} known classes")));
    }
    if open_index.is_none() && (cfg.open != OpenSynthesis::None || cfg.weights.disc > 0.0) {
        return Err(Error::Config(
            "closed-set mode has no open class: use open = none and a zero disc weight".into(),
        ));
    }
    if cfg.open != OpenSynthesis::None && batch.y1.iter().zip(&batch.y3).any(|(a, b)| a == b) {
        return Err(Error::Label("open constituents must have different labels".into()));
    }
    let eps = model.config.epsilon;

    // Early encoder over every image that needs it.
    let mut parts = vec![&batch.x1];
    let styled_on = cfg.style != StyleAugment::None;
    if styled_on {
        parts.push(&batch.x2);
    }
    let open_imgs;
    match cfg.open {
        OpenSynthesis::Fab => parts.push(&batch.x3),
        o if o.is_image_space() => {
            open_imgs = open_images(&batch.x1, &batch.x3, cfg, rng)?;
            parts.push(&open_imgs);
        }
        _ => {}
    }
    let xin = g.input(Tensor::concat_rows(&parts)?);
    let f_all = model.encoder.early(g, xin)?;
    let mut next = 0;
    let mut take = |g: &mut Graph| -> Result<NodeId> {
        let r = g.slice_rows(f_all, next * n, n);
        next += 1;
        r
    };
    let f1 = take(g)?;
    let f2 = if styled_on { Some(take(g)?) } else { None };
    let fo = if cfg.open != OpenSynthesis::None { Some(take(g)?) } else { None };

    // Styled branch.
    let mut sm = None;
    let mut stats = None;
    let styled = match (cfg.style, f2) {
        (StyleAugment::Ssb, Some(f2)) => {
            let noise = model.noise_for(cfg.noise, n, rng);
            let s = model.styled_nodes(g, f1, f2, Some(noise))?;
            sm = Some(style_margin_loss_node(
                g,
                (s.mu_new, s.sd_new),
                (s.mu_src, s.sd_src),
                (s.mu_pair, s.sd_pair),
                cfg.band_mu,
                cfg.band_sigma,
            )?);
            stats = Some([s.mu_src, s.sd_src, s.mu_new, s.sd_new]);
            Some((s.restyled, s.mu_new, s.sd_new))
        }
        (StyleAugment::Mixstyle, Some(f2)) => {
            let mu1 = g.spatial_mean(f1)?;
            let sd1 = g.spatial_std(f1)?;
            let mu2 = g.spatial_mean(f2)?;
            let sd2 = g.spatial_std(f2)?;
            let lambdas = cfg.mixstyle.sample_lambdas(n, rng);
            let k = g.value(mu1).row_len();
            let blend = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
                let d = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .enumerate()
                    .map(|(j, (x, y))| lambdas[j / k] * x + (1.0 - lambdas[j / k]) * y)
                    .collect();
                Tensor::new(a.shape().to_vec(), d)
            };
            let mu_mix = blend(g.value(mu1), g.value(mu2))?;
            let sd_mix = blend(g.value(sd1), g.value(sd2))?;
            let mu_mix = g.input(mu_mix);
            let sd_mix = g.input(sd_mix);
            let mu_src = g.detach(mu1);
            let sd_src = g.detach(sd1);
            let restyled = g.restyle(f1, mu_src, sd_src, mu_mix, sd_mix, eps)?;
            stats = Some([mu1, sd1, mu_mix, sd_mix]);
            Some((restyled, mu_mix, sd_mix))
        }
        _ => None,
    };

    // Open constituents, each optionally routed through the styled branch
    // using the triplet's synthesized style as target.
    let route = |rng: &mut ChaCha8Rng| -> Vec<bool> {
        (0..n)
            .map(|_| styled.is_some() && rng.gen_bool(cfg.style_route_prob))
            .collect()
    };
    let restyle_to_target = |g: &mut Graph, f: NodeId| -> Result<NodeId> {
        let (_, mu_t, sd_t) = styled.expect("styled branch present");
        let mu = g.spatial_mean(f)?;
        let sd = g.spatial_std(f)?;
        g.restyle(f, mu, sd, mu_t, sd_t, eps)
    };
    let mut late_rows = vec![f1];
    if let Some((f1s, _, _)) = styled {
        late_rows.push(f1s);
    }
    let mut open_parts = 0;
    if let Some(fo) = fo {
        let mut constituents = Vec::new();
        if cfg.open == OpenSynthesis::Fab {
            let r1 = route(rng);
            constituents.push(match styled {
                Some((f1s, _, _)) if r1.iter().any(|&r| r) => g.select_rows(f1s, f1, r1)?,
                _ => f1,
            });
        }
        let r = route(rng);
        constituents.push(if r.iter().any(|&x| x) {
            let fs = restyle_to_target(g, fo)?;
            g.select_rows(fs, fo, r)?
        } else {
            fo
        });
        open_parts = constituents.len();
        late_rows.extend(constituents);
    }
    let late_in = g.concat_rows(&late_rows)?;
    let e_all = model.encoder.late(g, late_in)?;
    let closed_rows = n * if styled.is_some() { 2 } else { 1 };
    let mut head_rows = vec![g.slice_rows(e_all, 0, closed_rows)?];
    if open_parts == 2 {
        let e1 = g.slice_rows(e_all, closed_rows, n)?;
        let e3 = g.slice_rows(e_all, closed_rows + n, n)?;
        head_rows.push(model.fanet.forward(g, e1, e3)?.0);
    } else if open_parts == 1 {
        head_rows.push(g.slice_rows(e_all, closed_rows, n)?);
    }
    let e_head = g.concat_rows(&head_rows)?;
    let p = model.posteriors(g, e_head)?;

    let mut labels = batch.y1.clone();
    if styled.is_some() {
        labels.extend_from_slice(&batch.y1);
    }
    if open_parts > 0 {
        labels.extend(std::iter::repeat(c).take(n));
    }
    let ce = g.cross_entropy(p, &labels, CE_FLOOR)?;

    let disc = match open_index {
        Some(oi) => {
            let closed = g.slice_rows(p, 0, closed_rows)?;
            let margin = g.closed_margin(closed, oi)?;
            let mut terms = vec![(margin, -1.0)];
            if open_parts > 0 {
                let open = g.slice_rows(p, closed_rows, n)?;
                terms.push((g.entropy(open)?, 1.0));
            }
            Some(g.weighted_sum(&terms)?)
        }
        None => None,
    };

    let w = cfg.weights;
    let mut terms = vec![(ce, w.ce)];
    if let Some(d) = disc {
        terms.push((d, w.disc));
    }
    if let Some(s) = sm {
        terms.push((s, w.sm));
    }
    let total = g.weighted_sum(&terms)?;
    let losses = StepLosses {
        ce: scalar(g, ce),
        disc: disc.map_or(0.0, |d| scalar(g, d)),
        sm: sm.map_or(0.0, |s| scalar(g, s)),
        total: scalar(g, total),
    };
    Ok(StepGraph { total, losses, stats })
}

fn summarize(t: &Tensor) -> serde_json::Value {
    let d = t.data();
    let finite: Vec<f64> = d.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    serde_json::json!({
        "shape": t.shape(),
        "non_finite": d.len() - finite.len(),
        "mean": mean,
        "min": finite.iter().copied().fold(f64::INFINITY, f64::min),
        "max": finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Result of [`train`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub steps: usize,
    pub final_losses: StepLosses,
}

/// One SGD step on `batch`; returns the loss values before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepLosses> {
    let (losses, grads, bn) = {
        let mut g = Graph::new(&model.params, true);
        let sg = build_step(model, &mut g, batch, cfg, rng)?;
        let l = sg.losses;
        if ![l.ce, l.disc, l.sm, l.total].iter().all(|v| v.is_finite()) {
            let mut dump = serde_json::json!({ "losses": l, "labels": batch.y1 });
            if let Some([mu, sd, mu_new, sd_new]) = sg.stats {
                dump["mu_src"] = summarize(g.value(mu));
                dump["sd_src"] = summarize(g.value(sd));
                dump["mu_new"] = summarize(g.value(mu_new));
                dump["sd_new"] = summarize(g.value(sd_new));
            }
            return Err(Error::NonFinite {
                step,
                dump: dump.to_string(),
            });
        }
        let grads = g.backward(sg.total)?;
        let trainable: Vec<(ParamId, Vec<f64>)> = model
            .params
            .ids()
            .filter(|&id| model.params.entry(id).trainable)
            .filter_map(|id| grads.param(id).map(|gr| (id, gr.to_vec())))
            .collect();
        (l, trainable, g.take_bn_updates())
    };
    opt.step(&mut model.params, &grads);
    apply_bn_updates(&mut model.params, &bn);
    Ok(losses)
}

/// Trains on `data` (labels `0..C`) for `cfg.epochs` epochs of triplets.
/// `on_epoch(epoch, model)` runs after each epoch, e.g. to checkpoint.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let labels = data.labels();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7A41);
    let mut history = Vec::new();
    let mut step = 0;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let triplets = build_triplets(&labels, epoch, cfg.reshuffle_period, cfg.seed)?;
        let epoch_cfg = cfg.at_epoch(epoch);
        for chunk in triplets.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = TripletBatch::gather(data, chunk)?;
            let l = train_step(model, &mut opt, &batch, &epoch_cfg, &mut rng, step)?;
            for (name, v) in LOSS_COMPONENTS.iter().zip([l.ce, l.disc, l.sm]) {
                history.push(LossRecord {
                    step,
                    component: (*name).to_string(),
                    value: v,
                });
            }
            log::debug!("step {step}: ce {:.4} disc {:.4} sm {:.4}", l.ce, l.disc, l.sm);
            last = Some(l);
            step += 1;
        }
        on_epoch(epoch, model)?;
    }
    let final_losses = last.ok_or_else(|| Error::Empty("no batch with at least two triplets".into()))?;
    Ok(TrainOutcome {
        history,
        steps: step,
        final_losses,
    })
}

/// Fraction of `data` classified correctly by the clean path.
pub fn training_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let post = model.forward_clean(&data.batch(chunk)?)?;
        correct += chunk
            .iter()
            .zip(&post)
            .filter(|(&i, p)| p.argmax() == data.samples()[i].label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
