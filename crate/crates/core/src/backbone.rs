//! Split encoder `late ∘ early` with a style seam between the two halves, the
//! `C+1`-way classifier head, and the three forward paths (clean, styled,
//! open) assembled into a [`Model`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::featstats::StatsConfig;
use crate::graph::{Graph, NodeId, PoolSpec};
use crate::nn::{BatchNorm, Conv2d, Linear};
use crate::openmix::FeatAggNet;
use crate::params::{ParamSet, uniform_fan_in};
use crate::stylesynth::{NoiseSpec, StyleSynthNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Four 3x3 conv blocks, 64-d embedding; for small images.
    Toy,
    /// ResNet-18 layout, 512-d embedding.
    Resnet18,
}

/// Where the encoder is cut for style injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitDepth {
    Shallow,
    Default,
    Deep,
}

impl SplitDepth {
    pub const ALL: [SplitDepth; 3] = [SplitDepth::Shallow, SplitDepth::Default, SplitDepth::Deep];

    pub fn name(self) -> &'static str {
        match self {
            SplitDepth::Shallow => "shallow",
            SplitDepth::Default => "default",
            SplitDepth::Deep => "deep",
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

#[derive(Clone, Debug)]
enum Unit {
    ConvBnRelu(Conv2d, BatchNorm),
    MaxPool(PoolSpec),
    Basic(Box<BasicBlock>),
}

impl Unit {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Unit::ConvBnRelu(c, bn) => {
                let y = c.forward(g, x)?;
                let y = bn.forward(g, y)?;
                Ok(g.relu(y))
            }
            Unit::MaxPool(spec) => g.max_pool(x, *spec),
            Unit::Basic(b) => {
                let y = b.conv1.forward(g, x)?;
                let y = b.bn1.forward(g, y)?;
                let y = g.relu(y);
                let y = b.conv2.forward(g, y)?;
                let y = b.bn2.forward(g, y)?;
                let skip = match &b.down {
                    Some((c, bn)) => {
                        let s = c.forward(g, x)?;
                        bn.forward(g, s)?
                    }
                    None => x,
                };
                let y = g.add(y, skip)?;
                Ok(g.relu(y))
            }
        }
    }
}

/// Encoder cut into `early` (image → feature map) and `late` (feature map →
/// pooled embedding).
#[derive(Clone, Debug)]
pub struct SplitEncoder {
    arch: Architecture,
    split: SplitDepth,
    early: Vec<Unit>,
    late: Vec<Unit>,
    feat_channels: usize,
    embed_dim: usize,
}

const TOY_POOL: PoolSpec = PoolSpec {
    kernel: 2,
    stride: 2,
    pad: 0,
};

impl SplitEncoder {
    pub fn new(
        ps: &mut ParamSet,
        arch: Architecture,
        split: SplitDepth,
        in_channels: usize,
        bn_momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Each stage is a list of units; the seam sits after stage `cut`.
        let (stages, channels, embed_dim, cut): (Vec<Vec<Unit>>, Vec<usize>, usize, usize) =
            match arch {
                Architecture::Toy => {
                    let mut block = |name: &str, i, o| {
                        Unit::ConvBnRelu(
                            Conv2d::new(ps, &format!("{name}.conv"), i, o, 3, 1, 1, false, rng),
                            BatchNorm::new(ps, &format!("{name}.bn"), o, bn_momentum),
                        )
                    };
                    let stages = vec![
                        vec![block("encoder.block1", in_channels, 16), Unit::MaxPool(TOY_POOL)],
                        vec![block("encoder.block2", 16, 16)],
                        vec![block("encoder.block3", 16, 32), Unit::MaxPool(TOY_POOL)],
                        vec![block("encoder.block4", 32, 64)],
                    ];
                    let cut = match split {
                        SplitDepth::Shallow => 1,
                        SplitDepth::Default => 2,
                        SplitDepth::Deep => 3,
                    };
                    (stages, vec![16, 16, 32, 64], 64, cut)
                }
                Architecture::Resnet18 => {
                    let stem = vec![
                        Unit::ConvBnRelu(
                            Conv2d::new(ps, "encoder.conv1", in_channels, 64, 7, 2, 3, false, rng),
                            BatchNorm::new(ps, "encoder.bn1", 64, bn_momentum),
                        ),
                        Unit::MaxPool(PoolSpec {
                            kernel: 3,
                            stride: 2,
                            pad: 1,
                        }),
                    ];
                    let mut stages = vec![stem];
                    let mut inp = 64;
                    for (li, out) in [64usize, 128, 256, 512].into_iter().enumerate() {
                        let mut units = Vec::new();
                        for bi in 0..2 {
                            let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                            let name = format!("encoder.layer{}.{}", li + 1, bi);
                            let down = (stride != 1 || inp != out).then(|| {
                                (
                                    Conv2d::new(ps, &format!("{name}.downsample.0"), inp, out, 1, stride, 0, false, rng),
                                    BatchNorm::new(ps, &format!("{name}.downsample.1"), out, bn_momentum),
                                )
                            });
                            units.push(Unit::Basic(Box::new(BasicBlock {
                                conv1: Conv2d::new(ps, &format!("{name}.conv1"), inp, out, 3, stride, 1, false, rng),
                                bn1: BatchNorm::new(ps, &format!("{name}.bn1"), out, bn_momentum),
                                conv2: Conv2d::new(ps, &format!("{name}.conv2"), out, out, 3, 1, 1, false, rng),
                                bn2: BatchNorm::new(ps, &format!("{name}.bn2"), out, bn_momentum),
                                down,
                            })));
                            inp = out;
                        }
                        stages.push(units);
                    }
                    let cut = match split {
                        SplitDepth::Shallow => 1,
                        SplitDepth::Default => 2,
                        SplitDepth::Deep => 3,
                    };
                    (stages, vec![64, 64, 128, 256, 512], 512, cut)
                }
            };
        let feat_channels = channels[cut - 1];
        let mut early = Vec::new();
        let mut late = Vec::new();
        for (i, stage) in stages.into_iter().enumerate() {
            if i < cut {
                early.extend(stage);
            } else {
                late.extend(stage);
            }
        }
        Self {
            arch,
            split,
            early,
            late,
            feat_channels,
            embed_dim,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn split(&self) -> SplitDepth {
        self.split
    }

    /// Channel count of the seam feature map.
    pub fn feat_channels(&self) -> usize {
        self.feat_channels
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn early(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.early.iter().try_fold(x, |h, u| u.forward(g, h))
    }

    pub fn late(&self, g: &mut Graph, f: NodeId) -> Result<NodeId> {
        let h = self.late.iter().try_fold(f, |h, u| u.forward(g, h))?;
        g.global_avg_pool(h)
    }
}

/// Affine map from the embedding to `C+1` logits (`C` in closed-set mode).
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: Linear,
    num_known: usize,
    open_set: bool,
}

impl ClassifierHead {
    pub fn new(
        ps: &mut ParamSet,
        dim: usize,
        num_known: usize,
        open_set: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let outputs = num_known + usize::from(open_set);
        Self {
            fc: Linear::new(ps, "head.fc", dim, outputs, rng),
            num_known,
            open_set,
        }
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    pub fn open_set(&self) -> bool {
        self.open_set
    }

    pub fn num_outputs(&self) -> usize {
        self.num_known + usize::from(self.open_set)
    }

    /// Index of the open class, if the head has one.
    pub fn open_index(&self) -> Option<usize> {
        self.open_set.then_some(self.num_known)
    }

    pub fn logits(&self, g: &mut Graph, e: NodeId) -> Result<NodeId> {
        self.fc.forward(g, e)
    }
}

/// Softmax output of the classifier for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorVector(Vec<f64>);

impl PosteriorVector {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("posterior with no classes".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue("posterior entry outside [0, 1]".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidValue(format!("posterior sums to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the highest posterior (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn from_rows(t: &Tensor) -> Result<Vec<Self>> {
        let (n, _) = t.dims2()?;
        (0..n).map(|i| Self::new(t.row(i).to_vec())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub split_depth: SplitDepth,
    pub num_known: usize,
    /// `false` gives a `C`-way head with no open class.
    pub open_set: bool,
    pub in_channels: usize,
    pub image_size: usize,
    pub epsilon: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(num_known: usize, image_size: usize, seed: u64) -> Self {
        Self {
            arch: Architecture::Toy,
            split_depth: SplitDepth::Default,
            num_known,
            open_set: true,
            in_channels: 3,
            image_size,
            epsilon: StatsConfig::default().epsilon,
            bn_momentum: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_known == 0 {
            return Err(Error::Config("num_known must be at least 1".into()));
        }
        if !self.open_set && self.num_known < 2 {
            return Err(Error::Config("closed-set mode needs at least 2 classes".into()));
        }
        StatsConfig::new(self.epsilon)?;
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        if self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("image shape must be nonzero".into()));
        }
        Ok(())
    }
}

/// Encoder, head, style synthesis and feature aggregation networks sharing
/// one parameter set.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: SplitEncoder,
    pub head: ClassifierHead,
    pub ssnet: StyleSynthNet,
    pub fanet: FeatAggNet,
}

/// Intermediate nodes of the styled branch.
#[derive(Clone, Copy, Debug)]
pub struct StyledNodes {
    pub mu_src: NodeId,
    pub sd_src: NodeId,
    pub mu_pair: NodeId,
    pub sd_pair: NodeId,
    pub mu_new: NodeId,
    pub sd_new: NodeId,
    pub restyled: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpenOptions {
    /// Probability of routing each constituent through the styled branch.
    pub style_route_prob: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Replaces the learned mixing weights with a constant.
    pub alpha_override: Option<f64>,
}

impl Default for OpenOptions {
    fn default() -> Self {
        Self {
            style_route_prob: 0.0,
            noise: NoiseSpec::default(),
            seed: 0,
            alpha_override: None,
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let encoder = SplitEncoder::new(
            &mut params,
            config.arch,
            config.split_depth,
            config.in_channels,
            config.bn_momentum,
            &mut rng,
        );
        let head = ClassifierHead::new(
            &mut params,
            encoder.embed_dim(),
            config.num_known,
            config.open_set,
            &mut rng,
        );
        let ssnet = StyleSynthNet::new(&mut params, "ssnet", encoder.feat_channels(), &mut rng);
        let fanet = FeatAggNet::new(
            &mut params,
            "fanet",
            encoder.embed_dim(),
            config.bn_momentum,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            head,
            ssnet,
            fanet,
        })
    }

    pub fn stats_config(&self) -> StatsConfig {
        StatsConfig {
            epsilon: self.config.epsilon,
        }
    }

    pub fn check_images(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if n == 0 || c != self.config.in_channels || h != s || w != s {
            return shape_err(format!(
                "expected images of shape (N, {}, {s}, {s}), got {:?}",
                self.config.in_channels,
                x.shape()
            ));
        }
        Ok(())
    }

    /// Style branch: stats of `f` and its pair, synthesized style, restyled `f`.
    pub fn styled_nodes(
        &self,
        g: &mut Graph,
        f: NodeId,
        f_pair: NodeId,
        noise: Option<[Tensor; 4]>,
    ) -> Result<StyledNodes> {
        let mu_src = g.spatial_mean(f)?;
        let sd_src = g.spatial_std(f)?;
        let (mu_pair, sd_pair) = if f_pair == f {
            (mu_src, sd_src)
        } else {
            (g.spatial_mean(f_pair)?, g.spatial_std(f_pair)?)
        };
        let (mu_new, sd_new) = self
            .ssnet
            .forward(g, [mu_src, sd_src, mu_pair, sd_pair], noise)?;
        let restyled = g.restyle(f, mu_src, sd_src, mu_new, sd_new, self.config.epsilon)?;
        Ok(StyledNodes {
            mu_src,
            sd_src,
            mu_pair,
            sd_pair,
            mu_new,
            sd_new,
            restyled,
        })
    }

    pub fn noise_for(&self, noise: NoiseSpec, rows: usize, rng: &mut ChaCha8Rng) -> [Tensor; 4] {
        noise.sample(rows, self.encoder.feat_channels(), rng)
    }

    pub fn posteriors(&self, g: &mut Graph, e: NodeId) -> Result<NodeId> {
        let logits = self.head.logits(g, e)?;
        g.softmax(logits)
    }

    fn embed(&self, g: &mut Graph, x: &Tensor) -> Result<NodeId> {
        self.check_images(x)?;
        let xi = g.input(x.clone());
        let f = self.encoder.early(g, xi)?;
        self.encoder.late(g, f)
    }

    /// Clean path in evaluation mode.
    pub fn forward_clean(&self, x: &Tensor) -> Result<Vec<PosteriorVector>> {
        let mut g = Graph::new(&self.params, false);
        let e = self.embed(&mut g, x)?;
        let p = self.posteriors(&mut g, e)?;
        PosteriorVector::from_rows(g.value(p))
    }

    /// Embeddings of the clean path in evaluation mode.
    pub fn embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false);
        let e = self.embed(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    /// Restyles `early(x1)` with a style synthesized from the `(x1, x2)` pair
    /// and classifies it. Evaluation mode.
    pub fn forward_styled(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        labels: Option<(&[usize], &[usize])>,
        noise: NoiseSpec,
        seed: u64,
    ) -> Result<Vec<PosteriorVector>> {
        self.check_images(x1)?;
        if x1.shape() != x2.shape() {
            return shape_err("styled pair batches differ in shape");
        }
        if let Some((l1, l2)) = labels {
            if l1 != l2 {
                return Err(Error::Label("styled pair must share class labels".into()));
            }
        }
        let mut g = Graph::new(&self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let both = Tensor::concat_rows(&[x1, x2])?;
        let xi = g.input(both);
        let f = self.encoder.early(&mut g, xi)?;
        let n = x1.rows();
        let f1 = g.slice_rows(f, 0, n)?;
        let f2 = g.slice_rows(f, n, n)?;
        let noise = self.noise_for(noise, n, &mut rng);
        let styled = self.styled_nodes(&mut g, f1, f2, Some(noise))?;
        let e = self.encoder.late(&mut g, styled.restyled)?;
        let p = self.posteriors(&mut g, e)?;
        PosteriorVector::from_rows(g.value(p))
    }

    /// Fuses embeddings of `x1` and `x3` into pseudo-open samples and
    /// classifies them. Evaluation mode. Returns posteriors and `alpha`.
    pub fn forward_open(
        &self,
        x1: &Tensor,
        x3: &Tensor,
        labels: Option<(&[usize], &[usize])>,
        opts: OpenOptions,
    ) -> Result<(Vec<PosteriorVector>, Tensor)> {
        self.check_images(x1)?;
        if x1.shape() != x3.shape() {
            return shape_err("open pair batches differ in shape");
        }
        if let Some((l1, l3)) = labels {
            if l1.len() != l3.len() || l1.iter().zip(l3).any(|(a, b)| a == b) {
                return Err(Error::Label("open pair must have different class labels".into()));
            }
        }
        let n = x1.rows();
        let mut g = Graph::new(&self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let xi = g.input(Tensor::concat_rows(&[x1, x3])?);
        let f = self.encoder.early(&mut g, xi)?;
        let mut feats = Vec::with_capacity(2);
        for part in 0..2 {
            let fp = g.slice_rows(f, part * n, n)?;
            let route: Vec<bool> = (0..n)
                .map(|_| rng.gen_bool(opts.style_route_prob.clamp(0.0, 1.0)))
                .collect();
            if route.iter().any(|&r| r) {
                let noise = self.noise_for(opts.noise, n, &mut rng);
                let styled = self.styled_nodes(&mut g, fp, fp, Some(noise))?;
                feats.push(g.select_rows(styled.restyled, fp, route)?);
            } else {
                feats.push(fp);
            }
        }
        let both = g.concat_rows(&feats)?;
        let e = self.encoder.late(&mut g, both)?;
        let e1 = g.slice_rows(e, 0, n)?;
        let e3 = g.slice_rows(e, n, n)?;
        let (open, alpha) = match opts.alpha_override {
            Some(a) => {
                let shape = g.value(e1).shape().to_vec();
                let alpha = g.input(Tensor::full(&shape, a));
                (g.mix(alpha, e1, e3)?, alpha)
            }
            None => self.fanet.forward(&mut g, e1, e3)?,
        };
        let p = self.posteriors(&mut g, open)?;
        Ok((PosteriorVector::from_rows(g.value(p))?, g.value(alpha).clone()))
    }

    /// Zeroes the head so every posterior is uniform.
    pub fn zero_head(&mut self) {
        for id in [self.head.fc.weight, self.head.fc.bias] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Re-draws the head weights; used by tests that need a generic head.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.params.get(self.head.fc.weight).shape().to_vec();
        *self.params.get_mut(self.head.fc.weight) = uniform_fan_in(&w, w[1], 1.0, &mut rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![n, 3, size, size], data).unwrap()
    }

    #[test]
    fn reference_split_shapes() {
        let mut cfg = ModelConfig::toy(5, 128, 0);
        cfg.arch = Architecture::Resnet18;
        for (split, expect) in [
            (SplitDepth::Shallow, [64, 32, 32]),
            (SplitDepth::Default, [64, 32, 32]),
            (SplitDepth::Deep, [128, 16, 16]),
        ] {
            cfg.split_depth = split;
            let m = Model::new(cfg.clone()).unwrap();
            let mut g = Graph::new(&m.params, false);
            let x = g.input(images(1, 128, 1));
            let f = m.encoder.early(&mut g, x).unwrap();
            assert_eq!(&g.value(f).shape()[1..], &expect);
            if split == SplitDepth::Default {
                let e = m.encoder.late(&mut g, f).unwrap();
                assert_eq!(g.value(e).shape(), &[1, 512]);
                assert!(g.value(e).is_finite());
            }
        }
    }

    #[test]
    fn reference_encoder_parameter_counts() {
        let mut cfg = ModelConfig::toy(5, 128, 0);
        cfg.arch = Architecture::Resnet18;
        let m = Model::new(cfg).unwrap();
        let count = |prefixes: &[&str]| -> usize {
            m.params
                .entries()
                .iter()
                .filter(|e| e.trainable && prefixes.iter().any(|p| e.name.starts_with(p)))
                .map(|e| e.value.len())
                .sum()
        };
        let stem = ["encoder.conv1", "encoder.bn1"];
        assert_eq!(count(&stem), 9_536);
        assert_eq!(count(&[stem[0], stem[1], "encoder.layer1"]), 157_504);
        assert_eq!(count(&[stem[0], stem[1], "encoder.layer1", "encoder.layer2"]), 683_072);
        assert_eq!(
            count(&["encoder.layer2", "encoder.layer3", "encoder.layer4"]),
            11_019_008
        );
    }

    #[test]
    fn zero_head_gives_uniform_posterior() {
        let mut m = Model::new(ModelConfig::toy(5, 16, 0)).unwrap();
        m.zero_head();
        for p in m.forward_clean(&images(3, 16, 2)).unwrap() {
            assert!(p.probs().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        }
    }

    #[test]
    fn duplicate_rows_give_identical_posteriors() {
        let m = Model::new(ModelConfig::toy(3, 16, 4)).unwrap();
        let x = images(1, 16, 5);
        let xx = Tensor::concat_rows(&[&x, &x]).unwrap();
        let p = m.forward_clean(&xx).unwrap();
        assert_eq!(p[0], p[1]);
        let s: f64 = p[0].probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let m = Model::new(ModelConfig::toy(3, 16, 4)).unwrap();
        assert!(m.forward_clean(&images(1, 15, 0)).is_err());
        assert!(m.forward_clean(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
    }

    #[test]
    fn label_contracts() {
        let m = Model::new(ModelConfig::toy(3, 16, 4)).unwrap();
        let x = images(2, 16, 0);
        let y = images(2, 16, 1);
        assert!(m
            .forward_styled(&x, &y, Some((&[0, 1], &[0, 2])), NoiseSpec::default(), 0)
            .is_err());
        assert!(m
            .forward_open(&x, &y, Some((&[0, 1], &[2, 1])), OpenOptions::default())
            .is_err());
        assert!(m
            .forward_open(&x, &y, Some((&[0, 1], &[2, 0])), OpenOptions::default())
            .is_ok());
    }

    #[test]
    fn closed_set_head_has_no_open_output() {
        let mut cfg = ModelConfig::toy(4, 16, 0);
        cfg.open_set = false;
        let m = Model::new(cfg).unwrap();
        assert_eq!(m.head.open_index(), None);
        assert!(m.forward_clean(&images(2, 16, 0)).unwrap().iter().all(|p| p.len() == 4));
    }
}
