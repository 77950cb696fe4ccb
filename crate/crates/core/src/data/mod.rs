//! Labeled image collections, triplet sampling, known/unknown splits and the
//! dataset adapters (synthetic domains, manifests, raw digit archives).

mod digits;
mod manifest;
mod preprocess;
mod synthetic;

pub use digits::{load_digits, read_idx_images, read_idx_labels, DigitsSource, IdxImages};
pub use manifest::{parse_manifest, read_manifest, write_dataset_pngs, write_manifest, ManifestRecord};
pub use preprocess::{preprocess, preprocess_file, Normalization};
pub use synthetic::{
    generate_synthetic_domains, render_shape, Palette, ShapeKind, SyntheticDomainSpec, Texture,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// One preprocessed image of shape `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Unique across every dataset produced by one generator or manifest.
    pub id: u64,
    pub image: Tensor,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if first.image.ndim() != 3 {
                return shape_err(format!("images must be (C, H, W), got {:?}", first.image.shape()));
            }
            if let Some(bad) = samples.iter().find(|s| s.image.shape() != first.image.shape()) {
                return shape_err(format!(
                    "mixed image shapes {:?} and {:?}",
                    first.image.shape(),
                    bad.image.shape()
                ));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().map(|s| s.label).collect();
        set.into_iter().collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().map(|s| s.domain).collect();
        set.into_iter().collect()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn domain(&self, d: usize) -> Self {
        self.filter(|s| s.domain == d)
    }

    /// Stacks the selected images into a `[N, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&images)
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_means(&self) -> Vec<f64> {
        let Some(shape) = self.image_shape() else {
            return Vec::new();
        };
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let mut sums = vec![0.0; c];
        for s in &self.samples {
            for (ch, sum) in sums.iter_mut().enumerate() {
                *sum += s.image.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
            }
        }
        let n = (self.samples.len() * hw) as f64;
        sums.into_iter().map(|v| v / n).collect()
    }
}

impl FromIterator<Sample> for Dataset {
    fn from_iter<I: IntoIterator<Item = Sample>>(iter: I) -> Self {
        Self {
            samples: iter.into_iter().collect(),
        }
    }
}

/// Rejects any sample id shared by the two datasets.
pub fn check_disjoint(train: &Dataset, eval: &Dataset) -> Result<()> {
    let ids: HashSet<u64> = train.samples.iter().map(|s| s.id).collect();
    let shared = eval.samples.iter().filter(|s| ids.contains(&s.id)).count();
    if shared > 0 {
        return Err(Error::Label(format!(
            "{shared} evaluation samples also appear in the training stream"
        )));
    }
    Ok(())
}

/// Known/unknown label sets and the source/target domain assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSplit {
    pub known_labels: Vec<usize>,
    pub unknown_labels: Vec<usize>,
    pub source_domain: usize,
    pub target_domains: Vec<usize>,
}

impl DomainSplit {
    pub fn validate(&self) -> Result<()> {
        if self.known_labels.is_empty() {
            return Err(Error::Config("known label set is empty".into()));
        }
        let known: BTreeSet<_> = self.known_labels.iter().collect();
        if known.len() != self.known_labels.len() {
            return Err(Error::Config("duplicate known labels".into()));
        }
        if self.unknown_labels.iter().any(|l| known.contains(l)) {
            return Err(Error::Config("known and unknown label sets overlap".into()));
        }
        if self.target_domains.contains(&self.source_domain) {
            return Err(Error::Config("the source domain cannot also be a target".into()));
        }
        Ok(())
    }

    pub fn num_known(&self) -> usize {
        self.known_labels.len()
    }
}

/// Partitions `dataset` into a closed subset relabeled to `0..C` (in sorted
/// order of `known_labels`) and an open subset relabeled to `C`.
pub fn split_open(dataset: &Dataset, known_labels: &[usize]) -> Result<(Dataset, Dataset)> {
    if known_labels.is_empty() {
        return Err(Error::Config("known label set is empty".into()));
    }
    let present: BTreeSet<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let mut sorted: Vec<usize> = known_labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(l) = sorted.iter().find(|l| !present.contains(l)) {
        return Err(Error::Label(format!("known label {l} does not occur in the dataset")));
    }
    let remap: BTreeMap<usize, usize> = sorted.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let open_label = sorted.len();
    let (mut closed, mut open) = (Vec::new(), Vec::new());
    for s in &dataset.samples {
        let mut s = s.clone();
        match remap.get(&s.label) {
            Some(&k) => {
                s.label = k;
                closed.push(s);
            }
            None => {
                s.label = open_label;
                open.push(s);
            }
        }
    }
    Ok((Dataset { samples: closed }, Dataset { samples: open }))
}

/// Indices into a dataset: `x1`, `x2` share a label, `x3` has another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub x1: usize,
    pub x2: usize,
    pub x3: usize,
    pub y1: usize,
}

/// One triplet per sample (as `x1`), in an order and pairing that only
/// changes when `epoch / reshuffle_period` changes.
pub fn build_triplets(
    labels: &[usize],
    epoch: usize,
    reshuffle_period: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if reshuffle_period == 0 {
        return Err(Error::Config("reshuffle period must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Label(format!(
            "triplets need at least two classes, found {}",
            by_class.len()
        )));
    }
    for (label, members) in &by_class {
        if members.len() == 1 {
            log::warn!("class {label} has a single sample; it is paired with itself");
        }
    }
    let cycle = (epoch / reshuffle_period) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cycle.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let n = labels.len();
    Ok(order
        .into_iter()
        .map(|i| {
            let y = labels[i];
            let same = &by_class[&y];
            let x2 = if same.len() == 1 {
                i
            } else {
                loop {
                    let j = same[rng.gen_range(0..same.len())];
                    if j != i {
                        break j;
                    }
                }
            };
            let others = n - same.len();
            // k-th sample (in index order) outside class y.
            let mut k = rng.gen_range(0..others);
            let x3 = by_class
                .iter()
                .filter(|(&l, _)| l != y)
                .find_map(|(_, m)| {
                    if k < m.len() {
                        Some(m[k])
                    } else {
                        k -= m.len();
                        None
                    }
                })
                .expect("index within other classes");
            Triplet { x1: i, x2, x3, y1: y }
        })
        .collect())
}
