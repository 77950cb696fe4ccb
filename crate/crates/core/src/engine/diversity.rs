//! Cosine-distance diagnostics for synthesized styles and open embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::data::{build_triplets, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::stylesynth::NoiseSpec;
use crate::tensor::Tensor;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean cosine distance between `[mu; sigma]` of the source feature and
    /// the synthesized `[mu_new; sigma_new]`, per instance.
    pub style_distance: Option<f64>,
    /// Mean cosine distance between the clean embedding of `x1` and the
    /// fused open embedding of `(x1, x3)`, per instance.
    pub embedding_distance: Option<f64>,
    pub pairs: usize,
    /// Pairs skipped because one of the vectors had zero norm.
    pub zero_norm_pairs: usize,
    /// Set when every pair of at least one measurement was zero-norm.
    pub degenerate: bool,
}

/// `1 - cos(a, b)`, or `None` when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return None;
    }
    Some(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise distances averaged over the rows with nonzero norms.
fn mean_row_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> (Option<f64>, usize) {
    let d: Vec<f64> = a.iter().zip(b).filter_map(|(x, y)| cosine_distance(x, y)).collect();
    let skipped = a.len() - d.len();
    if d.is_empty() {
        (None, skipped)
    } else {
        (Some(d.iter().sum::<f64>() / d.len() as f64), skipped)
    }
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| [a.row(i), b.row(i)].concat()).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Samples up to `n_samples` triplets from `source` (labels `0..C`) and
/// measures style and embedding diversity in evaluation mode. `noise`
/// perturbs the style inputs as during training; `None` disables it.
pub fn style_diversity_report(
    model: &Model,
    source: &Dataset,
    n_samples: usize,
    noise: Option<NoiseSpec>,
    seed: u64,
) -> Result<DiversityReport> {
    if n_samples == 0 {
        return Err(Error::Empty("diversity sample count".into()));
    }
    let triplets = build_triplets(&source.labels(), 0, 1, seed)?;
    let take: Vec<_> = triplets.into_iter().take(n_samples).collect();
    let idx = |f: fn(&crate::data::Triplet) -> usize| take.iter().map(f).collect::<Vec<_>>();
    let (x1, x2, x3) = (
        source.batch(&idx(|t| t.x1))?,
        source.batch(&idx(|t| t.x2))?,
        source.batch(&idx(|t| t.x3))?,
    );
    let n = take.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = noise.map(|s| model.noise_for(s, n, &mut rng));

    let mut g = Graph::new(&model.params, false);
    let xin = g.input(Tensor::concat_rows(&[&x1, &x2, &x3])?);
    let f = model.encoder.early(&mut g, xin)?;
    let f1 = g.slice_rows(f, 0, n)?;
    let f2 = g.slice_rows(f, n, n)?;
    let f3 = g.slice_rows(f, 2 * n, n)?;
    let s = model.styled_nodes(&mut g, f1, f2, noise)?;
    let src = concat_rows(g.value(s.mu_src), g.value(s.sd_src));
    let new = concat_rows(g.value(s.mu_new), g.value(s.sd_new));
    let (style_distance, skip_s) = mean_row_distance(&src, &new);

    let both = g.concat_rows(&[f1, f3])?;
    let e = model.encoder.late(&mut g, both)?;
    let e1 = g.slice_rows(e, 0, n)?;
    let e3 = g.slice_rows(e, n, n)?;
    let (open, _) = model.fanet.forward(&mut g, e1, e3)?;
    let (embedding_distance, skip_e) = mean_row_distance(&rows(g.value(e1)), &rows(g.value(open)));

    Ok(DiversityReport {
        style_distance,
        embedding_distance,
        pairs: n,
        zero_norm_pairs: skip_s + skip_e,
        degenerate: style_distance.is_none() || embedding_distance.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[2.0, 0.0]), Some(0.0));
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn all_zero_rows_are_degenerate() {
        let z = vec![vec![0.0; 3]; 4];
        let (d, skipped) = mean_row_distance(&z, &z);
        assert_eq!(d, None);
        assert_eq!(skipped, 4);
    }
}
