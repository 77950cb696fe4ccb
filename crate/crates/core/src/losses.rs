//! Training objective: cross-entropy over the `C+1` augmented label space,
//! the discriminability term (open-sample entropy minus closed-sample
//! open/top margin), and their weighted total with the style margin loss.
//!
//! Labels are zero-based: known classes are `0..C` and the open class is `C`.

use serde::{Deserialize, Serialize};

use crate::backbone::PosteriorVector;
use crate::error::{Error, Result};

/// Probability floor applied before taking the log in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub disc: f64,
    pub sm: f64,
}

impl LossWeights {
    pub fn new(ce: f64, disc: f64, sm: f64) -> Result<Self> {
        let w = Self { ce, disc, sm };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.ce, self.disc, self.sm] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weights must be finite and nonnegative, got ({}, {}, {})",
                    self.ce, self.disc, self.sm
                )));
            }
        }
        Ok(())
    }

    /// Only the classification term (the ERM ablation).
    pub fn ce_only() -> Self {
        Self {
            ce: 1.0,
            disc: 0.0,
            sm: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            disc: 1.0,
            sm: 1.0,
        }
    }
}

/// One-hot target over `num_known + 1` classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedLabel {
    index: usize,
    num_known: usize,
}

impl AugmentedLabel {
    pub fn known(index: usize, num_known: usize) -> Result<Self> {
        if index >= num_known {
            return Err(Error::Label(format!(
                "known label {index} out of range for {num_known} classes"
            )));
        }
        Ok(Self { index, num_known })
    }

    pub fn open(num_known: usize) -> Self {
        Self {
            index: num_known,
            num_known,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn is_open(&self) -> bool {
        self.index == self.num_known
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_known + 1];
        v[self.index] = 1.0;
        v
    }
}

pub fn loss_ce(posteriors: &[PosteriorVector], labels: &[AugmentedLabel]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    if posteriors.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} posteriors, {} labels",
            posteriors.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in posteriors.iter().zip(labels) {
        if p.len() != y.num_known + 1 {
            return Err(Error::Shape(format!(
                "posterior of length {} for {} known classes",
                p.len(),
                y.num_known
            )));
        }
        let v = p.probs()[y.index];
        if v < CE_FLOOR {
            log::warn!("cross-entropy: true-class posterior {v:e} clamped to {CE_FLOOR:e}");
        }
        total -= v.max(CE_FLOOR).ln();
    }
    Ok(total / posteriors.len() as f64)
}

/// Components of the discriminability objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscLoss {
    pub open_entropy: f64,
    pub closed_margin: f64,
}

impl DiscLoss {
    pub fn value(&self) -> f64 {
        self.open_entropy - self.closed_margin
    }
}

/// Mean open-sample entropy minus mean closed-sample `|p_open - p_top|`.
/// An empty side contributes 0 (with a warning).
pub fn loss_disc(open: &[PosteriorVector], closed: &[PosteriorVector]) -> Result<DiscLoss> {
    let mut d = DiscLoss {
        open_entropy: 0.0,
        closed_margin: 0.0,
    };
    if open.is_empty() {
        log::warn!("discriminability loss: no open samples, entropy term is 0");
    } else {
        d.open_entropy =
            open.iter().map(|p| row_entropy(p.probs())).sum::<f64>() / open.len() as f64;
    }
    if closed.is_empty() {
        log::warn!("discriminability loss: no closed samples, margin term is 0");
    } else {
        let mut total = 0.0;
        for p in closed {
            if p.len() < 2 {
                return Err(Error::Shape("posterior needs at least two classes".into()));
            }
            total += row_closed_margin(p.probs(), p.len() - 1).0;
        }
        d.closed_margin = total / closed.len() as f64;
    }
    Ok(d)
}

pub fn loss_total(ce: f64, disc: f64, sm: f64, w: LossWeights) -> f64 {
    w.ce * ce + w.disc * disc + w.sm * sm
}

/// Shannon entropy with natural log and `0 ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Returns `(|p[open] - p[top]|, top, sign(p[open] - p[top]))` where `top` is
/// the first maximal index below `open`. The sign is 0 at a tie.
pub fn row_closed_margin(p: &[f64], open: usize) -> (f64, usize, f64) {
    let mut top = 0;
    for k in 1..open {
        if p[k] > p[top] {
            top = k;
        }
    }
    let diff = p[open] - p[top];
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    (diff.abs(), top, sign)
}
