use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn h_score(acc_k: f64, acc_u: f64) -> f64 {
    let denom = acc_k + acc_u;
    if denom <= 0.0 {
        0.0
    } else {
        2.0 * acc_k * acc_u / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    /// `0..C` for known classes, `C` for the pooled unknown class.
    pub label: usize,
    pub total: usize,
    pub correct: usize,
}

/// Target-domain metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: Option<usize>,
    pub acc_k: f64,
    pub acc_u: f64,
    /// Sample-weighted accuracy over known and unknown samples.
    pub acc: f64,
    /// Arithmetic mean of `acc_k` and `acc_u`.
    pub acc_macro: f64,
    pub hs: f64,
    pub num_known_samples: usize,
    pub num_unknown_samples: usize,
    pub per_class_counts: Vec<ClassCount>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Builds a report from arg-max predictions; labels `>= num_known` are
/// unknown and count as correct when predicted as `num_known`.
pub fn report_from_predictions(predictions: &[usize], labels: &[usize], num_known: usize) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut counts: Vec<ClassCount> = (0..=num_known)
        .map(|label| ClassCount { label, total: 0, correct: 0 })
        .collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        let y = y.min(num_known);
        counts[y].total += 1;
        if p == y {
            counts[y].correct += 1;
        }
    }
    let known = &counts[..num_known];
    let (kt, kc) = known.iter().fold((0, 0), |(t, c), k| (t + k.total, c + k.correct));
    let (ut, uc) = (counts[num_known].total, counts[num_known].correct);
    let acc_k = pct(kc, kt);
    let acc_u = pct(uc, ut);
    Ok(EvalReport {
        domain: None,
        acc_k,
        acc_u,
        acc: pct(kc + uc, kt + ut),
        acc_macro: 0.5 * (acc_k + acc_u),
        hs: h_score(acc_k, acc_u),
        num_known_samples: kt,
        num_unknown_samples: ut,
        per_class_counts: counts,
    })
}

/// Clean-path arg-max predictions (no threshold).
pub fn predict(model: &Model, data: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for c in idx.chunks(chunk.max(1)) {
        out.extend(model.forward_clean(&data.batch(c)?)?.iter().map(|p| p.argmax()));
    }
    Ok(out)
}

/// Evaluates a target set whose labels are `0..C` (known) and `C` (unknown).
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let c = model.config.num_known;
    if let Some(bad) = data.samples().iter().find(|s| s.label > c) {
        return Err(Error::Label(format!(
            "target label {} exceeds the open index {c}; relabel with split_open",
            bad.label
        )));
    }
    let preds = predict(model, data, 256)?;
    let mut r = report_from_predictions(&preds, &data.labels(), c)?;
    let domains = data.domains();
    if domains.len() == 1 {
        r.domain = Some(domains[0]);
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub acc_k: f64,
    pub acc_u: f64,
    pub acc: f64,
    pub hs: f64,
}

/// Per-target-domain reports plus their arithmetic average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiDomainReport {
    pub rows: Vec<EvalReport>,
    pub average: AverageRow,
}

impl MultiDomainReport {
    pub fn from_rows(rows: Vec<EvalReport>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no target domains".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let average = AverageRow {
            acc_k: mean(|r| r.acc_k),
            acc_u: mean(|r| r.acc_u),
            acc: mean(|r| r.acc),
            hs: mean(|r| r.hs),
        };
        Ok(Self { rows, average })
    }

    /// Aligned text table with `acc_k acc_u acc hs` columns.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10}{:>8}{:>8}{:>8}{:>8}\n", "target", "acc_k", "acc_u", "acc", "hs");
        for r in &self.rows {
            let name = r.domain.map_or("-".to_string(), |d| format!("domain{d}"));
            s.push_str(&format!(
                "{:<10}{:>8.2}{:>8.2}{:>8.2}{:>8.2}\n",
                name, r.acc_k, r.acc_u, r.acc, r.hs
            ));
        }
        let a = &self.average;
        s.push_str(&format!(
            "{:<10}{:>8.2}{:>8.2}{:>8.2}{:>8.2}\n",
            "average", a.acc_k, a.acc_u, a.acc, a.hs
        ));
        s
    }
}

pub fn evaluate_domains(model: &Model, targets: &[Dataset]) -> Result<MultiDomainReport> {
    MultiDomainReport::from_rows(targets.iter().map(|t| evaluate(model, t)).collect::<Result<_>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_h_score() {
        assert!((h_score(73.96, 83.91) - 78.62).abs() < 0.01);
        assert_eq!(h_score(40.0, 0.0), 0.0);
        assert_eq!(h_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn report_counts() {
        // C = 2; labels 0, 1 known and 2 unknown.
        let labels = [0, 0, 1, 1, 2, 2, 2, 2];
        let preds = [0, 1, 1, 1, 2, 2, 0, 2];
        let r = report_from_predictions(&preds, &labels, 2).unwrap();
        assert_eq!(r.acc_k, 75.0);
        assert_eq!(r.acc_u, 75.0);
        assert_eq!(r.acc, 75.0);
        assert_eq!(r.hs, 75.0);
        assert_eq!(r.per_class_counts[0], ClassCount { label: 0, total: 2, correct: 1 });
        assert!(report_from_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn micro_and_macro_differ_on_imbalance() {
        let labels = [0, 0, 0, 1];
        let preds = [0, 0, 0, 0];
        let r = report_from_predictions(&preds, &labels, 1).unwrap();
        assert_eq!((r.acc_k, r.acc_u, r.acc, r.acc_macro), (100.0, 0.0, 75.0, 50.0));
        assert_eq!(r.hs, 0.0);
    }

    proptest! {
        #[test]
        fn harmonic_mean_properties(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let h = h_score(a, b);
            prop_assert!(h <= 2.0 * a.min(b) + 1e-9);
            prop_assert!(h <= a.max(b) + 1e-9);
            prop_assert!((h_score(a, a) - a).abs() < 1e-9);
            prop_assert_eq!(h_score(a, 0.0), 0.0);
            prop_assert!((h - h_score(b, a)).abs() < 1e-12);
        }
    }
}
