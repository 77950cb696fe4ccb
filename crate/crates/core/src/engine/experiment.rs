//! Desk-scale experiments: data preparation, method presets, single runs
//! and ablation sweeps with table assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{OpenSynthesis, StyleAugment, TrainConfig};
use super::metrics::{evaluate_domains, MultiDomainReport};
use super::train::{train, TrainOutcome};
use crate::backbone::{Model, ModelConfig, SplitDepth};
use crate::data::{check_disjoint, generate_synthetic_domains, split_open, Dataset, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::stylesynth::{NoiseSpec, StyleBand};

/// Source closed-set training data plus relabeled target domains.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Known-class source samples, labels `0..C`.
    pub source: Dataset,
    /// One dataset per target domain, labels `0..C` and `C` for unknowns.
    pub targets: Vec<Dataset>,
    pub num_known: usize,
}

impl PreparedData {
    /// Keeps only the known classes of `source`; every target keeps all of
    /// its samples with unknown classes collapsed to `C`.
    pub fn new(source: &Dataset, targets: &[Dataset], known: &[usize]) -> Result<Self> {
        let (closed, _) = split_open(source, known)?;
        if closed.is_empty() {
            return Err(Error::Empty("source domain has no known-class samples".into()));
        }
        let targets = targets
            .iter()
            .map(|t| {
                let (c, o) = split_open(t, known)?;
                let merged: Dataset = c.samples().iter().chain(o.samples()).cloned().collect();
                check_disjoint(&closed, &merged)?;
                Ok(merged)
            })
            .collect::<Result<Vec<_>>>()?;
        if targets.is_empty() {
            return Err(Error::Empty("no target domains".into()));
        }
        let mut k = known.to_vec();
        k.sort_unstable();
        k.dedup();
        Ok(Self {
            source: closed,
            targets,
            num_known: k.len(),
        })
    }
}

/// Generated source and target domains over a shared class set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTrack {
    pub spec: SyntheticDomainSpec,
    pub n_domains: usize,
    pub n_per_class: usize,
    pub known: Vec<usize>,
    pub source_domain: usize,
}

impl Default for SyntheticTrack {
    fn default() -> Self {
        Self {
            spec: SyntheticDomainSpec::default(),
            n_domains: 3,
            n_per_class: 100,
            known: (0..6).collect(),
            source_domain: 0,
        }
    }
}

impl SyntheticTrack {
    pub fn prepare(&self) -> Result<PreparedData> {
        if self.source_domain >= self.n_domains || self.n_domains < 2 {
            return Err(Error::Config(format!(
                "need a source domain below n_domains = {} and at least one target",
                self.n_domains
            )));
        }
        let domains = generate_synthetic_domains(&self.spec, self.n_domains, self.n_per_class)?;
        let targets: Vec<Dataset> = domains
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != self.source_domain)
            .map(|(_, ds)| ds.clone())
            .collect();
        PreparedData::new(&domains[self.source_domain], &targets, &self.known)
    }

    /// Same track with known classes `0..k`.
    pub fn with_known(&self, k: usize) -> Self {
        Self {
            known: (0..k).collect(),
            ..self.clone()
        }
    }
}

/// Training configuration used for the toy backbone on the synthetic track.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs: 30,
        pretrain_epochs: 10,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

/// Named training configurations compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Style synthesis, learned open mixing, all three losses.
    Full,
    NoDisc,
    NoSm,
    NoDiscNoSm,
    /// Cross-entropy only, no style or open branch.
    Erm,
    /// Full method with Beta-sampled style interpolation replacing synthesis.
    Mixstyle,
    HalfCrop,
    PixelMean,
    PatchReplace,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Full,
        Method::NoDisc,
        Method::NoSm,
        Method::NoDiscNoSm,
        Method::Erm,
        Method::Mixstyle,
        Method::HalfCrop,
        Method::PixelMean,
        Method::PatchReplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::NoDisc => "no-disc",
            Method::NoSm => "no-sm",
            Method::NoDiscNoSm => "no-disc-no-sm",
            Method::Erm => "erm",
            Method::Mixstyle => "mixstyle",
            Method::HalfCrop => "half-crop",
            Method::PixelMean => "pixel-mean",
            Method::PatchReplace => "patch-replace",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let w = base.weights;
        match self {
            Method::Full => {}
            Method::NoDisc => c.weights = LossWeights { disc: 0.0, ..w },
            Method::NoSm => c.weights = LossWeights { sm: 0.0, ..w },
            Method::NoDiscNoSm => c.weights = LossWeights { disc: 0.0, sm: 0.0, ..w },
            Method::Erm => c = c.erm(),
            Method::Mixstyle => {
                c.style = StyleAugment::Mixstyle;
                c.weights = LossWeights { sm: 0.0, ..w };
            }
            Method::HalfCrop => c.open = OpenSynthesis::HalfCrop,
            Method::PixelMean => c.open = OpenSynthesis::PixelMean,
            Method::PatchReplace => c.open = OpenSynthesis::PatchReplace,
        }
        c
    }
}

pub struct RunResult {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub report: MultiDomainReport,
}

/// Trains from scratch on `data.source` and evaluates the last-epoch model.
pub fn run(data: &PreparedData, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<RunResult> {
    if model_cfg.num_known != data.num_known {
        return Err(Error::Config(format!(
            "model has {} known classes, data has {}",
            model_cfg.num_known, data.num_known
        )));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let outcome = train(&mut model, &data.source, train_cfg, |_, _| Ok(()))?;
    let report = evaluate_domains(&model, &data.targets)?;
    Ok(RunResult { model, outcome, report })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// 5 mean bands by 5 standard-deviation bands.
    MarginBands,
    Noise,
    SsbVsMixstyle,
    FabVsAdhoc,
    SplitDepth,
    /// Metrics against the number of known classes, one row per method.
    KnownClasses,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::MarginBands,
        SweepAxis::Noise,
        SweepAxis::SsbVsMixstyle,
        SweepAxis::FabVsAdhoc,
        SweepAxis::SplitDepth,
        SweepAxis::KnownClasses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MarginBands => "margin-bands",
            SweepAxis::Noise => "noise",
            SweepAxis::SsbVsMixstyle => "ssb-vs-mixstyle",
            SweepAxis::FabVsAdhoc => "fab-vs-adhoc",
            SweepAxis::SplitDepth => "split-depth",
            SweepAxis::KnownClasses => "known-classes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown sweep axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Band grid shared by the mean and standard-deviation axes.
pub const SWEEP_BANDS: [(f64, f64); 5] = [(0.1, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0)];
/// `(mean, std)` of the noise sweep.
pub const SWEEP_NOISE: [(f64, f64); 4] = [(0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (0.0, 3.0)];
pub const SWEEP_KNOWN: [usize; 4] = [2, 4, 6, 8];
pub const SWEEP_KNOWN_METHODS: [Method; 3] = [Method::Full, Method::Mixstyle, Method::Erm];

fn band_label((lo, hi): (f64, f64)) -> String {
    format!("[{lo},{hi}]")
}

/// One training run of a sweep, before seeding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub row: String,
    pub col: String,
    pub known: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn sweep_cells(axis: SweepAxis, base_model: &ModelConfig, base_train: &TrainConfig) -> Vec<SweepCell> {
    let cell = |row: String, col: String, model: ModelConfig, train: TrainConfig| SweepCell {
        row,
        col,
        known: model.num_known,
        model,
        train,
    };
    let full = || base_train.clone();
    match axis {
        SweepAxis::MarginBands => SWEEP_BANDS
            .iter()
            .flat_map(|&mu| {
                SWEEP_BANDS.iter().map(move |&sd| {
                    let mut t = full();
                    t.band_mu = StyleBand { lo: mu.0, hi: mu.1 };
                    t.band_sigma = StyleBand { lo: sd.0, hi: sd.1 };
                    cell(band_label(mu), band_label(sd), base_model.clone(), t)
                })
            })
            .collect(),
        SweepAxis::Noise => SWEEP_NOISE
            .iter()
            .map(|&(m, s)| {
                let mut t = full();
                t.noise = NoiseSpec { mean: m, std: s };
                cell("full".into(), format!("N({m},{s})"), base_model.clone(), t)
            })
            .collect(),
        SweepAxis::SsbVsMixstyle => [Method::Full, Method::Mixstyle]
            .iter()
            .map(|&m| {
                let col = if m == Method::Full { "ssb" } else { "mixstyle" };
                cell("synthetic".into(), col.into(), base_model.clone(), m.apply(base_train))
            })
            .collect(),
        SweepAxis::FabVsAdhoc => [Method::Full, Method::HalfCrop, Method::PixelMean, Method::PatchReplace]
            .iter()
            .map(|&m| {
                let col = if m == Method::Full { "fab" } else { m.name() };
                cell("synthetic".into(), col.into(), base_model.clone(), m.apply(base_train))
            })
            .collect(),
        SweepAxis::SplitDepth => SplitDepth::ALL
            .iter()
            .map(|&d| {
                let mut m = base_model.clone();
                m.split_depth = d;
                cell("synthetic".into(), d.name().into(), m, full())
            })
            .collect(),
        SweepAxis::KnownClasses => SWEEP_KNOWN_METHODS
            .iter()
            .flat_map(|&meth| {
                SWEEP_KNOWN.iter().map(move |&k| {
                    let mut m = base_model.clone();
                    m.num_known = k;
                    cell(meth.name().into(), k.to_string(), m, meth.apply(base_train))
                })
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub col: String,
    pub seed: u64,
    pub acc_k: f64,
    pub acc_u: f64,
    pub acc: f64,
    pub hs: f64,
}

/// Trains and evaluates one cell with `seed` for both the model and the
/// data order.
pub fn run_cell(cell: &SweepCell, track: &SyntheticTrack, seed: u64) -> Result<CellResult> {
    let data = track.with_known(cell.known).prepare()?;
    let mut model = cell.model.clone();
    model.seed = seed;
    let mut train_cfg = cell.train.clone();
    train_cfg.seed = seed;
    let r = run(&data, &model, &train_cfg)?;
    let a = r.report.average;
    Ok(CellResult {
        row: cell.row.clone(),
        col: cell.col.clone(),
        seed,
        acc_k: a.acc_k,
        acc_u: a.acc_u,
        acc: a.acc,
        hs: a.hs,
    })
}

/// Metric grid, mean over seeds with the spread alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub mean: Vec<Vec<Option<f64>>>,
    pub std: Vec<Vec<Option<f64>>>,
}

impl GridTable {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.row_labels.iter().position(|l| l == row)?;
        let c = self.col_labels.iter().position(|l| l == col)?;
        self.mean[r][c]
    }

    pub fn to_text(&self) -> String {
        let w = 14;
        let mut s = format!("# {}\n{:<w$}", self.title, "");
        for c in &self.col_labels {
            let _ = write!(s, "{c:>w$}");
        }
        s.push('\n');
        for (i, r) in self.row_labels.iter().enumerate() {
            let _ = write!(s, "{r:<w$}");
            for j in 0..self.col_labels.len() {
                let v = match (self.mean[i][j], self.std[i][j]) {
                    (Some(m), Some(sd)) => format!("{m:.2}±{sd:.2}"),
                    _ => "-".into(),
                };
                let _ = write!(s, "{v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Builds the acc and hs tables of a sweep; cells without results are empty.
pub fn assemble_tables(axis: SweepAxis, cells: &[SweepCell], results: &[CellResult]) -> Vec<GridTable> {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for c in cells {
        if !rows.contains(&c.row) {
            rows.push(c.row.clone());
        }
        if !cols.contains(&c.col) {
            cols.push(c.col.clone());
        }
    }
    let mut by_cell: BTreeMap<(&str, &str), Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        by_cell.entry((r.row.as_str(), r.col.as_str())).or_default().push(r);
    }
    let metrics: [(&str, fn(&CellResult) -> f64); 2] = [("acc", |r| r.acc), ("hs", |r| r.hs)];
    metrics
        .iter()
        .map(|(name, f)| {
            let stat = |r: &String, c: &String| {
                by_cell.get(&(r.as_str(), c.as_str())).map(|v| {
                    let xs: Vec<f64> = v.iter().map(|x| f(x)).collect();
                    mean_std(&xs)
                })
            };
            let grid: Vec<Vec<Option<(f64, f64)>>> =
                rows.iter().map(|r| cols.iter().map(|c| stat(r, c)).collect()).collect();
            GridTable {
                title: format!("{} {name}", axis.name()),
                row_labels: rows.clone(),
                col_labels: cols.clone(),
                mean: grid.iter().map(|r| r.iter().map(|v| v.map(|x| x.0)).collect()).collect(),
                std: grid.iter().map(|r| r.iter().map(|v| v.map(|x| x.1)).collect()).collect(),
            }
        })
        .collect()
}
