//! Experiment configuration: strict TOML parsing, track-dependent defaults
//! and command-line overrides.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use odg_core::backbone::{Architecture, SplitDepth};
use odg_core::data::{load_digits, read_manifest, DigitsSource, Normalization};
use odg_core::engine::experiment::{toy_train_config, PreparedData, SyntheticTrack};
use odg_core::engine::TrainConfig;
use odg_core::{LossWeights, ModelConfig, NoiseSpec, StyleBand};

/// Environment variable that relative data paths are resolved against.
pub const DATA_ROOT_ENV: &str = "ODG_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Track {
    #[default]
    Synthetic,
    Digits,
    CustomManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Architecture,
    pub split_depth: SplitDepth,
    pub open_set: bool,
    pub epsilon: f64,
    pub bn_momentum: f64,
    /// Input side length; the synthetic track takes it from its generator.
    pub image_size: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(1, 16, 0);
        Self {
            arch: t.arch,
            split_depth: t.split_depth,
            open_set: true,
            epsilon: t.epsilon,
            bn_momentum: t.bn_momentum,
            image_size: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DigitsSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub images_sha256: Option<String>,
    pub labels_sha256: Option<String>,
    pub limit: Option<usize>,
    /// Manifests of the target domains.
    pub targets: Vec<PathBuf>,
    pub known: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestSection {
    pub source: PathBuf,
    pub targets: Vec<PathBuf>,
    pub known: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub axis: Option<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            axis: None,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub track: Track,
    /// Seeds both initialization and data order.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synthetic: SyntheticTrack,
    pub digits: DigitsSection,
    pub manifest: ManifestSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_track(Track::Synthetic)
    }
}

impl ExperimentConfig {
    /// Defaults for `track`: the toy backbone and desk-scale schedule for the
    /// synthetic and digits tracks, the reference backbone otherwise.
    pub fn for_track(track: Track) -> Self {
        let (model, train) = match track {
            Track::Synthetic | Track::Digits => (
                ModelSection {
                    image_size: (track == Track::Digits).then_some(28),
                    ..ModelSection::default()
                },
                toy_train_config(),
            ),
            Track::CustomManifest => (
                ModelSection {
                    arch: Architecture::Resnet18,
                    split_depth: SplitDepth::Default,
                    image_size: Some(128),
                    ..ModelSection::default()
                },
                TrainConfig::default(),
            ),
        };
        let known = match track {
            Track::Digits => (0..5).collect(),
            _ => Vec::new(),
        };
        Self {
            track,
            seed: 0,
            model,
            train,
            synthetic: SyntheticTrack::default(),
            digits: DigitsSection { known: known.clone(), ..Default::default() },
            manifest: ManifestSection { known, ..Default::default() },
            ablation: AblationSection::default(),
        }
    }

    /// Parses `text` strictly, then lays it over the defaults of its track.
    pub fn parse(text: &str) -> Result<Self> {
        // First pass: unknown keys and type errors, reported with line numbers.
        let strict: ExperimentConfig = toml::from_str(text)?;
        let user: toml::Table = toml::from_str(text)?;
        let mut base = match toml::Value::try_from(Self::for_track(strict.track))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut base, user);
        Ok(toml::Value::Table(base).try_into()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match self.track {
            Track::Synthetic => {
                self.synthetic.spec.validate()?;
            }
            Track::Digits => {
                for p in [&self.digits.images, &self.digits.labels].into_iter().chain(&self.digits.targets) {
                    require_file(p)?;
                }
                if self.digits.targets.is_empty() {
                    bail!("digits track needs at least one target manifest");
                }
            }
            Track::CustomManifest => {
                for p in std::iter::once(&self.manifest.source).chain(&self.manifest.targets) {
                    require_file(p)?;
                }
                if self.manifest.targets.is_empty() {
                    bail!("custom-manifest track needs at least one target manifest");
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        match self.track {
            Track::Synthetic => self.synthetic.spec.image_size,
            _ => self.model.image_size.unwrap_or(128),
        }
    }

    pub fn normalization(&self) -> Normalization {
        self.synthetic.spec.normalization
    }

    pub fn model_config(&self, num_known: usize) -> ModelConfig {
        ModelConfig {
            arch: self.model.arch,
            split_depth: self.model.split_depth,
            num_known,
            open_set: self.model.open_set,
            in_channels: 3,
            image_size: self.image_size(),
            epsilon: self.model.epsilon,
            bn_momentum: self.model.bn_momentum,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Loads the source and target domains of the configured track.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let size = self.image_size();
        let norm = self.normalization();
        let data = match self.track {
            Track::Synthetic => self.synthetic.prepare()?,
            Track::Digits => {
                let d = &self.digits;
                let src = DigitsSource {
                    images: resolve(&d.images),
                    labels: resolve(&d.labels),
                    images_sha256: d.images_sha256.clone(),
                    labels_sha256: d.labels_sha256.clone(),
                };
                let source = load_digits(&src, 0, size, &norm, d.limit)?;
                let targets = d
                    .targets
                    .iter()
                    .map(|p| read_manifest(&resolve(p), size, &norm))
                    .collect::<odg_core::Result<Vec<_>>>()?;
                PreparedData::new(&source, &targets, &d.known)?
            }
            Track::CustomManifest => {
                let m = &self.manifest;
                let source = read_manifest(&resolve(&m.source), size, &norm)?;
                let targets = m
                    .targets
                    .iter()
                    .map(|p| read_manifest(&resolve(p), size, &norm))
                    .collect::<odg_core::Result<Vec<_>>>()?;
                if m.known.is_empty() {
                    bail!("manifest.known must list the known source labels");
                }
                PreparedData::new(&source, &targets, &m.known)?
            }
        };
        Ok(data)
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Relative paths are taken from the data root when it is set.
pub fn resolve(p: &Path) -> PathBuf {
    match env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn require_file(p: &Path) -> Result<()> {
    let r = resolve(p);
    if !r.is_file() {
        bail!("referenced file {} does not exist", r.display());
    }
    Ok(())
}

fn parse_list(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{what}: expected {n} comma-separated numbers, got {s:?}"))?;
    if v.len() != n {
        bail!("{what}: expected {n} comma-separated numbers, got {s:?}");
    }
    Ok(v)
}

/// Flag overrides shared by the training commands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Experiment config (TOML); unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization and data order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss weights as `ce,disc,sm`.
    #[arg(long, value_name = "CE,DISC,SM")]
    pub loss_weights: Option<String>,
    /// Style margin band for means as `lo,hi`.
    #[arg(long, value_name = "LO,HI")]
    pub bands_mu: Option<String>,
    /// Style margin band for standard deviations as `lo,hi`.
    #[arg(long, value_name = "LO,HI")]
    pub bands_sigma: Option<String>,
    /// Style noise as `mean,std`.
    #[arg(long, value_name = "MEAN,STD")]
    pub noise: Option<String>,
    #[arg(long, value_enum)]
    pub split_depth: Option<SplitDepthArg>,
    #[arg(long, value_enum)]
    pub track: Option<Track>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitDepthArg {
    Shallow,
    Default,
    Deep,
}

impl From<SplitDepthArg> for SplitDepth {
    fn from(s: SplitDepthArg) -> Self {
        match s {
            SplitDepthArg::Shallow => SplitDepth::Shallow,
            SplitDepthArg::Default => SplitDepth::Default,
            SplitDepthArg::Deep => SplitDepth::Deep,
        }
    }
}

impl Overrides {
    /// Loads the config (or the defaults of `--track`) and applies the flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::for_track(self.track.unwrap_or_default()),
        };
        if let Some(t) = self.track {
            if self.config.is_some() && t != cfg.track {
                bail!("--track {t:?} conflicts with track {:?} in the config", cfg.track);
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = &self.loss_weights {
            let v = parse_list(w, 3, "--loss-weights")?;
            cfg.train.weights = LossWeights::new(v[0], v[1], v[2])?;
        }
        if let Some(b) = &self.bands_mu {
            let v = parse_list(b, 2, "--bands-mu")?;
            cfg.train.band_mu = StyleBand::new(v[0], v[1])?;
        }
        if let Some(b) = &self.bands_sigma {
            let v = parse_list(b, 2, "--bands-sigma")?;
            cfg.train.band_sigma = StyleBand::new(v[0], v[1])?;
        }
        if let Some(n) = &self.noise {
            let v = parse_list(n, 2, "--noise")?;
            cfg.train.noise = NoiseSpec::new(v[0], v[1])?;
        }
        if let Some(d) = self.split_depth {
            cfg.model.split_depth = d.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_synthetic_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::for_track(Track::Synthetic));
    }

    #[test]
    fn partial_sections_keep_track_defaults() {
        let c = ExperimentConfig::parse("[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, toy_train_config().batch_size);
        let c = ExperimentConfig::parse("track = \"custom-manifest\"\n").unwrap();
        assert_eq!(c.train.batch_size, 160);
        assert_eq!(c.model.arch, Architecture::Resnet18);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("seed = 1\n\n[train]\nlearning_rat = 0.1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("learning_rat"), "{msg}");
    }

    #[test]
    fn effective_config_round_trips() {
        let c = ExperimentConfig::for_track(Track::Synthetic);
        assert_eq!(ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            seed: Some(7),
            loss_weights: Some("1,0,0".into()),
            bands_mu: Some("1,2".into()),
            noise: Some("0,2".into()),
            split_depth: Some(SplitDepthArg::Deep),
            ..Default::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.weights, LossWeights::ce_only());
        assert_eq!(c.train.band_mu, StyleBand { lo: 1.0, hi: 2.0 });
        assert_eq!(c.train.noise, NoiseSpec { mean: 0.0, std: 2.0 });
        assert_eq!(c.model.split_depth, SplitDepth::Deep);
        let bad = Overrides { loss_weights: Some("1,0".into()), ..Default::default() };
        assert!(bad.resolve().is_err());
    }
}
