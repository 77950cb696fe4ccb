use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::stylesynth::{MixStyleConfig, NoiseSpec, StyleBand};

/// How closed samples are restyled at the seam.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleAugment {
    /// Learned style synthesis with the margin loss.
    Ssb,
    /// Beta-sampled interpolation of the pair's statistics.
    Mixstyle,
    None,
}

/// How pseudo-open samples are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpenSynthesis {
    /// Learned per-dimension embedding mixing.
    Fab,
    HalfCrop,
    PixelMean,
    PatchReplace,
    None,
}

impl OpenSynthesis {
    pub fn name(self) -> &'static str {
        match self {
            OpenSynthesis::Fab => "fab",
            OpenSynthesis::HalfCrop => "half-crop",
            OpenSynthesis::PixelMean => "pixel-mean",
            OpenSynthesis::PatchReplace => "patch-replace",
            OpenSynthesis::None => "none",
        }
    }

    pub fn is_image_space(self) -> bool {
        matches!(
            self,
            OpenSynthesis::HalfCrop | OpenSynthesis::PixelMean | OpenSynthesis::PatchReplace
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub band_mu: StyleBand,
    pub band_sigma: StyleBand,
    pub noise: NoiseSpec,
    pub reshuffle_period: usize,
    pub seed: u64,
    pub style: StyleAugment,
    pub open: OpenSynthesis,
    /// Probability that each constituent of an open sample is restyled first.
    pub style_route_prob: f64,
    pub mixstyle: MixStyleConfig,
    /// Side of the replaced square for the patch baseline; `None` scales the
    /// reference 30 px at 128 px to the image size.
    pub patch_size: Option<usize>,
    /// Leading epochs of plain closed-set cross-entropy (no style or open
    /// branch) that warm-start the encoder; counted within `epochs`.
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 10,
            batch_size: 160,
            weights: LossWeights::default(),
            band_mu: StyleBand::default_mean(),
            band_sigma: StyleBand::default_std(),
            noise: NoiseSpec::default(),
            reshuffle_period: 5,
            seed: 0,
            style: StyleAugment::Ssb,
            open: OpenSynthesis::Fab,
            style_route_prob: 0.5,
            mixstyle: MixStyleConfig::default(),
            patch_size: None,
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.reshuffle_period == 0 {
            return bad("reshuffle_period must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.style_route_prob) {
            return bad("style_route_prob must lie in [0, 1]".into());
        }
        if self.pretrain_epochs >= self.epochs {
            return bad(format!(
                "pretrain_epochs ({}) must be below epochs ({})",
                self.pretrain_epochs, self.epochs
            ));
        }
        if self.patch_size == Some(0) {
            return bad("patch_size must be positive".into());
        }
        self.weights.validate()?;
        self.band_mu.validate()?;
        self.band_sigma.validate()?;
        NoiseSpec::new(self.noise.mean, self.noise.std)?;
        MixStyleConfig::new(self.mixstyle.beta_param)?;
        Ok(())
    }

    /// Plain cross-entropy training with no style or open branch.
    pub fn erm(mut self) -> Self {
        self.weights = LossWeights::ce_only();
        self.style = StyleAugment::None;
        self.open = OpenSynthesis::None;
        self
    }

    /// Configuration in effect during `epoch`.
    pub fn at_epoch(&self, epoch: usize) -> TrainConfig {
        if epoch < self.pretrain_epochs {
            self.clone().erm()
        } else {
            self.clone()
        }
    }

    pub fn patch_for(&self, image_size: usize) -> usize {
        self.patch_size
            .unwrap_or_else(|| ((30.0 * image_size as f64 / 128.0).round() as usize).max(1))
            .min(image_size)
    }
}
