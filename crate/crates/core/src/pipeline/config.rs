//! Pipeline configuration and its `key = value` file format.

use std::fmt;
use std::str::FromStr;

use crate::aggregate::Weighting;
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::groups::{GroupScheme, KnownTransformRanges};

use super::metrics::Normalization;

/// How manipulated faces are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Per-landmark adversarial displacements.
    Adv,
    /// Adversarial steps projected onto per-group similarities.
    Gadv,
    /// Randomly sampled per-group similarities.
    Gk,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adv" => Ok(Variant::Adv),
            "gadv" => Ok(Variant::Gadv),
            "gk" => Ok(Variant::Gk),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected adv, Gadv or GK)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Adv => "adv",
            Variant::Gadv => "Gadv",
            Variant::Gk => "GK",
        })
    }
}

/// Branch weighting used in both the loss and the fused prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Weight proportional to each branch's displacement of the landmark.
    Displacement,
    /// Weight proportional to the inverse displacement.
    Inverse,
    /// Equal weights; branches act as plain augmentation.
    Uniform,
}

impl Fusion {
    pub(crate) fn weighting(self) -> Option<Weighting> {
        match self {
            Fusion::Displacement => Some(Weighting::Proportional),
            Fusion::Inverse => Some(Weighting::Inverse),
            Fusion::Uniform => None,
        }
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "displacement" => Ok(Fusion::Displacement),
            "inverse" => Ok(Fusion::Inverse),
            "uniform" => Ok(Fusion::Uniform),
            _ => Err(Error::Config(format!("unknown fusion {s:?}"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Displacement => "displacement",
            Fusion::Inverse => "inverse",
            Fusion::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub k_train: usize,
    pub k_test: usize,
    pub fusion: Fusion,
    /// Attack settings; `branches`, `delta` and `seed` are set per sample.
    pub attack: AttackConfig,
    /// δ as a fraction of the coarse landmarks' bounding-box width.
    pub delta_fraction: f64,
    pub known_ranges: KnownTransformRanges,
    pub groups: GroupScheme,
    pub embedder_seed: u64,
    /// Std of the noise added to ground truth to form training-time `P`.
    pub noise_sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub detector_widths: [usize; 2],
    /// Epochs of Gaussian-heatmap regression before the landmark loss.
    pub warm_start_epochs: usize,
    pub heatmap_sigma: f64,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gk,
            k_train: 3,
            k_test: 3,
            fusion: Fusion::Displacement,
            attack: AttackConfig::default(),
            delta_fraction: 0.05,
            known_ranges: KnownTransformRanges::default(),
            groups: GroupScheme::Synthetic,
            embedder_seed: 0,
            noise_sigma: 0.02,
            epochs: 15,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            detector_widths: [8, 16],
            warm_start_epochs: 0,
            heatmap_sigma: 2.0,
            normalization: Normalization::Interocular,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k_train < 1 || self.k_test < 1 {
            return bad("branch counts must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.delta_fraction > 0.0) {
            return bad("delta_fraction must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay nonnegative".into());
        }
        let (lo, hi) = self.known_ranges.scale;
        if !(lo > 0.0 && lo <= hi) || !(self.known_ranges.shift >= 0.0) {
            return bad("invalid known-transform ranges".into());
        }
        AttackConfig { branches: 1, ..self.attack.clone() }.validate()
    }

    /// Sets one option. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => self.variant = parse(key, value)?,
            "k_train" => self.k_train = parse(key, value)?,
            "k_test" => self.k_test = parse(key, value)?,
            "fusion" => self.fusion = parse(key, value)?,
            "tau" => self.attack.tau = parse(key, value)?,
            "attack_step" => self.attack.step = parse(key, value)?,
            "attack_max_iters" => self.attack.max_iters = parse(key, value)?,
            "ridge" => self.attack.ridge = parse(key, value)?,
            "delta_fraction" => self.delta_fraction = parse(key, value)?,
            "scale_min" => self.known_ranges.scale.0 = parse(key, value)?,
            "scale_max" => self.known_ranges.scale.1 = parse(key, value)?,
            "shift" => self.known_ranges.shift = parse(key, value)?,
            "groups" => self.groups = parse(key, value)?,
            "embedder_seed" => self.embedder_seed = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "detector_widths" => {
                let parts: Vec<usize> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
                self.detector_widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("detector_widths takes two comma-separated values".into()))?;
            }
            "warm_start_epochs" => self.warm_start_epochs = parse(key, value)?,
            "heatmap_sigma" => self.heatmap_sigma = parse(key, value)?,
            "normalization" => self.normalization = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every option as `(key, value)`, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let [w1, w2] = self.detector_widths;
        vec![
            ("variant", self.variant.to_string()),
            ("k_train", self.k_train.to_string()),
            ("k_test", self.k_test.to_string()),
            ("fusion", self.fusion.to_string()),
            ("tau", self.attack.tau.to_string()),
            ("attack_step", self.attack.step.to_string()),
            ("attack_max_iters", self.attack.max_iters.to_string()),
            ("ridge", self.attack.ridge.to_string()),
            ("delta_fraction", self.delta_fraction.to_string()),
            ("scale_min", self.known_ranges.scale.0.to_string()),
            ("scale_max", self.known_ranges.scale.1.to_string()),
            ("shift", self.known_ranges.shift.to_string()),
            ("groups", self.groups.to_string()),
            ("embedder_seed", self.embedder_seed.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("detector_widths", format!("{w1},{w2}")),
            ("warm_start_epochs", self.warm_start_epochs.to_string()),
            ("heatmap_sigma", self.heatmap_sigma.to_string()),
            ("normalization", self.normalization.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Parses `key = value` lines (`#` starts a comment) and returns the
    /// pairs this config does not recognize, for the caller to handle.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<(String, String)>> {
        let mut rest = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !self.set(k, v)? {
                rest.push((k.to_string(), v.to_string()));
            }
        }
        Ok(rest)
    }
}
