//! Training configuration and its flat `key = value` text form.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, and
//! every key can be overridden from the command line by the flag of the same
//! name.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::model::{HeadKind, PairFeatures};
use crate::quadruplets::DEFAULT_BATCH_SIZE;

/// The seven trainer objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Triplet hinge on embedding distances (BL1).
    TripletEmbed,
    /// Triplet hinge on an unnormalized one-output metric head (BL2).
    TripletMetric,
    /// Triplet hinge on the softmax metric head.
    TripletImprovedNosfx,
    /// As above plus the pair-softmax loss.
    TripletImproved,
    /// Quadruplet loss with fixed margins plus the pair-softmax loss.
    Quadruplet,
    /// Contrastive plus pair-softmax loss on labelled doublets (BL3).
    Classification,
    /// Quadruplet loss switching to adaptive margins after a warm start.
    QuadrupletMargohnm,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::TripletEmbed,
        Mode::TripletMetric,
        Mode::TripletImprovedNosfx,
        Mode::TripletImproved,
        Mode::Quadruplet,
        Mode::Classification,
        Mode::QuadrupletMargohnm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::TripletEmbed => "triplet_embed",
            Mode::TripletMetric => "triplet_metric",
            Mode::TripletImprovedNosfx => "triplet_improved_nosfx",
            Mode::TripletImproved => "triplet_improved",
            Mode::Quadruplet => "quadruplet",
            Mode::Classification => "classification",
            Mode::QuadrupletMargohnm => "quadruplet_margohnm",
        }
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            Mode::TripletMetric => HeadKind::Linear1,
            _ => HeadKind::Softmax2,
        }
    }

    /// Whether the objective includes the pair-softmax loss.
    pub fn uses_softmax_aux(self) -> bool {
        matches!(
            self,
            Mode::TripletImproved | Mode::Quadruplet | Mode::Classification | Mode::QuadrupletMargohnm
        )
    }

    /// Whether batches are drawn as quadruplets (triplet modes use their
    /// first three indices) rather than doublets.
    pub fn uses_quadruplets(self) -> bool {
        self != Mode::Classification
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode '{s}', expected one of {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synth,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub margins: MarginConfig,
    pub warm_start_fraction: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub pair_features: PairFeatures,
    pub data: DataSource,
    /// Synthetic data parameters; `synth.seed` always equals `seed`.
    pub synth: SynthConfig,
    pub test_fraction: f64,
    pub eval_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Quadruplet,
            epochs: 20,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: 1e-3,
            momentum: 0.0,
            margins: MarginConfig::default(),
            warm_start_fraction: 0.5,
            seed: 0,
            hidden: vec![64, 32],
            pair_features: PairFeatures::ConcatProduct,
            data: DataSource::Synth,
            synth: SynthConfig::default(),
            test_fraction: 1.0 / 6.0,
            eval_trials: crate::evaluation::DEFAULT_TRIALS,
        }
    }
}

/// Every recognized key, in file order.
pub const KEYS: &[&str] = &[
    "mode",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "alpha1",
    "alpha2",
    "alpha_cts",
    "softmax_aux_weight",
    "warm_start_fraction",
    "seed",
    "hidden",
    "pair_features",
    "data",
    "synth_ids",
    "synth_samples_per_camera",
    "synth_cameras",
    "synth_dim",
    "synth_intra_sigma",
    "synth_inter_spread",
    "synth_camera_shift_sigma",
    "test_fraction",
    "eval_trials",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "alpha1" => self.margins.alpha1 = parse_num(key, v)?,
            "alpha2" => self.margins.alpha2 = parse_num(key, v)?,
            "alpha_cts" => self.margins.alpha_cts = parse_num(key, v)?,
            "softmax_aux_weight" => self.margins.softmax_aux_weight = parse_num(key, v)?,
            "warm_start_fraction" => self.warm_start_fraction = parse_num(key, v)?,
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.synth.seed = self.seed;
            }
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|w| parse_num(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "pair_features" => self.pair_features = v.parse()?,
            "data" => {
                self.data = if v == "synth" {
                    DataSource::Synth
                } else {
                    DataSource::Csv(PathBuf::from(v))
                }
            }
            "synth_ids" => self.synth.num_ids = parse_num(key, v)?,
            "synth_samples_per_camera" => self.synth.samples_per_id_per_camera = parse_num(key, v)?,
            "synth_cameras" => self.synth.cameras = parse_num(key, v)?,
            "synth_dim" => self.synth.dim = parse_num(key, v)?,
            "synth_intra_sigma" => self.synth.intra_sigma = parse_num(key, v)?,
            "synth_inter_spread" => self.synth.inter_spread = parse_num(key, v)?,
            "synth_camera_shift_sigma" => self.synth.camera_shift_sigma = parse_num(key, v)?,
            "test_fraction" => self.test_fraction = parse_num(key, v)?,
            "eval_trials" => self.eval_trials = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Current value of `key` in file syntax.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "mode" => self.mode.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "alpha1" => self.margins.alpha1.to_string(),
            "alpha2" => self.margins.alpha2.to_string(),
            "alpha_cts" => self.margins.alpha_cts.to_string(),
            "softmax_aux_weight" => self.margins.softmax_aux_weight.to_string(),
            "warm_start_fraction" => self.warm_start_fraction.to_string(),
            "seed" => self.seed.to_string(),
            "hidden" => self
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "pair_features" => self.pair_features.to_string(),
            "data" => match &self.data {
                DataSource::Synth => "synth".into(),
                DataSource::Csv(p) => p.display().to_string(),
            },
            "synth_ids" => self.synth.num_ids.to_string(),
            "synth_samples_per_camera" => self.synth.samples_per_id_per_camera.to_string(),
            "synth_cameras" => self.synth.cameras.to_string(),
            "synth_dim" => self.synth.dim.to_string(),
            "synth_intra_sigma" => self.synth.intra_sigma.to_string(),
            "synth_inter_spread" => self.synth.inter_spread.to_string(),
            "synth_camera_shift_sigma" => self.synth.camera_shift_sigma.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "eval_trials" => self.eval_trials.to_string(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        })
    }

    /// Applies a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n as u64 + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: n as u64 + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.warm_start_fraction) {
            return Err(Error::Config(format!(
                "warm_start_fraction must be in [0, 1], got {}",
                self.warm_start_fraction
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.eval_trials == 0 {
            return Err(Error::Config("eval_trials must be positive".into()));
        }
        self.margins.validate()?;
        if matches!(self.mode, Mode::Quadruplet | Mode::QuadrupletMargohnm) {
            self.margins.validate_quadruplet()?;
        }
        Ok(())
    }

    /// Number of fixed-margin epochs before adaptive margins take over.
    pub fn warm_start_epochs(&self) -> usize {
        (self.warm_start_fraction * self.epochs as f64).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            mode: Mode::TripletMetric,
            hidden: vec![8],
            pair_features: PairFeatures::Concat,
            data: DataSource::Csv("feats.csv".into()),
            test_fraction: 0.3,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::parse("# c\nepochs = 3  # trailing\n\nmode=classification\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.mode, Mode::Classification);
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("\nepochs"), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::parse("mode = bl4").is_err());
    }

    #[test]
    fn seven_distinct_modes() {
        let names: std::collections::BTreeSet<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names.len(), 7);
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.margins.alpha2 = 2.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warm_start_floor() {
        let mut cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warm_start_epochs(), 2);
        cfg.warm_start_fraction = 1.0;
        assert_eq!(cfg.warm_start_epochs(), 5);
    }
}
