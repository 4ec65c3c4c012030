//! Coarse lung / heart segmenters: the configuration and training-control types shared with
//! the learned U-Net backend, the predictor interface the pipeline calls, and a non-learned
//! intensity-band predictor.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::MODEL_DIMS;
use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::postprocess::{clean_mask, MorphConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderName {
    Vgg16,
    Vgg19,
    Xception,
    Resnet34,
    Densenet169,
}

impl EncoderName {
    pub const ALL: [EncoderName; 5] = [
        EncoderName::Vgg16,
        EncoderName::Vgg19,
        EncoderName::Xception,
        EncoderName::Resnet34,
        EncoderName::Densenet169,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderName::Vgg16 => "vgg16",
            EncoderName::Vgg19 => "vgg19",
            EncoderName::Xception => "xception",
            EncoderName::Resnet34 => "resnet34",
            EncoderName::Densenet169 => "densenet169",
        }
    }
}

impl std::fmt::Display for EncoderName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EncoderName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown encoder {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: EncoderName,
    pub pretrained: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            name: EncoderName::Vgg19,
            pretrained: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Lung,
    Heart,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Lung => "lung",
            Target::Heart => "heart",
        })
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lung" => Ok(Target::Lung),
            "heart" => Ok(Target::Heart),
            _ => Err(Error::invalid(format!("unknown target {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest validation-Dice gain that counts as an improvement.
    pub min_delta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub target: Target,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            patience: 3,
            min_delta: 0.001,
            batch_size: 16,
            learning_rate: 1e-4,
            target: Target::Lung,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

/// Patience-based early stopping on validation Dice.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    stale: usize,
    epochs_seen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// Keep training; `improved` marks a new best epoch.
    Continue { improved: bool },
    /// Stop; `improved` tells whether this final epoch was itself a new best.
    Stop { improved: bool },
}

impl EarlyStopping {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            max_epochs: config.max_epochs,
            patience: config.patience,
            min_delta: config.min_delta,
            best: None,
            stale: 0,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's validation Dice.
    pub fn observe(&mut self, val_dice: f64) -> StopDecision {
        self.epochs_seen += 1;
        let improved = match self.best {
            None => true,
            Some((_, best)) => val_dice > best + self.min_delta,
        };
        if improved {
            self.best = Some((self.epochs_seen, val_dice));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.epochs_seen >= self.max_epochs || self.stale >= self.patience {
            StopDecision::Stop { improved }
        } else {
            StopDecision::Continue { improved }
        }
    }

    /// 1-based epoch with the best validation Dice.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

/// `prob >= threshold` per pixel.
pub fn binarize(prob: &Array2<f32>, threshold: f32) -> BinaryMask {
    BinaryMask::from_threshold(prob, threshold)
}

/// A coarse segmenter: gray `MODEL_DIMS` grid in, per-pixel foreground probability out.
pub trait MaskPredictor: Send + Sync {
    fn input_dims(&self) -> (usize, usize) {
        MODEL_DIMS
    }

    fn predict(&self, gray: &Array2<f32>) -> Result<Array2<f32>>;

    fn check_input(&self, gray: &Array2<f32>) -> Result<()> {
        if gray.dim() != self.input_dims() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dims(),
                actual: gray.dim(),
            });
        }
        Ok(())
    }
}

impl<T: MaskPredictor + ?Sized> MaskPredictor for Box<T> {
    fn input_dims(&self) -> (usize, usize) {
        (**self).input_dims()
    }

    fn predict(&self, gray: &Array2<f32>) -> Result<Array2<f32>> {
        (**self).predict(gray)
    }
}

/// Non-learned coarse segmenter: foreground where the normalised intensity lies in
/// `[low, high]`, followed by an opening of `open_iters` to drop one-pixel edge bands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPredictor {
    pub low: f32,
    pub high: f32,
    pub open_iters: usize,
}

impl BandPredictor {
    /// Dark lung fields of the synthetic fixtures.
    pub const FIXTURE_LUNG: BandPredictor = BandPredictor {
        low: 0.0,
        high: 0.3,
        open_iters: 1,
    };
    /// Mid-gray heart shadow of the synthetic fixtures.
    pub const FIXTURE_HEART: BandPredictor = BandPredictor {
        low: 0.35,
        high: 0.75,
        open_iters: 2,
    };
}

impl MaskPredictor for BandPredictor {
    fn predict(&self, gray: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_input(gray)?;
        let band = BinaryMask::from_array(gray.mapv(|v| v >= self.low && v <= self.high));
        let morph = MorphConfig {
            erode_iters: self.open_iters,
            dilate_iters: self.open_iters,
            ..MorphConfig::default()
        };
        Ok(clean_mask(&band, &morph).to_f32())
    }
}

/// Metadata written next to a trained model's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderSpec,
    pub target: Target,
    pub seed: u64,
    pub input_dims: (usize, usize),
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub config: TrainConfig,
    /// Channel-width divisor the network was built with (1 = standard widths).
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

impl ModelMeta {
    pub const FILE_NAME: &'static str = "meta.json";

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(Self::FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(Self::FILE_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(max_epochs: usize, patience: usize) -> TrainConfig {
        TrainConfig {
            max_epochs,
            patience,
            ..TrainConfig::default()
        }
    }

    fn run(stopper: &mut EarlyStopping, dice: impl IntoIterator<Item = f64>) -> usize {
        for (i, d) in dice.into_iter().enumerate() {
            if let StopDecision::Stop { .. } = stopper.observe(d) {
                return i + 1;
            }
        }
        panic!("never stopped");
    }

    #[test]
    fn flat_from_epoch_three_stops_by_six() {
        let mut s = EarlyStopping::new(&cfg(20, 3));
        let stopped = run(&mut s, [0.5, 0.6, 0.7].into_iter().chain(std::iter::repeat(0.7)));
        assert!(stopped <= 6, "stopped at {stopped}");
        assert_eq!(s.best_epoch(), Some(3));
    }

    #[test]
    fn sub_delta_gains_count_as_stale() {
        let mut s = EarlyStopping::new(&cfg(20, 3));
        let stopped = run(&mut s, [0.5, 0.5004, 0.5008, 0.5009, 0.9]);
        assert_eq!(stopped, 4);
    }

    #[test]
    fn never_exceeds_max_epochs() {
        let mut s = EarlyStopping::new(&cfg(20, 3));
        let stopped = run(&mut s, (0..100).map(|i| i as f64 * 0.01));
        assert_eq!(stopped, 20);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(20, 3).validate().is_ok());
        assert!(cfg(0, 0).validate().is_err());
        assert!(cfg(3, 3).validate().is_err());
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        let p = Array2::from_elem((3, 3), 0.5f32);
        assert_eq!(binarize(&p, 0.5), BinaryMask::full(3, 3));
        let p = Array2::from_elem((3, 3), 0.6f32);
        assert_eq!(binarize(&p, 0.5), BinaryMask::full(3, 3));
        let p = Array2::from_elem((3, 3), 0.49f32);
        assert!(binarize(&p, 0.5).is_empty());
    }

    #[test]
    fn band_predictor_checks_dims() {
        let p = BandPredictor::FIXTURE_LUNG;
        assert!(p.predict(&Array2::zeros((64, 64))).is_err());
        assert_eq!(p.predict(&Array2::zeros((128, 128))).unwrap().dim(), (128, 128));
    }

    #[test]
    fn encoder_names_round_trip() {
        for e in EncoderName::ALL {
            assert_eq!(e.as_str().parse::<EncoderName>().unwrap(), e);
        }
        assert_eq!(EncoderSpec::default().name, EncoderName::Vgg19);
    }
}
