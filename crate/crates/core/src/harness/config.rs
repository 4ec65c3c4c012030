//! Experiment configuration, stored as a single versioned TOML file.
//!
//! ```toml
//! version = 1
//! seed = 0
//! clusterer = "kmedoids"        # or "kmeans"
//! failure_threshold = 0.70
//! aggregation = "per_image"     # or "pooled"
//! output_dir = "runs/vit_l"
//! cache_dir = "runs/cache"      # optional; shared stage cache
//!
//! [data]
//! manifest = "data/split.json"
//! split = "test"
//!
//! [models.lung]
//! kind = "unet"
//! path = "models/lung"
//!
//! [models.heart]
//! kind = "unet"
//! path = "models/heart"
//!
//! [segmenter]
//! backend = "sam"               # or "fake"
//! backbone = "vit_l"
//! checkpoint = "checkpoints/sam_vit_l_0b3195.pth"
//! lock = "checkpoints/checkpoints.lock"
//!
//! [postprocess]
//! erode_iters = 3
//! dilate_iters = 3
//!
//! [prompting]
//! background_cap = 2000
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{Clusterer, DEFAULT_SUBSAMPLE_CAP};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::postprocess::MorphConfig;
use crate::prelim::BandPredictor;
use crate::prompting::PromptConfig;
use crate::segmenter::BackboneId;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.70;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean of per-image scores.
    #[default]
    PerImage,
    /// Scores of the confusion counts summed over images.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Test
}

/// A coarse segmenter: a trained U-Net run directory or an intensity band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoarseModelConfig {
    Unet { path: PathBuf },
    Band { low: f32, high: f32, open_iters: usize },
}

impl From<BandPredictor> for CoarseModelConfig {
    fn from(b: BandPredictor) -> Self {
        CoarseModelConfig::Band {
            low: b.low,
            high: b.high,
            open_iters: b.open_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub lung: CoarseModelConfig,
    pub heart: CoarseModelConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterBackend {
    #[default]
    Sam,
    Fake,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    #[serde(default)]
    pub backend: SegmenterBackend,
    #[serde(default)]
    pub backbone: BackboneId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptingConfig {
    pub background_cap: usize,
}

impl Default for PromptingConfig {
    fn default() -> Self {
        Self {
            background_cap: DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clusterer: Clusterer,
    #[serde(default = "default_threshold")]
    pub failure_threshold: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub segmenter: SegmenterConfig,
    #[serde(default)]
    pub postprocess: MorphConfig,
    #[serde(default)]
    pub prompting: PromptingConfig,
}

fn default_threshold() -> f64 {
    DEFAULT_FAILURE_THRESHOLD
}

impl ExperimentConfig {
    /// Reads and validates a config; relative paths are made relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(Error::invalid("failure_threshold must lie in [0, 1]"));
        }
        if self.segmenter.backend == SegmenterBackend::Sam && self.segmenter.checkpoint.is_none() {
            return Err(Error::invalid("segmenter.checkpoint is required for the sam backend"));
        }
        for m in [&self.models.lung, &self.models.heart] {
            if let CoarseModelConfig::Band { low, high, .. } = m {
                if !(low <= high) {
                    return Err(Error::invalid("band model needs low <= high"));
                }
            }
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
        fix(&mut self.data.manifest);
        for m in [&mut self.models.lung, &mut self.models.heart] {
            if let CoarseModelConfig::Unet { path } = m {
                fix(path);
            }
        }
        if let Some(p) = self.segmenter.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.segmenter.lock.as_mut() {
            fix(p);
        }
    }

    /// Fails if a file or directory the run needs is missing.
    pub fn check_paths(&self) -> Result<()> {
        let need = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} {} does not exist", p.display())))
            }
        };
        need(&self.data.manifest, "manifest")?;
        for (m, what) in [(&self.models.lung, "lung model"), (&self.models.heart, "heart model")] {
            if let CoarseModelConfig::Unet { path } = m {
                need(path, what)?;
            }
        }
        if self.segmenter.backend == SegmenterBackend::Sam {
            if let Some(p) = &self.segmenter.checkpoint {
                need(p, "checkpoint")?;
            }
            if let Some(p) = &self.segmenter.lock {
                need(p, "lock file")?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialisation of every setting that can change results.
    /// The output and cache directories are left out so a rerun elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        let text = toml::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            clusterer: self.clusterer,
            seed: self.seed,
            background_cap: self.prompting.background_cap,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// A config that runs the fixture stand-ins end to end.
    pub fn hermetic(manifest: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            clusterer: Clusterer::Kmedoids,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            aggregation: Aggregation::PerImage,
            output_dir,
            cache_dir: None,
            data: DataConfig {
                manifest,
                split: Split::Test,
            },
            models: ModelsConfig {
                lung: BandPredictor::FIXTURE_LUNG.into(),
                heart: BandPredictor::FIXTURE_HEART.into(),
            },
            segmenter: SegmenterConfig {
                backend: SegmenterBackend::Fake,
                backbone: BackboneId::VitL,
                checkpoint: None,
                lock: None,
            },
            postprocess: MorphConfig::default(),
            prompting: PromptingConfig::default(),
        }
    }
}
