//! CXR datasets: loading image/mask pairs, downscaling for the coarse models, and the
//! stratified 70/10/20 split.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! root/images/<stem>.png        radiograph (gray or gray-in-RGB)
//! root/lung_masks/<stem>.png    single-channel {0,255}
//! <heart dir>/<stem>.png        optional, same convention
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, BinaryMask, CxrImage};

/// Input size of the coarse segmenters.
pub const MODEL_DIMS: (usize, usize) = (128, 128);

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Montgomery,
    Shenzhen,
    #[default]
    Other,
}

impl DatasetId {
    /// Guesses the dataset from a directory name.
    pub fn infer(root: &Path) -> Self {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if name.contains("montgomery") {
            DatasetId::Montgomery
        } else if name.contains("shenzhen") {
            DatasetId::Shenzhen
        } else {
            DatasetId::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Montgomery => "montgomery",
            DatasetId::Shenzhen => "shenzhen",
            DatasetId::Other => "other",
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "montgomery" => Ok(DatasetId::Montgomery),
            "shenzhen" => Ok(DatasetId::Shenzhen),
            "other" => Ok(DatasetId::Other),
            _ => Err(Error::invalid(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}; expected train, val or test"))),
        }
    }
}

/// Sample ids are `"<dataset>/<stem>"`; this maps one to a flat file-name stem.
pub fn file_stem_for(id: &str) -> String {
    id.replace('/', "__")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CxrSample {
    pub id: String,
    pub image: CxrImage,
    pub lung_mask: BinaryMask,
    pub heart_mask: Option<BinaryMask>,
    pub dataset: DatasetId,
    pub split: Split,
}

impl CxrSample {
    /// Checks that both masks match the image dimensions.
    pub fn new(
        id: impl Into<String>,
        image: CxrImage,
        lung_mask: BinaryMask,
        heart_mask: Option<BinaryMask>,
        dataset: DatasetId,
    ) -> Result<Self> {
        let id = id.into();
        let dims = image.dims();
        for (what, mask) in [("lung mask", Some(&lung_mask)), ("heart mask", heart_mask.as_ref())] {
            if let Some(mask) = mask {
                if mask.dims() != dims {
                    return Err(Error::Sample {
                        id,
                        reason: format!(
                            "{what} is {:?} but image is {:?}",
                            mask.dims(),
                            dims
                        ),
                    });
                }
            }
        }
        Ok(Self {
            id,
            image,
            lung_mask,
            heart_mask,
            dataset,
            split: Split::Unassigned,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedSample {
    /// Min-max normalised gray, `MODEL_DIMS`.
    pub gray: Array2<f32>,
    pub lung_mask_small: BinaryMask,
    pub heart_mask_small: Option<BinaryMask>,
    pub source_id: String,
    /// The source image was constant, so `gray` is all zeros.
    pub constant_input: bool,
}

/// Channel mean, bilinear resize to `MODEL_DIMS`, then `(x - min) / (max - min)`.
///
/// Returns the grid and whether the image was constant (in which case it is all zeros).
pub fn preprocess_image(image: &CxrImage) -> (Array2<f32>, bool) {
    let small = resize_bilinear(&image.gray_f32(), MODEL_DIMS);
    min_max_normalize(small)
}

fn min_max_normalize(mut grid: Array2<f32>) -> (Array2<f32>, bool) {
    let (lo, hi) = grid
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        grid.fill(0.0);
        return (grid, true);
    }
    let range = hi - lo;
    grid.mapv_inplace(|v| (v - lo) / range);
    (grid, false)
}

pub fn preprocess(sample: &CxrSample) -> ProcessedSample {
    let (gray, constant_input) = preprocess_image(&sample.image);
    if constant_input {
        tracing::warn!(id = %sample.id, "constant image; normalised to zeros");
    }
    ProcessedSample {
        gray,
        lung_mask_small: sample.lung_mask.resize_nearest(MODEL_DIMS),
        heart_mask_small: sample.heart_mask.as_ref().map(|m| m.resize_nearest(MODEL_DIMS)),
        source_id: sample.id.clone(),
        constant_input,
    }
}

/// A sample that could not be loaded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadIssue {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<CxrSample>,
    pub rejected: Vec<LoadIssue>,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem() {
            out.insert(stem.to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Loads every `images/` entry of `root` with its lung mask and optional heart mask. The
/// dataset is inferred from the directory name.
pub fn load_dataset(root: &Path, heart_mask_dir: Option<&Path>) -> Result<LoadedDataset> {
    load_dataset_as(root, heart_mask_dir, DatasetId::infer(root))
}

pub fn load_dataset_as(
    root: &Path,
    heart_mask_dir: Option<&Path>,
    dataset: DatasetId,
) -> Result<LoadedDataset> {
    let images = image_files(&root.join("images"))?;
    if images.is_empty() {
        tracing::warn!(root = %root.display(), "no images found");
        return Ok(LoadedDataset::default());
    }
    let lung_dir = root.join("lung_masks");
    let lungs = if lung_dir.is_dir() {
        image_files(&lung_dir)?
    } else {
        BTreeMap::new()
    };
    let hearts = match heart_mask_dir {
        Some(dir) => image_files(dir)?,
        None => BTreeMap::new(),
    };

    let results: Vec<std::result::Result<CxrSample, LoadIssue>> = images
        .par_iter()
        .map(|(stem, image_path)| {
            let id = format!("{dataset}/{stem}");
            let issue = |reason: String| LoadIssue {
                id: id.clone(),
                reason,
            };
            let lung_path = lungs
                .get(stem)
                .ok_or_else(|| issue("missing lung mask".into()))?;
            let image = CxrImage::load(image_path).map_err(|e| issue(e.to_string()))?;
            let lung = BinaryMask::load_png(lung_path).map_err(|e| issue(e.to_string()))?;
            let heart = hearts
                .get(stem)
                .map(|p| BinaryMask::load_png(p))
                .transpose()
                .map_err(|e| issue(e.to_string()))?;
            CxrSample::new(id.clone(), image, lung, heart, dataset).map_err(|e| issue(e.to_string()))
        })
        .collect();

    let mut loaded = LoadedDataset::default();
    for r in results {
        match r {
            Ok(s) => loaded.samples.push(s),
            Err(issue) => {
                tracing::warn!(id = %issue.id, reason = %issue.reason, "rejected sample");
                loaded.rejected.push(issue);
            }
        }
    }
    Ok(loaded)
}

/// Loads only the radiographs under `root/images`, never touching any mask directory.
pub fn load_images(root: &Path, dataset: DatasetId) -> Result<Vec<(String, Result<CxrImage>)>> {
    let images = image_files(&root.join("images"))?;
    Ok(images
        .par_iter()
        .map(|(stem, path)| (format!("{dataset}/{stem}"), CxrImage::load(path)))
        .collect())
}

/// Where a manifest's samples come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSource {
    pub root: PathBuf,
    pub dataset: DatasetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_masks: Option<PathBuf>,
}

/// Train/val/test partition of sample ids; serialised as the split manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<DataSource>,
}

impl DatasetSplit {
    pub fn split_of(&self, id: &str) -> Split {
        let has = |v: &[String]| v.iter().any(|x| x == id);
        if has(&self.train) {
            Split::Train
        } else if has(&self.val) {
            Split::Val
        } else if has(&self.test) {
            Split::Test
        } else {
            Split::Unassigned
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Unassigned => &[],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// File locations of every id in `split`, in manifest order. Relative source roots are
    /// taken relative to `base`.
    pub fn resolve(&self, split: Split, base: &Path) -> Result<Vec<SampleRef>> {
        let mut index: BTreeMap<String, SampleRef> = BTreeMap::new();
        for source in &self.sources {
            let root = base.join(&source.root);
            let images = image_files(&root.join("images"))?;
            let lung_dir = root.join("lung_masks");
            let lungs = optional_files(&lung_dir)?;
            let hearts = match &source.heart_masks {
                Some(dir) => optional_files(&base.join(dir))?,
                None => BTreeMap::new(),
            };
            for (stem, image) in images {
                let id = format!("{}/{stem}", source.dataset);
                index.insert(
                    id.clone(),
                    SampleRef {
                        id,
                        dataset: source.dataset,
                        image,
                        lung_mask: lungs.get(&stem).cloned(),
                        heart_mask: hearts.get(&stem).cloned(),
                    },
                );
            }
        }
        self.ids(split)
            .iter()
            .map(|id| {
                index.get(id).cloned().ok_or_else(|| Error::Sample {
                    id: id.clone(),
                    reason: "not found under any manifest source".into(),
                })
            })
            .collect()
    }
}

/// Where one manifest entry lives on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub id: String,
    pub dataset: DatasetId,
    pub image: PathBuf,
    pub lung_mask: Option<PathBuf>,
    pub heart_mask: Option<PathBuf>,
}

impl SampleRef {
    /// Reads the image and both annotations; a missing lung mask is an error.
    pub fn load(&self) -> Result<CxrSample> {
        let image = CxrImage::load(&self.image)?;
        let lung_path = self.lung_mask.as_ref().ok_or_else(|| Error::Sample {
            id: self.id.clone(),
            reason: "no lung mask".into(),
        })?;
        let lung = BinaryMask::load_png(lung_path)?;
        let heart = self.heart_mask.as_deref().map(BinaryMask::load_png).transpose()?;
        CxrSample::new(self.id.clone(), image, lung, heart, self.dataset)
    }
}

fn optional_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if dir.is_dir() {
        image_files(dir)
    } else {
        Ok(BTreeMap::new())
    }
}

/// Ids (`<dataset>/<stem>`) of the images under `root/images` that have a lung mask.
pub fn annotated_ids(root: &Path, dataset: DatasetId) -> Result<Vec<String>> {
    let lungs = optional_files(&root.join("lung_masks"))?;
    Ok(image_files(&root.join("images"))?
        .into_keys()
        .filter(|stem| lungs.contains_key(stem))
        .map(|stem| format!("{dataset}/{stem}"))
        .collect())
}

/// Minimum number of samples for the 70/10/20 ratios to give every bucket a member.
pub const MIN_SPLIT_SAMPLES: usize = 10;

/// Bucket sizes for `n` samples: `round(0.7 n)`, `round(0.1 n)`, remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = (n as f64 * 0.1).round() as usize;
    (train, val, n - train - val)
}

/// Shuffles each dataset's ids independently with `seed` and cuts them 70/10/20.
pub fn split_ids(entries: &[(String, DatasetId)], seed: u64) -> Result<DatasetSplit> {
    if entries.len() < MIN_SPLIT_SAMPLES {
        return Err(Error::invalid(format!(
            "need at least {MIN_SPLIT_SAMPLES} samples to split 70/10/20, got {}",
            entries.len()
        )));
    }
    let mut groups: BTreeMap<DatasetId, Vec<String>> = BTreeMap::new();
    for (id, ds) in entries {
        groups.entry(*ds).or_default().push(id.clone());
    }
    let mut split = DatasetSplit {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        sources: Vec::new(),
    };
    for ids in groups.values_mut() {
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (n_train, n_val, _) = split_sizes(ids.len());
        split.train.extend_from_slice(&ids[..n_train]);
        split.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        split.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    Ok(split)
}

pub fn split_dataset(samples: &[CxrSample], seed: u64) -> Result<DatasetSplit> {
    let entries: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.dataset)).collect();
    split_ids(&entries, seed)
}
