//! Turns coarse lung and heart masks into point prompts.
//!
//! Two positives are the k=2 cluster representatives of the lung region, five negatives come
//! from the (subsampled) region outside both lung and heart, and three negatives from the
//! heart region. Selection happens in mask space; [`scale_prompts`] maps the points onto the
//! full-resolution image.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clustering::{subsample, Clusterer, PointSet, DEFAULT_SUBSAMPLE_CAP};
use crate::error::{Error, Result};
use crate::grid::{connected_components, BinaryMask, Coord};

pub const POSITIVE_COUNT: usize = 2;
pub const OUTSIDE_NEGATIVE_COUNT: usize = 5;
pub const HEART_NEGATIVE_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Lung,
    Heart,
    Outside,
}

/// Partition of the mask grid. Lung wins where lung and heart overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPixels {
    pub lung: PointSet,
    pub outside: PointSet,
    pub heart: PointSet,
    labels: Array2<Region>,
}

impl RegionPixels {
    pub fn region_of(&self, p: Coord) -> Region {
        self.labels[p]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn lung_mask(&self) -> BinaryMask {
        BinaryMask::from_array(self.labels.mapv(|r| r == Region::Lung))
    }
}

pub fn extract_regions(lung_mask: &BinaryMask, heart_mask: Option<&BinaryMask>) -> Result<RegionPixels> {
    if let Some(h) = heart_mask {
        lung_mask.check_dims(h)?;
    }
    if lung_mask.is_empty() {
        return Err(Error::EmptyLungRegion);
    }
    let (rows, cols) = lung_mask.dims();
    let labels = Array2::from_shape_fn((rows, cols), |p| {
        if lung_mask.get(p) {
            Region::Lung
        } else if heart_mask.is_some_and(|h| h.get(p)) {
            Region::Heart
        } else {
            Region::Outside
        }
    });
    let collect = |which: Region| {
        let pts = labels
            .indexed_iter()
            .filter_map(|(p, &r)| (r == which).then_some(p))
            .collect();
        PointSet::new(pts, (rows, cols)).expect("grid pixels are unique and in bounds")
    };
    Ok(RegionPixels {
        lung: collect(Region::Lung),
        outside: collect(Region::Outside),
        heart: collect(Region::Heart),
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub positives: Vec<Coord>,
    pub negatives: Vec<Coord>,
    /// `(rows, cols)` of the coordinate space the points live in.
    pub space: (usize, usize),
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_bounds(&self) -> bool {
        self.positives
            .iter()
            .chain(&self.negatives)
            .all(|&(r, c)| r < self.space.0 && c < self.space.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptWarning {
    /// No heart pixels: only the five outside negatives were emitted.
    HeartAbsent,
    /// One or two heart pixels: all of them were used as negatives.
    HeartTooSmall,
    /// The lung region has two sizeable components but both positives landed in one.
    SingleLobe,
}

impl PromptWarning {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptWarning::HeartAbsent => "heart_absent",
            PromptWarning::HeartTooSmall => "heart_too_small",
            PromptWarning::SingleLobe => "single_lobe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub clusterer: Clusterer,
    pub seed: u64,
    /// The outside region is subsampled to this many pixels before clustering.
    pub background_cap: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            clusterer: Clusterer::Kmedoids,
            seed: 0,
            background_cap: DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub prompts: PromptSet,
    /// How many leading negatives came from the outside region; the rest are heart points.
    pub outside_negatives: usize,
    pub warnings: Vec<PromptWarning>,
    /// Points that do not lie in the region they were drawn for. Always 0 for k-medoids;
    /// snapped k-means centroids can fall outside their region.
    pub region_violations: usize,
}

/// K-medoids selection with default settings.
pub fn select_prompts(regions: &RegionPixels, seed: u64) -> Result<PromptSelection> {
    select_prompts_with(
        regions,
        &PromptConfig {
            seed,
            ..PromptConfig::default()
        },
    )
}

pub fn select_prompts_with(regions: &RegionPixels, config: &PromptConfig) -> Result<PromptSelection> {
    if regions.lung.len() < POSITIVE_COUNT {
        return Err(Error::TooFewPoints {
            needed: POSITIVE_COUNT,
            got: regions.lung.len(),
        });
    }
    let clusterer = config.clusterer;
    let positives = clusterer.representatives(&regions.lung, POSITIVE_COUNT, config.seed)?;

    let background = subsample(&regions.outside, config.background_cap, config.seed);
    if background.len() < OUTSIDE_NEGATIVE_COUNT {
        return Err(Error::TooFewPoints {
            needed: OUTSIDE_NEGATIVE_COUNT,
            got: background.len(),
        });
    }
    let mut negatives = clusterer.representatives(&background, OUTSIDE_NEGATIVE_COUNT, config.seed)?;
    let outside_negatives = negatives.len();

    let mut warnings = Vec::new();
    let heart_negatives = match regions.heart.len() {
        0 => {
            warnings.push(PromptWarning::HeartAbsent);
            Vec::new()
        }
        n if n < HEART_NEGATIVE_COUNT => {
            warnings.push(PromptWarning::HeartTooSmall);
            regions.heart.points().to_vec()
        }
        _ => clusterer.representatives(&regions.heart, HEART_NEGATIVE_COUNT, config.seed)?,
    };
    negatives.extend_from_slice(&heart_negatives);

    if positives_share_lobe(regions, &positives) {
        warnings.push(PromptWarning::SingleLobe);
    }

    let region_violations = positives
        .iter()
        .filter(|&&p| regions.region_of(p) != Region::Lung)
        .count()
        + negatives[..outside_negatives]
            .iter()
            .filter(|&&p| regions.region_of(p) != Region::Outside)
            .count()
        + heart_negatives
            .iter()
            .filter(|&&p| regions.region_of(p) != Region::Heart)
            .count();
    if region_violations > 0 {
        tracing::debug!(region_violations, %clusterer, "prompt points outside their region");
    }

    Ok(PromptSelection {
        prompts: PromptSet {
            positives,
            negatives,
            space: regions.dims(),
        },
        outside_negatives,
        warnings,
        region_violations,
    })
}

// Components smaller than this share of the lung region are ignored as specks.
const LOBE_MIN_SHARE: f64 = 0.05;

fn positives_share_lobe(regions: &RegionPixels, positives: &[Coord]) -> bool {
    let min_size = (regions.lung.len() as f64 * LOBE_MIN_SHARE).ceil() as usize;
    let lobes: Vec<Vec<Coord>> = connected_components(&regions.lung_mask())
        .into_iter()
        .filter(|c| c.len() >= min_size)
        .collect();
    if lobes.len() < 2 {
        return false;
    }
    let lobe_of = |p: &Coord| lobes.iter().position(|l| l.binary_search(p).is_ok());
    let ids: Vec<_> = positives.iter().map(lobe_of).collect();
    ids.windows(2).all(|w| w[0] == w[1])
}

/// Maps pixel centres between spaces: `(r, c) → (⌊(r + ½)·ρr⌋, ⌊(c + ½)·ρc⌋)`, clamped.
pub fn scale_prompts(prompts: &PromptSet, to_space: (usize, usize)) -> Result<PromptSet> {
    let from = prompts.space;
    if to_space.0 < from.0 || to_space.1 < from.1 {
        return Err(Error::invalid(format!(
            "cannot scale prompts from {from:?} down to {to_space:?}"
        )));
    }
    let rho = (to_space.0 as f64 / from.0 as f64, to_space.1 as f64 / from.1 as f64);
    let map = |&(r, c): &Coord| {
        let r = ((r as f64 + 0.5) * rho.0).floor() as usize;
        let c = ((c as f64 + 0.5) * rho.1).floor() as usize;
        (r.min(to_space.0 - 1), c.min(to_space.1 - 1))
    };
    Ok(PromptSet {
        positives: prompts.positives.iter().map(map).collect(),
        negatives: prompts.negatives.iter().map(map).collect(),
        space: to_space,
    })
}

/// Prompt export document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub image_id: String,
    pub space: [usize; 2],
    pub positives: Vec<[usize; 2]>,
    pub negatives: Vec<[usize; 2]>,
    pub warnings: Vec<String>,
}

impl PromptRecord {
    pub fn new(image_id: impl Into<String>, prompts: &PromptSet, warnings: &[PromptWarning]) -> Self {
        let pts = |v: &[Coord]| v.iter().map(|&(r, c)| [r, c]).collect();
        Self {
            image_id: image_id.into(),
            space: [prompts.space.0, prompts.space.1],
            positives: pts(&prompts.positives),
            negatives: pts(&prompts.negatives),
            warnings: warnings.iter().map(|w| w.as_str().to_owned()).collect(),
        }
    }

    pub fn prompt_set(&self) -> PromptSet {
        let pts = |v: &[[usize; 2]]| v.iter().map(|p| (p[0], p[1])).collect();
        PromptSet {
            positives: pts(&self.positives),
            negatives: pts(&self.negatives),
            space: (self.space[0], self.space[1]),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
