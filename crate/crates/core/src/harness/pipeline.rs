//! Per-image pipeline and the evaluation loop over a split.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{file_stem_for, preprocess_image, SampleRef};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, CxrImage};
use crate::metrics::MaskScores;
use crate::postprocess::{clean_mask, MorphConfig};
use crate::prelim::{binarize, MaskPredictor};
use crate::prompting::{extract_regions, scale_prompts, select_prompts_with, PromptConfig, PromptSelection, PromptSet};
use crate::segmenter::{segment, PromptableSegmenter};

use super::config::ExperimentConfig;
use super::report::{overlay, ImageRow, MetricReport, RowFlag};

/// Probability cut applied to the coarse model outputs.
pub const COARSE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LoadImage,
    LungModel,
    HeartModel,
    Regions,
    Prompts,
    ScalePrompts,
    Segment,
    Postprocess,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::LoadImage => "load_image",
            Stage::LungModel => "lung_model",
            Stage::HeartModel => "heart_model",
            Stage::Regions => "regions",
            Stage::Prompts => "prompts",
            Stage::ScalePrompts => "scale_prompts",
            Stage::Segment => "segment",
            Stage::Postprocess => "postprocess",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageFailure {
    move |e| StageFailure {
        stage,
        message: e.to_string(),
    }
}

/// Identifies the weights behind each model so cached stage outputs are not reused across
/// different models.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub lung: String,
    pub heart: String,
    pub segmenter: String,
}

pub struct PipelineModels<'a> {
    pub lung: &'a dyn MaskPredictor,
    pub heart: &'a dyn MaskPredictor,
    pub segmenter: &'a dyn PromptableSegmenter,
    pub fingerprint: ModelFingerprint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub prompt: PromptConfig,
    pub morph: MorphConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            morph: MorphConfig::default(),
        }
    }
}

impl From<&ExperimentConfig> for PipelineSettings {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            prompt: c.prompt_config(),
            morph: c.postprocess,
        }
    }
}

/// Everything upstream of the segmenter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStageOutput {
    /// Coarse masks at the model resolution.
    #[serde(skip)]
    pub lung_coarse: Option<BinaryMask>,
    #[serde(skip)]
    pub heart_coarse: Option<BinaryMask>,
    pub constant_input: bool,
    /// Selection in the coarse model's coordinate space.
    pub selection: PromptSelection,
    /// The same prompts in image coordinates.
    pub prompts: PromptSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub mask: BinaryMask,
    pub raw_mask: BinaryMask,
    pub prompt: PromptStageOutput,
    pub confidence: f32,
    pub candidates_considered: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct SegmentMeta {
    confidence: f32,
    candidates_considered: usize,
}

/// On-disk cache of per-image stage outputs. Each stage writes under a directory keyed by
/// the hash of every setting and model it depends on, so runs that differ only downstream
/// share the upstream files.
#[derive(Clone, Debug)]
pub struct StageCache {
    prompts_dir: PathBuf,
    segment_dir: PathBuf,
    clean_dir: PathBuf,
}

fn key(parts: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(parts).expect("cache key serialises");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

impl StageCache {
    pub fn new(root: &Path, settings: &PipelineSettings, fingerprint: &ModelFingerprint) -> Self {
        let prompts = key(&(&fingerprint.lung, &fingerprint.heart, &settings.prompt));
        let segment = key(&(&prompts, &fingerprint.segmenter));
        let clean = key(&(&segment, &settings.morph));
        Self {
            prompts_dir: root.join(format!("prompts-{prompts}")),
            segment_dir: root.join(format!("segment-{segment}")),
            clean_dir: root.join(format!("clean-{clean}")),
        }
    }

    fn path(dir: &Path, image_id: &str, suffix: &str) -> PathBuf {
        dir.join(format!("{}{suffix}", file_stem_for(image_id)))
    }

    fn write(path: &Path, write: impl FnOnce(&Path) -> Result<()>) {
        let result = (|| {
            let dir = path.parent().expect("cache files live in a directory");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            write(&tmp)?;
            fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
        })();
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "could not write stage cache");
        }
    }

    fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn get_prompts(&self, image_id: &str) -> Option<PromptStageOutput> {
        let mut out: PromptStageOutput = Self::read_json(&Self::path(&self.prompts_dir, image_id, ".json"))?;
        out.lung_coarse = BinaryMask::load_png(&Self::path(&self.prompts_dir, image_id, ".lung.png")).ok();
        out.heart_coarse = BinaryMask::load_png(&Self::path(&self.prompts_dir, image_id, ".heart.png")).ok();
        Some(out)
    }

    fn put_prompts(&self, image_id: &str, out: &PromptStageOutput) {
        Self::write(&Self::path(&self.prompts_dir, image_id, ".json"), |p| {
            fs::write(p, serde_json::to_string_pretty(out)?).map_err(|e| Error::io(p, e))
        });
        if let Some(m) = &out.lung_coarse {
            Self::write(&Self::path(&self.prompts_dir, image_id, ".lung.png"), |p| m.save_png(p));
        }
        if let Some(m) = &out.heart_coarse {
            Self::write(&Self::path(&self.prompts_dir, image_id, ".heart.png"), |p| m.save_png(p));
        }
    }

    fn get_segment(&self, image_id: &str) -> Option<(BinaryMask, SegmentMeta)> {
        let meta = Self::read_json(&Self::path(&self.segment_dir, image_id, ".json"))?;
        let mask = BinaryMask::load_png(&Self::path(&self.segment_dir, image_id, ".png")).ok()?;
        Some((mask, meta))
    }

    fn put_segment(&self, image_id: &str, mask: &BinaryMask, meta: SegmentMeta) {
        Self::write(&Self::path(&self.segment_dir, image_id, ".png"), |p| mask.save_png(p));
        Self::write(&Self::path(&self.segment_dir, image_id, ".json"), |p| {
            fs::write(p, serde_json::to_string(&meta)?).map_err(|e| Error::io(p, e))
        });
    }

    fn get_clean(&self, image_id: &str) -> Option<BinaryMask> {
        BinaryMask::load_png(&Self::path(&self.clean_dir, image_id, ".png")).ok()
    }

    fn put_clean(&self, image_id: &str, mask: &BinaryMask) {
        Self::write(&Self::path(&self.clean_dir, image_id, ".png"), |p| mask.save_png(p));
    }
}

/// Coarse masks and prompt selection for one radiograph. Takes only the image, so no
/// annotation can influence the prompts.
pub fn prompt_stage(
    image_id: &str,
    image: &CxrImage,
    settings: &PipelineSettings,
    lung: &dyn MaskPredictor,
    heart: &dyn MaskPredictor,
    cache: Option<&StageCache>,
) -> std::result::Result<PromptStageOutput, StageFailure> {
    if let Some(hit) = cache.and_then(|c| c.get_prompts(image_id)) {
        if hit.prompts.space == image.dims() {
            return Ok(hit);
        }
    }
    let (gray, constant_input) = preprocess_image(image);
    if constant_input {
        tracing::warn!(image_id, "constant image");
    }
    let lung_coarse = binarize(&lung.predict(&gray).map_err(at(Stage::LungModel))?, COARSE_THRESHOLD);
    let heart_coarse = binarize(&heart.predict(&gray).map_err(at(Stage::HeartModel))?, COARSE_THRESHOLD);
    let regions = extract_regions(&lung_coarse, Some(&heart_coarse)).map_err(at(Stage::Regions))?;
    let selection = select_prompts_with(&regions, &settings.prompt).map_err(at(Stage::Prompts))?;
    let prompts = scale_prompts(&selection.prompts, image.dims()).map_err(at(Stage::ScalePrompts))?;
    let out = PromptStageOutput {
        lung_coarse: Some(lung_coarse),
        heart_coarse: Some(heart_coarse),
        constant_input,
        selection,
        prompts,
    };
    if let Some(c) = cache {
        c.put_prompts(image_id, &out);
    }
    Ok(out)
}

/// Preprocess, coarse masks, prompts, segmenter, cleanup. Ground truth is never read here.
pub fn run_pipeline(
    image_id: &str,
    image: &CxrImage,
    settings: &PipelineSettings,
    models: &PipelineModels<'_>,
    cache: Option<&StageCache>,
) -> std::result::Result<PipelineOutput, StageFailure> {
    let prompt = prompt_stage(image_id, image, settings, models.lung, models.heart, cache)?;
    let cached = cache
        .and_then(|c| c.get_segment(image_id))
        .filter(|(m, _)| m.dims() == image.dims());
    let (raw_mask, meta) = match cached {
        Some(hit) => hit,
        None => {
            let out = segment(models.segmenter, image_id, image, &prompt.prompts)
                .map_err(at(Stage::Segment))?;
            let meta = SegmentMeta {
                confidence: out.confidence,
                candidates_considered: out.candidates_considered,
            };
            if let Some(c) = cache {
                c.put_segment(image_id, &out.mask, meta);
            }
            (out.mask, meta)
        }
    };
    let mask = match cache.and_then(|c| c.get_clean(image_id)).filter(|m| m.dims() == image.dims()) {
        Some(m) => m,
        None => {
            let m = clean_mask(&raw_mask, &settings.morph);
            if let Some(c) = cache {
                c.put_clean(image_id, &m);
            }
            m
        }
    };
    Ok(PipelineOutput {
        mask,
        raw_mask,
        prompt,
        confidence: meta.confidence,
        candidates_considered: meta.candidates_considered,
    })
}

/// What to do besides scoring.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Reuse and fill the stage cache.
    pub cache: Option<StageCache>,
    /// Write `<id>.png` predicted masks and `<id>.overlay.png` overlays here.
    pub artifacts: Option<PathBuf>,
}

enum Outcome {
    Row(Box<ImageRow>),
    Skipped(String),
}

/// Runs the pipeline on every sample and scores the cleaned masks against the annotations.
/// A stage failure scores an empty prediction and is flagged; an unreadable annotation
/// leaves the image out of the rows and lists it under `skipped`.
pub fn evaluate(
    samples: &[SampleRef],
    config: &ExperimentConfig,
    models: &PipelineModels<'_>,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let settings = PipelineSettings::from(config);
    if let Some(dir) = &options.artifacts {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let outcomes: Vec<(String, Outcome)> = samples
        .par_iter()
        .map(|s| (s.id.clone(), evaluate_one(s, config, &settings, models, options)))
        .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Outcome::Row(r) => rows.push(*r),
            Outcome::Skipped(reason) => {
                tracing::warn!(image_id = %id, %reason, "not scored");
                skipped.push(crate::dataset::LoadIssue { id, reason });
            }
        }
    }
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    skipped.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MetricReport::build(config, models.segmenter.name(), rows, skipped))
}

fn evaluate_one(
    sample: &SampleRef,
    config: &ExperimentConfig,
    settings: &PipelineSettings,
    models: &PipelineModels<'_>,
    options: &EvalOptions,
) -> Outcome {
    let gt = match &sample.lung_mask {
        Some(p) => match BinaryMask::load_png(p) {
            Ok(m) => m,
            Err(e) => return Outcome::Skipped(format!("lung mask: {e}")),
        },
        None => return Outcome::Skipped("missing lung mask".into()),
    };
    let image = CxrImage::load(&sample.image).map_err(at(Stage::LoadImage));
    let result = image
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|img| run_pipeline(&sample.id, img, settings, models, options.cache.as_ref()));

    let mut flags = Vec::new();
    let (pred, stage_error, confidence, violations) = match result {
        Ok(out) => {
            if out.prompt.constant_input {
                flags.push(RowFlag::ConstantInput);
            }
            flags.extend(out.prompt.selection.warnings.iter().map(|&w| RowFlag::from(w)));
            (
                out.mask,
                None,
                Some(out.confidence),
                out.prompt.selection.region_violations,
            )
        }
        Err(failure) => {
            tracing::warn!(image_id = %sample.id, %failure, "pipeline failure");
            flags.push(RowFlag::PipelineFailure);
            (BinaryMask::new(gt.rows(), gt.cols()), Some(failure), None, 0)
        }
    };
    let scores = match MaskScores::compare(&pred, &gt) {
        Ok(s) => s,
        Err(e) => return Outcome::Skipped(format!("prediction vs annotation: {e}")),
    };
    if scores.empty_agreement {
        flags.push(RowFlag::EmptyAgreement);
    }
    if scores.kappa_degenerate {
        flags.push(RowFlag::KappaDegenerate);
    }
    let failure = scores.dice < config.failure_threshold;
    if failure {
        flags.insert(0, RowFlag::Failure);
    }

    if let (Some(dir), Ok(img)) = (&options.artifacts, &image) {
        let stem = file_stem_for(&sample.id);
        for r in [
            pred.save_png(&dir.join(format!("{stem}.png"))),
            overlay(img, &gt, &pred).save_png(&dir.join(format!("{stem}.overlay.png"))),
        ] {
            if let Err(e) = r {
                tracing::warn!(image_id = %sample.id, error = %e, "could not write artifact");
            }
        }
    }

    Outcome::Row(Box::new(ImageRow {
        image_id: sample.id.clone(),
        dataset: sample.dataset,
        backbone: config.segmenter.backbone,
        clusterer: config.clusterer,
        dice: scores.dice,
        iou: scores.iou,
        kappa: scores.kappa,
        counts: scores.counts,
        failure,
        flags,
        stage_error,
        confidence,
        region_violations: violations,
    }))
}
