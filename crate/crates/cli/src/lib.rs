//! Entry points behind the `ksam` subcommands: building models from a run config, preparing
//! split manifests, exporting prompts and running evaluations.

use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use anyhow::{bail, Context, Result};
use ksam_core::dataset::{
    annotated_ids, file_stem_for, load_images, split_ids, DataSource, DatasetId, DatasetSplit,
    SampleRef, Split,
};
use ksam_core::fixtures::{synthetic_dataset, write_dataset};
use ksam_core::harness::{
    evaluate, prompt_stage, CoarseModelConfig, EvalOptions, ExperimentConfig, MetricReport,
    ModelFingerprint, PipelineModels, PipelineSettings, SegmenterBackend, SegmenterConfig,
    StageCache,
};
use ksam_core::postprocess::MorphConfig;
use ksam_core::prelim::{BandPredictor, MaskPredictor};
use ksam_core::prompting::{PromptConfig, PromptRecord};
use ksam_core::segmenter::{
    sha256_file, BackboneId, CheckpointLock, FakeSegmenter, PromptableSegmenter, SessionCache,
};
use ksam_models::{CoarseModel, SamSegmenter, WEIGHTS_FILE};

pub const DEFAULT_LOCK_FILE: &str = "checkpoints.lock";

static SAM_SESSIONS: LazyLock<SessionCache<SamSegmenter>> = LazyLock::new(SessionCache::new);

pub struct LoadedModels {
    pub lung: Box<dyn MaskPredictor>,
    pub heart: Box<dyn MaskPredictor>,
    pub segmenter: Arc<dyn PromptableSegmenter>,
    pub fingerprint: ModelFingerprint,
}

impl LoadedModels {
    pub fn pipeline(&self) -> PipelineModels<'_> {
        PipelineModels {
            lung: self.lung.as_ref(),
            heart: self.heart.as_ref(),
            segmenter: self.segmenter.as_ref(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// A coarse predictor and a string identifying its weights.
pub fn load_coarse(config: &CoarseModelConfig) -> Result<(Box<dyn MaskPredictor>, String)> {
    match config {
        CoarseModelConfig::Unet { path } => {
            let model = CoarseModel::load(path)
                .with_context(|| format!("loading coarse model from {}", path.display()))?;
            let sha = sha256_file(&path.join(WEIGHTS_FILE))?;
            Ok((Box::new(model), format!("unet:{sha}")))
        }
        CoarseModelConfig::Band {
            low,
            high,
            open_iters,
        } => {
            let band = BandPredictor {
                low: *low,
                high: *high,
                open_iters: *open_iters,
            };
            Ok((Box::new(band), format!("band:{low}:{high}:{open_iters}")))
        }
    }
}

/// The lock file used for `config`: the configured one, else `checkpoints.lock` next to
/// the checkpoint.
pub fn lock_path(config: &SegmenterConfig) -> Option<PathBuf> {
    config.lock.clone().or_else(|| {
        config
            .checkpoint
            .as_ref()
            .map(|c| c.parent().unwrap_or(Path::new("")).join(DEFAULT_LOCK_FILE))
    })
}

pub fn load_segmenter(config: &SegmenterConfig) -> Result<(Arc<dyn PromptableSegmenter>, String)> {
    match config.backend {
        SegmenterBackend::Fake => Ok((Arc::new(FakeSegmenter::default()), "fake".to_string())),
        SegmenterBackend::Sam => {
            let checkpoint = config
                .checkpoint
                .as_ref()
                .context("the sam backend needs segmenter.checkpoint")?;
            let lock_file = lock_path(config).expect("checkpoint is set");
            let lock = if lock_file.exists() {
                CheckpointLock::load(&lock_file)?
            } else {
                CheckpointLock::default()
            };
            let session = SAM_SESSIONS
                .load_session(config.backbone, checkpoint, &lock, |path, backbone| {
                    Ok(SamSegmenter::load(path, backbone)?)
                })
                .with_context(|| format!("lock file {}", lock_file.display()))?;
            let fingerprint = format!("sam:{}:{}", session.backbone, session.sha256);
            Ok((session, fingerprint))
        }
    }
}

pub fn build_models(config: &ExperimentConfig) -> Result<LoadedModels> {
    let (lung, lung_fp) = load_coarse(&config.models.lung).context("lung model")?;
    let (heart, heart_fp) = load_coarse(&config.models.heart).context("heart model")?;
    let (segmenter, seg_fp) = load_segmenter(&config.segmenter)?;
    Ok(LoadedModels {
        lung,
        heart,
        segmenter,
        fingerprint: ModelFingerprint {
            lung: lung_fp,
            heart: heart_fp,
            segmenter: seg_fp,
        },
    })
}

/// Split references for a manifest; relative source roots are relative to the manifest.
pub fn load_split(manifest: &Path, split: Split) -> Result<Vec<SampleRef>> {
    let doc = DatasetSplit::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    Ok(doc.resolve(split, base)?)
}

/// One dataset directory (`images/`, `lung_masks/`) and its optional heart masks.
#[derive(Clone, Debug)]
pub struct SourceSpec {
    pub root: PathBuf,
    pub heart_masks: Option<PathBuf>,
    pub dataset: Option<DatasetId>,
}

/// Lists annotated images under each source and splits them 70/10/20 per dataset.
pub fn prepare_manifest(sources: &[SourceSpec], seed: u64) -> Result<DatasetSplit> {
    if sources.is_empty() {
        bail!("at least one dataset root is needed");
    }
    let mut entries = Vec::new();
    let mut data_sources = Vec::new();
    for s in sources {
        let dataset = s.dataset.unwrap_or_else(|| DatasetId::infer(&s.root));
        let ids = annotated_ids(&s.root, dataset)
            .with_context(|| format!("reading {}", s.root.display()))?;
        tracing::info!(root = %s.root.display(), %dataset, images = ids.len(), "indexed");
        entries.extend(ids.into_iter().map(|id| (id, dataset)));
        data_sources.push(DataSource {
            root: s.root.clone(),
            dataset,
            heart_masks: s.heart_masks.clone(),
        });
    }
    let mut split = split_ids(&entries, seed)?;
    split.sources = data_sources;
    Ok(split)
}

/// Writes `count` synthetic radiographs with lung and heart masks under `out` and a
/// manifest `out/manifest.json` referencing them. Returns the manifest path.
pub fn synthesize(out: &Path, count: usize, seed: u64) -> Result<PathBuf> {
    let root = out.join("synthetic");
    let samples = synthetic_dataset(count, seed);
    write_dataset(&root, &samples)?;
    let entries: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.dataset)).collect();
    let mut split = split_ids(&entries, seed)?;
    split.sources.push(DataSource {
        root: PathBuf::from("synthetic"),
        dataset: DatasetId::Other,
        heart_masks: Some(PathBuf::from("synthetic/heart_masks")),
    });
    let manifest = out.join("manifest.json");
    split.save(&manifest)?;
    Ok(manifest)
}

/// Outcome of a prompt export.
#[derive(Debug, Default)]
pub struct PromptExport {
    pub written: usize,
    pub failed: Vec<(String, String)>,
}

/// Runs the coarse models and prompt selection on the images of `split` and writes one
/// prompt JSON per image. Only the `images/` directories are read.
pub fn export_prompts(
    manifest: &Path,
    split: Split,
    lung: &dyn MaskPredictor,
    heart: &dyn MaskPredictor,
    prompt: PromptConfig,
    out: &Path,
) -> Result<PromptExport> {
    let doc = DatasetSplit::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let wanted: std::collections::BTreeSet<&String> = doc.ids(split).iter().collect();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let settings = PipelineSettings {
        prompt,
        morph: MorphConfig::default(),
    };
    let mut export = PromptExport::default();
    for source in &doc.sources {
        for (id, image) in load_images(&base.join(&source.root), source.dataset)? {
            if !wanted.contains(&id) {
                continue;
            }
            let result = image
                .map_err(|e| e.to_string())
                .and_then(|img| prompt_stage(&id, &img, &settings, lung, heart, None).map_err(|e| e.to_string()));
            match result {
                Ok(stage) => {
                    let record = PromptRecord::new(&id, &stage.prompts, &stage.selection.warnings);
                    record.save(&out.join(format!("{}.json", file_stem_for(&id))))?;
                    export.written += 1;
                }
                Err(e) => {
                    tracing::warn!(%id, error = %e, "prompt export failed");
                    export.failed.push((id, e));
                }
            }
        }
    }
    Ok(export)
}

/// Evaluates the config's split, writing `report.json`, `metrics.csv`, `report.md`, the
/// config and per-image masks and overlays under the output directory.
pub fn run_eval(config: &ExperimentConfig) -> Result<MetricReport> {
    config.validate()?;
    config.check_paths()?;
    let models = build_models(config)?;
    let samples = load_split(&config.data.manifest, config.data.split)?;
    let pipeline = models.pipeline();
    let options = EvalOptions {
        cache: Some(StageCache::new(
            &config.cache_dir(),
            &PipelineSettings::from(config),
            &pipeline.fingerprint,
        )),
        artifacts: Some(config.output_dir.join("masks")),
    };
    let report = evaluate(&samples, config, &pipeline, &options)?;
    report.write_all(&config.output_dir)?;
    config.save(&config.output_dir.join("config.toml"))?;
    Ok(report)
}

/// Pins `checkpoint` as `backbone` in the lock file, creating it when absent.
pub fn pin_checkpoint(lock_file: &Path, backbone: BackboneId, checkpoint: &Path) -> Result<String> {
    let mut lock = if lock_file.exists() {
        CheckpointLock::load(lock_file)?
    } else {
        CheckpointLock::default()
    };
    let sha = lock.pin(backbone, checkpoint)?.sha256.clone();
    lock.save(lock_file)?;
    Ok(sha)
}
