//! Interface to a promptable foundation segmenter.
//!
//! The pipeline works in `(row, col)`; the model wire format is `(x = col, y = row)` with
//! labels 1 (foreground) / 0 (background). The conversion happens only in [`segment`].
//! Checkpoints are pinned by SHA-256 in a lock file and sessions are cached per
//! `(backbone, path)`.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, CxrImage};
use crate::postprocess::{dilate, StructuringElement};
use crate::prompting::PromptSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    VitH,
    #[default]
    VitL,
    VitB,
}

impl BackboneId {
    pub const ALL: [BackboneId; 3] = [BackboneId::VitH, BackboneId::VitL, BackboneId::VitB];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::VitH => "vit_h",
            BackboneId::VitL => "vit_l",
            BackboneId::VitB => "vit_b",
        }
    }

    /// Table-style label, e.g. `SAM (ViT-l)`.
    pub fn model_label(self) -> &'static str {
        match self {
            BackboneId::VitH => "SAM (ViT-h)",
            BackboneId::VitL => "SAM (ViT-l)",
            BackboneId::VitB => "SAM (ViT-b)",
        }
    }

    /// Image-encoder embedding width, which identifies the backbone inside a checkpoint.
    pub fn embed_dim(self) -> usize {
        match self {
            BackboneId::VitH => 1280,
            BackboneId::VitL => 1024,
            BackboneId::VitB => 768,
        }
    }

    pub fn from_embed_dim(dim: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.embed_dim() == dim)
    }

    pub fn release_file_name(self) -> &'static str {
        match self {
            BackboneId::VitH => "sam_vit_h_4b8939.pth",
            BackboneId::VitL => "sam_vit_l_0b3195.pth",
            BackboneId::VitB => "sam_vit_b_01ec64.pth",
        }
    }

    pub fn release_url(self) -> String {
        format!(
            "https://dl.fbaipublicfiles.com/segment_anything/{}",
            self.release_file_name()
        )
    }
}

impl std::fmt::Display for BackboneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backbone {s:?}")))
    }
}

/// One point in model wire format: pixel coordinates of the input image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    /// 1 = foreground, 0 = background.
    pub label: u8,
}

/// A candidate mask and the model's own quality estimate for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub mask: BinaryMask,
    pub score: f32,
}

pub trait PromptableSegmenter: Send + Sync {
    fn name(&self) -> String;

    /// All candidate masks for the prompt, each at the image's dimensions.
    fn predict(&self, image: &CxrImage, points: &[PointPrompt]) -> Result<Vec<Candidate>>;
}

impl<T: PromptableSegmenter + ?Sized> PromptableSegmenter for Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn predict(&self, image: &CxrImage, points: &[PointPrompt]) -> Result<Vec<Candidate>> {
        (**self).predict(image, points)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub mask: BinaryMask,
    pub confidence: f32,
    pub candidates_considered: usize,
}

/// Converts the prompt to wire format, runs the model and keeps the highest-scoring
/// candidate (first one on ties).
pub fn segment(
    segmenter: &dyn PromptableSegmenter,
    image_id: &str,
    image: &CxrImage,
    prompts: &PromptSet,
) -> Result<SegmentationOutput> {
    if prompts.space != image.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: prompts.space,
        });
    }
    if prompts.positives.is_empty() {
        return Err(Error::invalid("segmenter prompt needs at least one positive point"));
    }
    let wire: Vec<PointPrompt> = prompts
        .positives
        .iter()
        .map(|&p| (p, 1))
        .chain(prompts.negatives.iter().map(|&p| (p, 0)))
        .map(|((row, col), label)| PointPrompt {
            x: col as f64,
            y: row as f64,
            label,
        })
        .collect();
    let backend_err = |message: String| Error::Backend {
        image_id: image_id.to_owned(),
        message,
    };
    let candidates = segmenter
        .predict(image, &wire)
        .map_err(|e| backend_err(e.to_string()))?;
    let considered = candidates.len();
    let best = candidates
        .into_iter()
        .enumerate()
        .fold(None::<(usize, Candidate)>, |best, (i, c)| match best {
            Some((_, ref b)) if !(c.score > b.score) => best,
            _ => Some((i, c)),
        })
        .map(|(_, c)| c)
        .ok_or_else(|| backend_err("model returned no candidate masks".into()))?;
    if best.mask.dims() != image.dims() {
        return Err(backend_err(format!(
            "mask is {:?}, image is {:?}",
            best.mask.dims(),
            image.dims()
        )));
    }
    Ok(SegmentationOutput {
        mask: best.mask,
        confidence: best.score,
        candidates_considered: considered,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEntry {
    pub backbone: BackboneId,
    pub path: PathBuf,
    pub sha256: String,
    pub url: String,
}

/// Pinned checkpoints, stored as TOML `[[checkpoint]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointLock {
    #[serde(default, rename = "checkpoint")]
    pub entries: Vec<LockEntry>,
}

impl CheckpointLock {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn entry_for(&self, backbone: BackboneId) -> Option<&LockEntry> {
        self.entries.iter().find(|e| e.backbone == backbone)
    }

    /// Hashes `path` and records it as the checkpoint for `backbone`, replacing any previous
    /// entry for that backbone.
    pub fn pin(&mut self, backbone: BackboneId, path: &Path) -> Result<&LockEntry> {
        let sha256 = sha256_file(path)?;
        self.entries.retain(|e| e.backbone != backbone);
        self.entries.push(LockEntry {
            backbone,
            path: path.to_owned(),
            sha256,
            url: backbone.release_url(),
        });
        self.entries.sort_by_key(|e| e.backbone);
        Ok(self.entry_for(backbone).expect("just inserted"))
    }

    /// Checks that `path` exists and hashes to the pinned checkpoint for `backbone`.
    /// Returns the file's SHA-256.
    pub fn verify(&self, backbone: BackboneId, path: &Path) -> Result<String> {
        if !path.is_file() {
            let url = self
                .entry_for(backbone)
                .map(|e| e.url.clone())
                .unwrap_or_else(|| backbone.release_url());
            return Err(Error::Checkpoint(format!(
                "{} not found; download the {backbone} checkpoint with \
                 `curl -L -o {} {url}` and pin it with `ksam sam lock --backbone {backbone} --checkpoint {}`",
                path.display(),
                path.display(),
                path.display(),
            )));
        }
        let hash = sha256_file(path)?;
        if let Some(owner) = self.entries.iter().find(|e| e.sha256 == hash) {
            if owner.backbone != backbone {
                return Err(Error::Checkpoint(format!(
                    "{} is the pinned {} checkpoint; expected a {backbone} checkpoint",
                    path.display(),
                    owner.backbone
                )));
            }
            return Ok(hash);
        }
        match self.entry_for(backbone) {
            Some(entry) => Err(Error::Checkpoint(format!(
                "hash mismatch for {}: expected the {backbone} checkpoint ({}), got {hash}",
                path.display(),
                entry.sha256
            ))),
            None => Err(Error::Checkpoint(format!(
                "no {backbone} checkpoint pinned in the lock file; run \
                 `ksam sam lock --backbone {backbone} --checkpoint {}`",
                path.display()
            ))),
        }
    }
}

/// A loaded model bound to its verified checkpoint. Immutable after load.
#[derive(Debug)]
pub struct SegmenterSession<S> {
    pub backbone: BackboneId,
    pub checkpoint_path: PathBuf,
    pub sha256: String,
    pub model: S,
}

type SessionKey = (BackboneId, PathBuf);

/// Lazily loads sessions and hands out shared references to them.
pub struct SessionCache<S> {
    sessions: Mutex<HashMap<SessionKey, Arc<SegmenterSession<S>>>>,
}

impl<S> Default for SessionCache<S> {
    fn default() -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
        }
    }
}

impl<S> SessionCache<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the cached session for `(backbone, path)`, or verifies the checkpoint against
    /// `lock` and builds one with `loader`.
    pub fn load_session<F>(
        &self,
        backbone: BackboneId,
        path: &Path,
        lock: &CheckpointLock,
        loader: F,
    ) -> Result<Arc<SegmenterSession<S>>>
    where
        F: FnOnce(&Path, BackboneId) -> Result<S>,
    {
        let key_path = path.canonicalize().unwrap_or_else(|_| path.to_owned());
        let key = (backbone, key_path);
        let mut sessions = self.sessions.lock().expect("session cache poisoned");
        if let Some(s) = sessions.get(&key) {
            return Ok(Arc::clone(s));
        }
        let sha256 = lock.verify(backbone, path)?;
        let model = loader(path, backbone)?;
        let session = Arc::new(SegmenterSession {
            backbone,
            checkpoint_path: path.to_owned(),
            sha256,
            model,
        });
        sessions.insert(key, Arc::clone(&session));
        Ok(session)
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: PromptableSegmenter> PromptableSegmenter for SegmenterSession<S> {
    fn name(&self) -> String {
        self.model.name()
    }

    fn predict(&self, image: &CxrImage, points: &[PointPrompt]) -> Result<Vec<Candidate>> {
        self.model.predict(image, points)
    }
}

/// Checkpoint-free stand-in: grows 4-connected regions of similar intensity from the
/// positive points, one candidate per tolerance. A candidate scores the fraction of negative
/// points it excludes times the intensity contrast across its boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct FakeSegmenter {
    /// Allowed deviation from the seed's 5×5 mean, on a 0–1 intensity scale.
    pub tolerances: Vec<f32>,
}

impl Default for FakeSegmenter {
    fn default() -> Self {
        Self {
            tolerances: vec![0.05, 0.10, 0.20],
        }
    }
}

impl FakeSegmenter {
    fn grow(gray: &Array2<f32>, seeds: &[(usize, usize)], tol: f32) -> BinaryMask {
        let (rows, cols) = gray.dim();
        let mut mask = BinaryMask::new(rows, cols);
        for &(sr, sc) in seeds {
            let window: Vec<f32> = (sr.saturating_sub(2)..=(sr + 2).min(rows - 1))
                .flat_map(|r| (sc.saturating_sub(2)..=(sc + 2).min(cols - 1)).map(move |c| (r, c)))
                .map(|p| gray[p])
                .collect();
            let reference = window.iter().sum::<f32>() / window.len() as f32;
            let mut stack = vec![(sr, sc)];
            while let Some(p) = stack.pop() {
                if mask.get(p) || (gray[p] - reference).abs() > tol {
                    continue;
                }
                mask.set(p, true);
                let (r, c) = p;
                if r > 0 {
                    stack.push((r - 1, c));
                }
                if r + 1 < rows {
                    stack.push((r + 1, c));
                }
                if c > 0 {
                    stack.push((r, c - 1));
                }
                if c + 1 < cols {
                    stack.push((r, c + 1));
                }
            }
        }
        mask
    }

    fn score(gray: &Array2<f32>, mask: &BinaryMask, negatives: &[(usize, usize)]) -> f32 {
        if mask.is_empty() {
            return 0.0;
        }
        let ring = dilate(mask, 1, StructuringElement::Square3);
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0f32, 0usize, 0.0f32, 0usize);
        for ((p, &v), &in_ring) in gray.indexed_iter().zip(ring.as_array().iter()) {
            if mask.get(p) {
                inside += v;
                n_in += 1;
            } else if in_ring {
                outside += v;
                n_out += 1;
            }
        }
        let contrast = if n_out == 0 {
            0.0
        } else {
            (inside / n_in as f32 - outside / n_out as f32).abs()
        };
        let excluded = if negatives.is_empty() {
            1.0
        } else {
            negatives.iter().filter(|&&p| !mask.get(p)).count() as f32 / negatives.len() as f32
        };
        excluded * contrast
    }
}

impl PromptableSegmenter for FakeSegmenter {
    fn name(&self) -> String {
        "fake-region-grow".into()
    }

    fn predict(&self, image: &CxrImage, points: &[PointPrompt]) -> Result<Vec<Candidate>> {
        let (rows, cols) = image.dims();
        let gray = image.gray_f32().mapv(|v| v / 255.0);
        let to_pixel = |p: &PointPrompt| {
            (
                (p.y.max(0.0) as usize).min(rows - 1),
                (p.x.max(0.0) as usize).min(cols - 1),
            )
        };
        let seeds: Vec<_> = points.iter().filter(|p| p.label == 1).map(to_pixel).collect();
        let negatives: Vec<_> = points.iter().filter(|p| p.label == 0).map(to_pixel).collect();
        Ok(self
            .tolerances
            .iter()
            .map(|&tol| {
                let mask = Self::grow(&gray, &seeds, tol);
                let score = Self::score(&gray, &mask, &negatives);
                Candidate { mask, score }
            })
            .collect())
    }
}
