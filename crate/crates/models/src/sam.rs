//! Segment Anything behind the [`PromptableSegmenter`] interface.

use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::segment_anything::sam::{Sam, IMAGE_SIZE};
use ksam_core::grid::{resize_bilinear, BinaryMask, CxrImage};
use ksam_core::segmenter::{BackboneId, Candidate, PointPrompt, PromptableSegmenter};
use ndarray::Array2;

use crate::error::{ModelError, Result};

const PATCH_EMBED: &str = "image_encoder.patch_embed.proj.weight";
const LOW_RES: usize = 256;

pub struct SamSegmenter {
    sam: Sam,
    label: String,
    device: Device,
    /// One forward pass at a time: a ViT-H activation set is several gigabytes.
    gate: Mutex<()>,
}

impl SamSegmenter {
    /// Loads a `.pth` or `.safetensors` checkpoint and checks that it holds `backbone`.
    pub fn load(path: &Path, backbone: BackboneId) -> Result<Self> {
        let device = Device::Cpu;
        let is_pth = path
            .extension()
            .is_some_and(|e| e == "pth" || e == "pt");
        let vb = if is_pth {
            VarBuilder::from_pth(path, DType::F32, &device)?
        } else {
            let tensors = candle_core::safetensors::load(path, &device)?;
            VarBuilder::from_tensors(tensors, DType::F32, &device)
        };
        let found = checkpoint_backbone(&vb)?;
        if found != Some(backbone) {
            let what = found.map_or_else(|| "an unrecognised encoder".to_string(), |b| b.to_string());
            return Err(ksam_core::Error::Checkpoint(format!(
                "{} holds {what}, expected {backbone}",
                path.display()
            ))
            .into());
        }
        let (embed, depth, heads, global): (usize, usize, usize, [usize; 4]) = match backbone {
            BackboneId::VitB => (768, 12, 12, [2, 5, 8, 11]),
            BackboneId::VitL => (1024, 24, 16, [5, 11, 17, 23]),
            BackboneId::VitH => (1280, 32, 16, [7, 15, 23, 31]),
        };
        let sam = Sam::new(embed, depth, heads, &global, vb)?;
        Ok(Self {
            sam,
            label: format!("sam-{}", backbone.as_str()),
            device,
            gate: Mutex::new(()),
        })
    }

    /// The small MobileSAM-style variant with whatever weights `vb` provides.
    pub fn tiny(vb: VarBuilder) -> Result<Self> {
        let device = vb.device().clone();
        Ok(Self {
            sam: Sam::new_tiny(vb)?,
            label: "sam-tiny".to_string(),
            device,
            gate: Mutex::new(()),
        })
    }

    fn run(&self, image: &CxrImage, points: &[PointPrompt]) -> Result<Vec<Candidate>> {
        let (h, w) = image.dims();
        let longest = h.max(w);
        if longest == 0 || longest > IMAGE_SIZE {
            return Err(ModelError::Invalid(format!(
                "image {h}x{w} must have a side between 1 and {IMAGE_SIZE}"
            )));
        }
        let scale = IMAGE_SIZE as f64 / longest as f64;
        let sh = ((h as f64 * scale).round() as usize).clamp(1, IMAGE_SIZE);
        let sw = ((w as f64 * scale).round() as usize).clamp(1, IMAGE_SIZE);

        let rgb = image.to_rgb();
        let mut flat = Vec::with_capacity(3 * sh * sw);
        for c in 0..3 {
            let plane = rgb.index_axis(ndarray::Axis(2), c).mapv(f32::from);
            flat.extend(resize_bilinear(&plane, (sh, sw)).iter().copied());
        }
        let img = Tensor::from_vec(flat, (3, sh, sw), &self.device)?;

        // The prompt encoder scales by the frame size and adds the half-pixel offset itself.
        let wire: Vec<(f64, f64, bool)> = points
            .iter()
            .map(|p| (p.x * scale / sw as f64, p.y * scale / sh as f64, p.label == 1))
            .collect();

        let _guard = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        let emb = self.sam.embeddings(&img)?;
        let (low, iou) = self.sam.forward_for_embeddings(&emb, sh, sw, &wire, true)?;
        drop(_guard);

        let low = low.squeeze(0)?.to_dtype(DType::F32)?;
        let n = low.dim(0)?;
        let logits = low.flatten_all()?.to_vec1::<f32>()?;
        let scores = iou.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let plane = LOW_RES * LOW_RES;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let low = Array2::from_shape_vec((LOW_RES, LOW_RES), logits[i * plane..(i + 1) * plane].to_vec())
                .expect("low-res mask shape");
            let full = resize_bilinear(&low, (IMAGE_SIZE, IMAGE_SIZE));
            let cropped = full.slice(ndarray::s![..sh, ..sw]).to_owned();
            let native = resize_bilinear(&cropped, (h, w));
            out.push(Candidate {
                mask: BinaryMask::from_array(native.mapv(|v| v > 0.0)),
                score: scores[i],
            });
        }
        Ok(out)
    }
}

/// Identifies the encoder size from the patch-embedding width.
fn checkpoint_backbone(vb: &VarBuilder) -> Result<Option<BackboneId>> {
    if !vb.contains_tensor(PATCH_EMBED) {
        return Err(ksam_core::Error::Checkpoint(format!(
            "checkpoint has no {PATCH_EMBED}; not a Segment Anything state dict"
        ))
        .into());
    }
    let t = vb.get_unchecked(PATCH_EMBED)?;
    Ok(BackboneId::from_embed_dim(t.dim(0)?))
}

impl PromptableSegmenter for SamSegmenter {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, image: &CxrImage, points: &[PointPrompt]) -> ksam_core::Result<Vec<Candidate>> {
        Ok(self.run(image, points)?)
    }
}
