//! Trained coarse segmenter: a U-Net plus its metadata, training loop and persistence.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use ksam_core::dataset::{ProcessedSample, MODEL_DIMS};
use ksam_core::grid::BinaryMask;
use ksam_core::metrics::{confusion, dice};
use ksam_core::prelim::{
    binarize, EarlyStopping, EncoderSpec, EpochRecord, MaskPredictor, ModelMeta, StopDecision,
    Target, TrainConfig,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::unet::{self, layers, Unet, ENCODER_PREFIX};

pub const WEIGHTS_FILE: &str = "model.safetensors";
const PREDICT_BATCH: usize = 8;

pub struct CoarseModel {
    net: Unet,
    varmap: VarMap,
    meta: ModelMeta,
    device: Device,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// 1 builds the standard channel widths; larger values shrink every layer.
    pub width_divisor: usize,
    /// ImageNet encoder weights; required when the encoder spec asks for pretraining.
    pub pretrained_weights: Option<std::path::PathBuf>,
}

impl CoarseModel {
    /// Fresh, untrained network.
    pub fn new(encoder: EncoderSpec, config: &TrainConfig, width_divisor: usize) -> Result<Self> {
        let device = Device::Cpu;
        let (net, varmap) = unet::build_seeded(encoder.name, width_divisor, config.seed, &device)?;
        Ok(Self {
            net,
            varmap,
            meta: ModelMeta {
                encoder,
                target: config.target,
                seed: config.seed,
                input_dims: MODEL_DIMS,
                history: Vec::new(),
                best_epoch: None,
                config: config.clone(),
                width_divisor,
            },
            device,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let meta = ModelMeta::load(run_dir)?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let net = Unet::new(meta.encoder.name, meta.width_divisor, vb)?;
        let mut varmap = varmap;
        let weights = run_dir.join(WEIGHTS_FILE);
        varmap.load(&weights).map_err(|e| {
            ModelError::Invalid(format!("loading {}: {e}", weights.display()))
        })?;
        Ok(Self {
            net,
            varmap,
            meta,
            device,
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir).map_err(|source| ModelError::Io {
            path: run_dir.to_path_buf(),
            source,
        })?;
        self.varmap.save(run_dir.join(WEIGHTS_FILE))?;
        self.meta.save(run_dir)?;
        Ok(())
    }

    /// Copies encoder tensors from a safetensors file. Keys may carry the `encoder.` prefix
    /// or use the bare backbone names. Returns the number of tensors copied.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| ModelError::Pretrained(format!("{}: {e}", path.display())))?;
        let prefix = format!("{ENCODER_PREFIX}.");
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut copied = 0;
        let mut missing = Vec::new();
        for (name, var) in data.iter().filter(|(k, _)| k.starts_with(&prefix)) {
            let bare = &name[prefix.len()..];
            let Some(t) = tensors.get(name).or_else(|| tensors.get(bare)) else {
                missing.push(bare.to_string());
                continue;
            };
            if t.dims() != var.dims() {
                return Err(ModelError::Pretrained(format!(
                    "{bare}: checkpoint shape {:?}, network expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
            copied += 1;
        }
        if copied == 0 {
            return Err(ModelError::Pretrained(format!(
                "{} has no tensors for the {} encoder",
                path.display(),
                self.meta.encoder.name
            )));
        }
        if !missing.is_empty() {
            missing.sort();
            return Err(ModelError::Pretrained(format!(
                "{} lacks {} encoder tensors, e.g. {}",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        Ok(copied)
    }

    fn batch_tensor(&self, grays: &[&Array2<f32>]) -> Result<Tensor> {
        let (h, w) = MODEL_DIMS;
        let mut flat = Vec::with_capacity(grays.len() * h * w);
        for g in grays {
            if g.dim() != MODEL_DIMS {
                return Err(ksam_core::Error::DimensionMismatch {
                    expected: MODEL_DIMS,
                    actual: g.dim(),
                }
                .into());
            }
            flat.extend(g.iter().copied());
        }
        Ok(Tensor::from_vec(flat, (grays.len(), 1, h, w), &self.device)?)
    }

    /// Foreground probabilities for a batch of `MODEL_DIMS` grids.
    pub fn predict_batch(&self, grays: &[&Array2<f32>]) -> Result<Vec<Array2<f32>>> {
        let mut out = Vec::with_capacity(grays.len());
        for chunk in grays.chunks(PREDICT_BATCH) {
            let x = self.batch_tensor(chunk)?;
            let p = candle_nn::ops::sigmoid(&self.net.forward_t(&x, false)?)?;
            let (b, _, h, w) = p.dims4()?;
            let flat = p.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..b {
                let slice = flat[i * h * w..(i + 1) * h * w].to_vec();
                out.push(Array2::from_shape_vec((h, w), slice).expect("shape matches"));
            }
        }
        Ok(out)
    }

    fn mean_dice(&self, samples: &[&ProcessedSample]) -> Result<f64> {
        let grays: Vec<&Array2<f32>> = samples.iter().map(|s| &s.gray).collect();
        let probs = self.predict_batch(&grays)?;
        let mut total = 0.0;
        for (s, p) in samples.iter().zip(&probs) {
            let gt = target_mask(s, self.meta.target).expect("checked before training");
            total += dice(&confusion(&binarize(p, 0.5), gt)?).value;
        }
        Ok(total / samples.len() as f64)
    }
}

impl MaskPredictor for CoarseModel {
    fn input_dims(&self) -> (usize, usize) {
        self.meta.input_dims
    }

    fn predict(&self, gray: &Array2<f32>) -> ksam_core::Result<Array2<f32>> {
        self.check_input(gray)?;
        let mut out = self.predict_batch(&[gray])?;
        Ok(out.pop().expect("one input, one output"))
    }
}

fn target_mask(sample: &ProcessedSample, target: Target) -> Option<&BinaryMask> {
    match target {
        Target::Lung => Some(&sample.lung_mask_small),
        Target::Heart => sample.heart_mask_small.as_ref(),
    }
}

fn check_targets(samples: &[&ProcessedSample], target: Target) -> Result<()> {
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| target_mask(s, target).is_none())
        .map(|s| s.source_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ModelError::MissingHeartMasks(missing))
    }
}

/// Trains with AdamW on `0.5 * (BCE + soft Dice)`, early-stops on validation Dice and
/// returns the model holding the best epoch's weights.
pub fn train_model(
    train: &[ProcessedSample],
    val: &[ProcessedSample],
    encoder: EncoderSpec,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<CoarseModel> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Invalid(format!(
            "need training and validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let train: Vec<&ProcessedSample> = train.iter().collect();
    let val: Vec<&ProcessedSample> = val.iter().collect();
    check_targets(&train, config.target)?;
    check_targets(&val, config.target)?;

    let divisor = options.width_divisor.max(1);
    let mut model = CoarseModel::new(encoder, config, divisor)?;
    match (&options.pretrained_weights, encoder.pretrained) {
        (Some(path), _) => {
            let n = model.load_encoder_weights(path)?;
            tracing::info!(tensors = n, path = %path.display(), "loaded encoder weights");
        }
        (None, true) => {
            return Err(ModelError::Pretrained(format!(
                "the {} encoder is marked pretrained but no weights file was given; pass one \
                 or train from scratch",
                encoder.name
            )))
        }
        (None, false) => {}
    }

    let params = ParamsAdamW {
        lr: config.learning_rate,
        ..Default::default()
    };
    let mut opt = AdamW::new(unet::trainable(&model.varmap), params)?;
    let mut stopper = EarlyStopping::new(config);
    let mut best = unet::snapshot(&model.varmap)?;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let grays: Vec<&Array2<f32>> = chunk.iter().map(|&i| &train[i].gray).collect();
            let masks: Vec<Array2<f32>> = chunk
                .iter()
                .map(|&i| target_mask(train[i], config.target).expect("checked").to_f32())
                .collect();
            let x = model.batch_tensor(&grays)?;
            let y = model.batch_tensor(&masks.iter().collect::<Vec<_>>())?;
            let logits = model.net.forward_t(&x, true)?;
            let loss = ((layers::bce_with_logits(&logits, &y)?
                + layers::soft_dice_loss(&logits, &y)?)?
                * 0.5)?;
            opt.backward_step(&loss)?;
            loss_sum += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        let val_dice = model.mean_dice(&val)?;
        let train_loss = loss_sum / batches as f64;
        tracing::info!(epoch, train_loss, val_dice, "epoch done");
        model.meta.history.push(EpochRecord {
            epoch,
            train_loss,
            val_dice,
        });
        let decision = stopper.observe(val_dice);
        let (StopDecision::Continue { improved } | StopDecision::Stop { improved }) = decision;
        if improved {
            best = unet::snapshot(&model.varmap)?;
        }
        if matches!(decision, StopDecision::Stop { .. }) {
            break;
        }
    }
    unet::restore(&model.varmap, &best)?;
    model.meta.best_epoch = stopper.best_epoch();
    Ok(model)
}
