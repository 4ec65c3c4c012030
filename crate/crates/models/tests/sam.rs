use candle_core::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use ksam_core::grid::CxrImage;
use ksam_core::segmenter::{BackboneId, PointPrompt, PromptableSegmenter};
use ksam_models::SamSegmenter;
use ndarray::Array2;

fn tiny() -> SamSegmenter {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    SamSegmenter::tiny(vb).unwrap()
}

fn image(rows: usize, cols: usize) -> CxrImage {
    CxrImage::from_gray(&Array2::from_shape_fn((rows, cols), |(r, c)| ((r + 2 * c) % 256) as u8))
}

fn points() -> Vec<PointPrompt> {
    vec![
        PointPrompt { x: 10.0, y: 20.0, label: 1 },
        PointPrompt { x: 40.0, y: 20.0, label: 1 },
        PointPrompt { x: 2.0, y: 2.0, label: 0 },
    ]
}

#[test]
fn candidates_come_back_at_native_resolution_and_repeat_exactly() {
    let sam = tiny();
    assert_eq!(sam.name(), "sam-tiny");
    let img = image(48, 64);
    let first = sam.predict(&img, &points()).unwrap();
    assert_eq!(first.len(), 3);
    assert!(first.iter().all(|c| c.mask.dims() == (48, 64) && c.score.is_finite()));
    let second = sam.predict(&img, &points()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn oversized_images_are_refused() {
    assert!(tiny().predict(&image(1100, 20), &points()).is_err());
}

#[test]
fn checkpoint_without_sam_tensors_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("not_sam.safetensors");
    let t = candle_core::Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap();
    candle_core::safetensors::save(&std::collections::HashMap::from([("w".to_string(), t)]), &path).unwrap();
    let err = SamSegmenter::load(&path, BackboneId::VitL).err().unwrap();
    assert!(err.to_string().contains("not a Segment Anything"), "{err}");
}

#[test]
fn checkpoint_of_another_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vit_b_like.safetensors");
    let t = candle_core::Tensor::zeros((768, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
    let tensors = std::collections::HashMap::from([("image_encoder.patch_embed.proj.weight".to_string(), t)]);
    candle_core::safetensors::save(&tensors, &path).unwrap();
    let err = SamSegmenter::load(&path, BackboneId::VitH).err().unwrap();
    assert!(err.to_string().contains("vit_b") && err.to_string().contains("vit_h"), "{err}");
}
