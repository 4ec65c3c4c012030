//! U-Net with a pluggable ImageNet-style encoder.

mod encoders;
pub(crate) mod layers;

use candle_core::{DType, Device, Module, Result, Tensor, Var};
use candle_nn::{Conv2d, VarBuilder, VarMap};
use ksam_core::prelim::EncoderName;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use encoders::{Encoder, Features};

use encoders::scaled;
use layers::{cat_channels, conv, ConvBn};

pub const DECODER_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];
pub const ENCODER_PREFIX: &str = "encoder";

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

struct DecoderBlock {
    a: ConvBn,
    b: ConvBn,
}

impl DecoderBlock {
    fn forward_t(&self, x: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let x = x.upsample_nearest2d(2 * h, 2 * w)?;
        let x = match skip {
            Some(s) => cat_channels(&[&x, s])?,
            None => x,
        };
        let x = self.a.forward_t(&x, train)?.relu()?;
        self.b.forward_t(&x, train)?.relu()
    }
}

pub struct Unet {
    encoder: Encoder,
    blocks: Vec<DecoderBlock>,
    head: Conv2d,
}

impl Unet {
    pub fn new(name: EncoderName, divisor: usize, vb: VarBuilder) -> Result<Self> {
        if divisor == 0 {
            candle_core::bail!("width divisor must be at least 1");
        }
        let encoder = Encoder::new(name, divisor, vb.pp(ENCODER_PREFIX))?;
        let (skips, head_ch) = Encoder::channels(name, divisor);
        let dvb = vb.pp("decoder.blocks");
        let mut blocks = Vec::new();
        let mut cin = head_ch;
        for (i, &c) in DECODER_CHANNELS.iter().enumerate() {
            let cout = scaled(c, divisor);
            let skip_ch = if i < 4 { skips[3 - i] } else { 0 };
            let bvb = dvb.pp(i);
            blocks.push(DecoderBlock {
                a: ConvBn::new(bvb.pp("conv1.0"), bvb.pp("conv1.1"), cin + skip_ch, cout, 3, 1, 1)?,
                b: ConvBn::new(bvb.pp("conv2.0"), bvb.pp("conv2.1"), cout, cout, 3, 1, 1)?,
            });
            cin = cout;
        }
        let head = conv(vb.pp("segmentation_head.0"), cin, 1, 3, 1, 1, true)?;
        Ok(Self {
            encoder,
            blocks,
            head,
        })
    }

    /// Gray `(B, 1, H, W)` in `[0, 1]` to logits `(B, 1, H, W)`. `H` and `W` must be
    /// multiples of 32.
    pub fn forward_t(&self, gray: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = gray.dims4()?;
        if c != 1 || h % 32 != 0 || w % 32 != 0 {
            candle_core::bail!("expected (B, 1, H, W) with H, W multiples of 32, got {:?}", gray.dims());
        }
        let x = imagenet_input(gray)?;
        let f = self.encoder.forward_t(&x, train)?;
        let mut x = f.head;
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = if i < 4 { Some(&f.skips[3 - i]) } else { None };
            x = block.forward_t(&x, skip, train)?;
        }
        self.head.forward(&x)
    }

    pub fn encode(&self, gray: &Tensor) -> Result<Features> {
        self.encoder.forward_t(&imagenet_input(gray)?, false)
    }
}

/// Replicates the gray channel three times and applies ImageNet normalisation.
fn imagenet_input(gray: &Tensor) -> Result<Tensor> {
    let channels = (0..3)
        .map(|c| {
            gray.affine(
                1.0 / IMAGENET_STD[c] as f64,
                -(IMAGENET_MEAN[c] / IMAGENET_STD[c]) as f64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat(&channels, 1)
}

/// Builds a network whose convolution weights come from a seeded generator: He-uniform
/// kernels, zero biases, unit BN scale and the usual running statistics.
pub fn build_seeded(
    name: EncoderName,
    divisor: usize,
    seed: u64,
    device: &Device,
) -> Result<(Unet, VarMap)> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
    let net = Unet::new(name, divisor, vb)?;
    reseed(&varmap, seed)?;
    Ok((net, varmap))
}

fn reseed(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        if dims.len() == 4 {
            let fan_in = dims[1] * dims[2] * dims[3];
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let n: usize = dims.iter().product();
            let values: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            var.set(&Tensor::from_vec(values, dims, var.device())?)?;
        } else if name.ends_with(".bias") || name.ends_with("running_mean") {
            var.set(&var.zeros_like()?)?;
        } else {
            var.set(&var.ones_like()?)?;
        }
    }
    Ok(())
}

/// Copies of every variable's current value, keyed by name.
pub(crate) fn snapshot(varmap: &VarMap) -> Result<Vec<(String, Tensor)>> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut out = data
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub(crate) fn restore(varmap: &VarMap, values: &[(String, Tensor)]) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    for (k, t) in values {
        if let Some(v) = data.get(k) {
            v.set(t)?;
        }
    }
    Ok(())
}

pub(crate) fn trainable(varmap: &VarMap) -> Vec<Var> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut vars: Vec<(&String, &Var)> = data
        .iter()
        .filter(|(k, _)| !k.ends_with("running_mean") && !k.ends_with("running_var"))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(b.0));
    vars.into_iter().map(|(_, v)| v.clone()).collect()
}
