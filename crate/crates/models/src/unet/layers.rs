use candle_core::{Module, ModuleT, Result, Tensor, D};
use candle_nn::{BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, VarBuilder};

pub(crate) fn conv(
    vb: VarBuilder,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    if bias {
        candle_nn::conv2d(cin, cout, kernel, cfg, vb)
    } else {
        candle_nn::conv2d_no_bias(cin, cout, kernel, cfg, vb)
    }
}

pub(crate) fn bn(vb: VarBuilder, channels: usize) -> Result<BatchNorm> {
    let cfg = BatchNormConfig {
        eps: 1e-5,
        remove_mean: true,
        affine: true,
        momentum: 0.1,
    };
    candle_nn::batch_norm(channels, cfg, vb)
}

/// Convolution without bias followed by batch norm.
pub(crate) struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    /// `conv_vb` and `bn_vb` name the two parameter groups separately since the
    /// checkpoint layouts differ between encoders.
    pub(crate) fn new(
        conv_vb: VarBuilder,
        bn_vb: VarBuilder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv(conv_vb, cin, cout, kernel, stride, padding, false)?,
            bn: bn(bn_vb, cout)?,
        })
    }

    pub(crate) fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

/// 3x3 depthwise convolution, stride 1, zero padding 1, no bias.
pub(crate) struct Depthwise3 {
    weight: Tensor,
    channels: usize,
}

impl Depthwise3 {
    pub(crate) fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        let weight = vb.get_with_hints(
            (channels, 1, 3, 3),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        Ok(Self { weight, channels })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut out: Option<Tensor> = None;
        for a in 0..3 {
            for b in 0..3 {
                let tap = self
                    .weight
                    .narrow(2, a, 1)?
                    .narrow(3, b, 1)?
                    .reshape((1, self.channels, 1, 1))?;
                let term = padded.narrow(2, a, h)?.narrow(3, b, w)?.broadcast_mul(&tap)?;
                out = Some(match out {
                    None => term,
                    Some(acc) => (acc + term)?,
                });
            }
        }
        Ok(out.expect("nine taps"))
    }
}

/// Depthwise 3x3 then pointwise 1x1.
pub(crate) struct SeparableConv {
    depthwise: Depthwise3,
    pointwise: Conv2d,
}

impl SeparableConv {
    pub(crate) fn new(vb: VarBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            depthwise: Depthwise3::new(vb.pp("conv1"), cin)?,
            pointwise: conv(vb.pp("pointwise"), cin, cout, 1, 1, 0, false)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

/// 3x3 max pool, stride 2, padding 1. Edge replication stands in for `-inf` padding: a
/// replicated border value never exceeds the window maximum it already belongs to.
/// 3x3 stride-2 max pool with padding 1, built from shifted strided views so it
/// has a gradient (candle's pool op only backpropagates when kernel == stride).
pub(crate) fn max_pool_3s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    // One extra replicated row/column so every shifted view spans 2*out entries.
    let p = x.pad_with_same(2, 1, 2)?.pad_with_same(3, 1, 2)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = p
            .narrow(2, dy, 2 * ho)?
            .reshape((b, c, ho, 2, w + 3))?
            .narrow(3, 0, 1)?
            .squeeze(3)?;
        for dx in 0..3 {
            let v = rows
                .narrow(3, dx, 2 * wo)?
                .reshape((b, c, ho, wo, 2))?
                .narrow(4, 0, 1)?
                .squeeze(4)?;
            out = Some(match out {
                None => v,
                Some(m) => m.maximum(&v)?,
            });
        }
    }
    Ok(out.expect("nine views"))
}

pub(crate) fn cat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    Tensor::cat(parts, 1)
}

/// Numerically stable mean binary cross-entropy on logits.
pub(crate) fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    (logits.relu()? - logits.mul(target)? + softplus)?.mean_all()
}

/// Mean over the batch of `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)`.
pub(crate) fn soft_dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let p = candle_nn::ops::sigmoid(logits)?.reshape((b, ()))?;
    let t = target.reshape((b, ()))?;
    let inter = p.mul(&t)?.sum(D::Minus1)?;
    let denom = (p.sum(D::Minus1)? + t.sum(D::Minus1)?)?;
    let ratio = ((inter * 2.0)? + 1.0)?.div(&(denom + 1.0)?)?;
    ratio.neg()?.affine(1.0, 1.0)?.mean_all()
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;

    #[test]
    fn pool_matches_candle_and_has_a_gradient() {
        for (h, w) in [(8, 8), (7, 10), (1, 3)] {
            let vals: Vec<f32> = (0..2 * h * w).map(|i| ((i * 53) % 17) as f32 - 8.0).collect();
            let x = Var::from_vec(vals, (1, 2, h, w), &Device::Cpu).unwrap();
            let ours = max_pool_3s2(&x).unwrap();
            let reference = x
                .pad_with_same(2, 1, 1)
                .unwrap()
                .pad_with_same(3, 1, 1)
                .unwrap()
                .max_pool2d_with_stride(3, 2)
                .unwrap();
            assert_eq!(
                ours.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                reference.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                "{h}x{w}"
            );
            let grads = ours.sum_all().unwrap().backward().unwrap();
            assert!(grads.get(&x).is_some());
        }
    }
}
