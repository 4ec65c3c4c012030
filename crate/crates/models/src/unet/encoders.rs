//! Classification backbones reused as U-Net encoders. Parameter names follow the common
//! ImageNet checkpoint layouts so released weights can be loaded by name.

use candle_core::{Module, ModuleT, Result, Tensor};
use candle_nn::{BatchNorm, Conv2d, VarBuilder};
use ksam_core::prelim::EncoderName;

use super::layers::{bn, cat_channels, conv, max_pool_3s2, ConvBn, SeparableConv};

/// Encoder activations at strides 2, 4, 8 and 16 plus the stride-32 bottleneck.
pub struct Features {
    pub skips: [Tensor; 4],
    pub head: Tensor,
}

pub(crate) fn scaled(channels: usize, divisor: usize) -> usize {
    (channels / divisor).max(1)
}

pub enum Encoder {
    Vgg(Vgg),
    Resnet(Resnet34),
    Densenet(Densenet169),
    Xception(Xception),
}

impl Encoder {
    pub fn new(name: EncoderName, divisor: usize, vb: VarBuilder) -> Result<Self> {
        Ok(match name {
            EncoderName::Vgg16 => Encoder::Vgg(Vgg::new(&VGG16, divisor, vb)?),
            EncoderName::Vgg19 => Encoder::Vgg(Vgg::new(&VGG19, divisor, vb)?),
            EncoderName::Resnet34 => Encoder::Resnet(Resnet34::new(divisor, vb)?),
            EncoderName::Densenet169 => Encoder::Densenet(Densenet169::new(divisor, vb)?),
            EncoderName::Xception => Encoder::Xception(Xception::new(divisor, vb)?),
        })
    }

    /// Channels of `skips` (strides 2..16) and of `head`.
    pub fn channels(name: EncoderName, divisor: usize) -> ([usize; 4], usize) {
        let full: [usize; 5] = match name {
            EncoderName::Vgg16 | EncoderName::Vgg19 => [128, 256, 512, 512, 512],
            EncoderName::Resnet34 => [64, 64, 128, 256, 512],
            EncoderName::Xception => [64, 128, 256, 728, 2048],
            EncoderName::Densenet169 => {
                let d = densenet_channels(divisor);
                return ([d[0], d[1], d[2], d[3]], d[4]);
            }
        };
        let s = full.map(|c| scaled(c, divisor));
        ([s[0], s[1], s[2], s[3]], s[4])
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Features> {
        match self {
            Encoder::Vgg(e) => e.forward(x),
            Encoder::Resnet(e) => e.forward_t(x, train),
            Encoder::Densenet(e) => e.forward_t(x, train),
            Encoder::Xception(e) => e.forward_t(x, train),
        }
    }
}

const M: usize = 0;
const VGG16: [usize; 18] = [
    64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512, 512, M,
];
const VGG19: [usize; 21] = [
    64, 64, M, 128, 128, M, 256, 256, 256, 256, M, 512, 512, 512, 512, M, 512, 512, 512, 512, M,
];

enum VggOp {
    Conv(Conv2d),
    Pool,
}

pub struct Vgg {
    ops: Vec<VggOp>,
}

impl Vgg {
    fn new(layout: &[usize], divisor: usize, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp("features");
        let mut ops = Vec::new();
        let mut cin = 3;
        let mut idx = 0;
        for &c in layout {
            if c == M {
                ops.push(VggOp::Pool);
                idx += 1;
            } else {
                let cout = scaled(c, divisor);
                ops.push(VggOp::Conv(conv(vb.pp(idx), cin, cout, 3, 1, 1, true)?));
                cin = cout;
                idx += 2;
            }
        }
        Ok(Self { ops })
    }

    fn forward(&self, x: &Tensor) -> Result<Features> {
        let mut x = x.clone();
        let mut taps = Vec::with_capacity(5);
        for op in &self.ops {
            match op {
                VggOp::Conv(c) => x = c.forward(&x)?.relu()?,
                VggOp::Pool => {
                    taps.push(x.clone());
                    x = x.max_pool2d(2)?;
                }
            }
        }
        // taps[0] is at stride 1 and is not used by the decoder.
        Ok(Features {
            skips: [taps[1].clone(), taps[2].clone(), taps[3].clone(), taps[4].clone()],
            head: x,
        })
    }
}

struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn new(vb: VarBuilder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some(ConvBn::new(
                vb.pp("downsample.0"),
                vb.pp("downsample.1"),
                cin,
                cout,
                1,
                stride,
                0,
            )?)
        } else {
            None
        };
        Ok(Self {
            a: ConvBn::new(vb.pp("conv1"), vb.pp("bn1"), cin, cout, 3, stride, 1)?,
            b: ConvBn::new(vb.pp("conv2"), vb.pp("bn2"), cout, cout, 3, 1, 1)?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.a.forward_t(x, train)?.relu()?;
        let y = self.b.forward_t(&y, train)?;
        let identity = match &self.downsample {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + identity)?.relu()
    }
}

pub struct Resnet34 {
    stem: ConvBn,
    layers: Vec<Vec<BasicBlock>>,
}

impl Resnet34 {
    fn new(divisor: usize, vb: VarBuilder) -> Result<Self> {
        let c64 = scaled(64, divisor);
        let stem = ConvBn::new(vb.pp("conv1"), vb.pp("bn1"), 3, c64, 7, 2, 3)?;
        let mut layers = Vec::new();
        let mut cin = c64;
        for (i, (&c, &n)) in [64, 128, 256, 512].iter().zip(&[3, 4, 6, 3]).enumerate() {
            let cout = scaled(c, divisor);
            let lvb = vb.pp(format!("layer{}", i + 1));
            let mut blocks = Vec::new();
            for j in 0..n {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(lvb.pp(j), cin, cout, stride)?);
                cin = cout;
            }
            layers.push(blocks);
        }
        Ok(Self { stem, layers })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Features> {
        let s2 = self.stem.forward_t(x, train)?.relu()?;
        let mut x = max_pool_3s2(&s2)?;
        let mut outs = Vec::with_capacity(4);
        for blocks in &self.layers {
            for b in blocks {
                x = b.forward_t(&x, train)?;
            }
            outs.push(x.clone());
        }
        Ok(Features {
            skips: [s2, outs[0].clone(), outs[1].clone(), outs[2].clone()],
            head: outs[3].clone(),
        })
    }
}

const DENSE_BLOCKS: [usize; 4] = [6, 12, 32, 32];

/// `[stride 2, 4, 8, 16, 32]` channels of the DenseNet-169 encoder.
fn densenet_channels(divisor: usize) -> [usize; 5] {
    let growth = scaled(32, divisor);
    let mut c = scaled(64, divisor);
    let mut out = [c, 0, 0, 0, 0];
    for (i, &n) in DENSE_BLOCKS.iter().enumerate() {
        c += n * growth;
        out[i + 1] = c;
        c /= 2;
    }
    out
}

struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv2d,
    norm2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.norm1.forward_t(x, train)?.relu()?;
        let y = self.conv1.forward(&y)?;
        let y = self.norm2.forward_t(&y, train)?.relu()?;
        let y = self.conv2.forward(&y)?;
        cat_channels(&[x, &y])
    }
}

struct Transition {
    norm: BatchNorm,
    conv: Conv2d,
}

pub struct Densenet169 {
    stem: ConvBn,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm,
}

impl Densenet169 {
    fn new(divisor: usize, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp("features");
        let growth = scaled(32, divisor);
        let bottleneck = 4 * growth;
        let mut c = scaled(64, divisor);
        let stem = ConvBn::new(vb.pp("conv0"), vb.pp("norm0"), 3, c, 7, 2, 3)?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in DENSE_BLOCKS.iter().enumerate() {
            let bvb = vb.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::new();
            for j in 0..n {
                let lvb = bvb.pp(format!("denselayer{}", j + 1));
                layers.push(DenseLayer {
                    norm1: bn(lvb.pp("norm1"), c)?,
                    conv1: conv(lvb.pp("conv1"), c, bottleneck, 1, 1, 0, false)?,
                    norm2: bn(lvb.pp("norm2"), bottleneck)?,
                    conv2: conv(lvb.pp("conv2"), bottleneck, growth, 3, 1, 1, false)?,
                });
                c += growth;
            }
            blocks.push(layers);
            if i < DENSE_BLOCKS.len() - 1 {
                let tvb = vb.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: bn(tvb.pp("norm"), c)?,
                    conv: conv(tvb.pp("conv"), c, c / 2, 1, 1, 0, false)?,
                });
                c /= 2;
            }
        }
        Ok(Self {
            stem,
            blocks,
            transitions,
            norm5: bn(vb.pp("norm5"), c)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Features> {
        let s2 = self.stem.forward_t(x, train)?.relu()?;
        let mut x = max_pool_3s2(&s2)?;
        let mut skips = vec![s2];
        for (i, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                x = l.forward_t(&x, train)?;
            }
            if let Some(t) = self.transitions.get(i) {
                let y = t.norm.forward_t(&x, train)?.relu()?;
                x = t.conv.forward(&y)?.avg_pool2d(2)?;
                skips.push(y);
            }
        }
        let head = self.norm5.forward_t(&x, train)?;
        Ok(Features {
            skips: [skips[0].clone(), skips[1].clone(), skips[2].clone(), skips[3].clone()],
            head,
        })
    }
}

enum RepOp {
    Relu,
    Sep(SeparableConv),
    Norm(BatchNorm),
    Pool,
}

struct XceptionBlock {
    rep: Vec<RepOp>,
    skip: Option<ConvBn>,
}

impl XceptionBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        vb: VarBuilder,
        cin: usize,
        cout: usize,
        reps: usize,
        stride: usize,
        start_with_relu: bool,
        grow_first: bool,
    ) -> Result<Self> {
        let skip = if cout != cin || stride != 1 {
            Some(ConvBn::new(vb.pp("skip"), vb.pp("skipbn"), cin, cout, 1, stride, 0)?)
        } else {
            None
        };
        // (in, out) of each separable conv in order.
        let mut convs = Vec::new();
        let mut filters = cin;
        if grow_first {
            convs.push((cin, cout));
            filters = cout;
        }
        for _ in 1..reps {
            convs.push((filters, filters));
        }
        if !grow_first {
            convs.push((cin, cout));
        }

        let rvb = vb.pp("rep");
        let mut rep = Vec::new();
        let mut idx = if start_with_relu { 0 } else { -1i64 };
        for (k, (a, b)) in convs.into_iter().enumerate() {
            if k > 0 || start_with_relu {
                rep.push(RepOp::Relu);
            }
            idx += 1;
            rep.push(RepOp::Sep(SeparableConv::new(rvb.pp(idx), a, b)?));
            idx += 1;
            rep.push(RepOp::Norm(bn(rvb.pp(idx), b)?));
            idx += 1;
        }
        if stride != 1 {
            rep.push(RepOp::Pool);
        }
        Ok(Self { rep, skip })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for op in &self.rep {
            y = match op {
                RepOp::Relu => y.relu()?,
                RepOp::Sep(s) => s.forward(&y)?,
                RepOp::Norm(n) => n.forward_t(&y, train)?,
                RepOp::Pool => max_pool_3s2(&y)?,
            };
        }
        let skip = match &self.skip {
            Some(s) => s.forward_t(x, train)?,
            None => x.clone(),
        };
        y + skip
    }
}

pub struct Xception {
    conv1: ConvBn,
    conv2: ConvBn,
    blocks: Vec<XceptionBlock>,
    conv3: SeparableConv,
    bn3: BatchNorm,
    conv4: SeparableConv,
    bn4: BatchNorm,
}

impl Xception {
    fn new(divisor: usize, vb: VarBuilder) -> Result<Self> {
        let s = |c| scaled(c, divisor);
        let conv1 = ConvBn::new(vb.pp("conv1"), vb.pp("bn1"), 3, s(32), 3, 2, 1)?;
        let conv2 = ConvBn::new(vb.pp("conv2"), vb.pp("bn2"), s(32), s(64), 3, 1, 1)?;
        let mut blocks = Vec::new();
        let mut add = |i: usize, cin, cout, reps, stride, relu, grow| -> Result<()> {
            blocks.push(XceptionBlock::new(
                vb.pp(format!("block{i}")),
                s(cin),
                s(cout),
                reps,
                stride,
                relu,
                grow,
            )?);
            Ok(())
        };
        add(1, 64, 128, 2, 2, false, true)?;
        add(2, 128, 256, 2, 2, true, true)?;
        add(3, 256, 728, 2, 2, true, true)?;
        for i in 4..=11 {
            add(i, 728, 728, 3, 1, true, true)?;
        }
        add(12, 728, 1024, 2, 2, true, false)?;
        Ok(Self {
            conv1,
            conv2,
            blocks,
            conv3: SeparableConv::new(vb.pp("conv3"), s(1024), s(1536))?,
            bn3: bn(vb.pp("bn3"), s(1536))?,
            conv4: SeparableConv::new(vb.pp("conv4"), s(1536), s(2048))?,
            bn4: bn(vb.pp("bn4"), s(2048))?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Features> {
        let x = self.conv1.forward_t(x, train)?.relu()?;
        let s2 = self.conv2.forward_t(&x, train)?.relu()?;
        let s4 = self.blocks[0].forward_t(&s2, train)?;
        let s8 = self.blocks[1].forward_t(&s4, train)?;
        let mut x = self.blocks[2].forward_t(&s8, train)?;
        for b in &self.blocks[3..10] {
            x = b.forward_t(&x, train)?;
        }
        let s16 = self.blocks[10].forward_t(&x, train)?;
        let x = self.blocks[11].forward_t(&s16, train)?;
        let x = self.bn3.forward_t(&self.conv3.forward(&x)?, train)?.relu()?;
        let head = self.bn4.forward_t(&self.conv4.forward(&x)?, train)?.relu()?;
        Ok(Features {
            skips: [s2, s4, s8, s16],
            head,
        })
    }
}
