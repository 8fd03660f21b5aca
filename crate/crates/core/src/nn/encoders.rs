use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, conv2d, conv2d_no_bias, linear, BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Image (or flat vector) to embedding.
pub trait Encoder: Send + Sync {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor>;
    fn out_dim(&self) -> usize;
}

/// Architecture selector, used by configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderKind {
    Mlp {
        hidden: usize,
        depth: usize,
        out: usize,
    },
    Conv {
        out: usize,
    },
    #[serde(rename = "resnet")]
    ResNet {
        width: usize,
    },
}

impl EncoderKind {
    pub fn build(&self, in_shape: (usize, usize, usize), vb: VarBuilder) -> Result<Box<dyn Encoder>> {
        Ok(match *self {
            EncoderKind::Mlp { hidden, depth, out } => {
                let d = in_shape.0 * in_shape.1 * in_shape.2;
                Box::new(MlpEncoder::new(d, hidden, depth, out, vb)?)
            }
            EncoderKind::Conv { out } => Box::new(ConvEncoder::new(in_shape.0, out, vb)?),
            EncoderKind::ResNet { width } => Box::new(ResNetEncoder::new(in_shape.0, width, vb)?),
        })
    }
}

pub struct MlpEncoder {
    layers: Vec<Linear>,
    out: usize,
}

impl MlpEncoder {
    /// `depth` hidden layers of width `hidden`, then a linear head of size `out`.
    /// `depth == 0` gives a purely linear encoder.
    pub fn new(input: usize, hidden: usize, depth: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = input;
        for i in 0..depth {
            layers.push(linear(width, hidden, vb.pp(format!("l{i}")))?);
            width = hidden;
        }
        layers.push(linear(width, out, vb.pp("head"))?);
        Ok(Self { layers, out })
    }
}

impl Encoder for MlpEncoder {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut h = x.flatten_from(1)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn out_dim(&self) -> usize {
        self.out
    }
}

/// Three stride-2 convolutions, global average pooling and a two-layer
/// projection head.
pub struct ConvEncoder {
    convs: Vec<Conv2d>,
    proj1: Linear,
    proj2: Linear,
    out: usize,
}

impl ConvEncoder {
    pub fn new(in_channels: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let widths = [in_channels, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| conv2d(w[0], w[1], 3, cfg, vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { convs, proj1: linear(64, out, vb.pp("proj1"))?, proj2: linear(out, out, vb.pp("proj2"))?, out })
    }
}

impl Encoder for ConvEncoder {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        let h = h.mean((2, 3))?;
        Ok(self.proj2.forward(&self.proj1.forward(&h)?.relu()?)?)
    }

    fn out_dim(&self) -> usize {
        self.out
    }
}

struct BasicBlock {
    c1: Conv2d,
    b1: BatchNorm,
    c2: Conv2d,
    b2: BatchNorm,
}

impl BasicBlock {
    fn new(ch: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, ..Default::default() };
        Ok(Self {
            c1: conv2d_no_bias(ch, ch, 3, cfg, vb.pp("c1"))?,
            b1: batch_norm(ch, 1e-5, vb.pp("b1"))?,
            c2: conv2d_no_bias(ch, ch, 3, cfg, vb.pp("c2"))?,
            b2: batch_norm(ch, 1e-5, vb.pp("b2"))?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.b1.forward_t(&self.c1.forward(x)?, train)?.relu()?;
        let h = self.b2.forward_t(&self.c2.forward(&h)?, train)?;
        Ok((h + x)?.relu()?)
    }
}

struct Down {
    conv: Conv2d,
    bn: BatchNorm,
}

impl Down {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        Ok(Self { conv: conv2d_no_bias(cin, cout, 3, cfg, vb.pp("conv"))?, bn: batch_norm(cout, 1e-5, vb.pp("bn"))? })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Small residual backbone for 32x32 inputs: a stride-2 stem, then two
/// residual stages separated by stride-2 downsampling, global average pooling.
/// Output dimension is `4 * width`.
pub struct ResNetEncoder {
    stem: Down,
    block1: BasicBlock,
    down2: Down,
    block2: BasicBlock,
    down3: Down,
    block3: BasicBlock,
    out: usize,
}

impl ResNetEncoder {
    pub fn new(in_channels: usize, width: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            stem: Down::new(in_channels, width, vb.pp("stem"))?,
            block1: BasicBlock::new(width, vb.pp("block1"))?,
            down2: Down::new(width, 2 * width, vb.pp("down2"))?,
            block2: BasicBlock::new(2 * width, vb.pp("block2"))?,
            down3: Down::new(2 * width, 4 * width, vb.pp("down3"))?,
            block3: BasicBlock::new(4 * width, vb.pp("block3"))?,
            out: 4 * width,
        })
    }
}

impl Encoder for ResNetEncoder {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.stem.forward_t(x, train)?;
        let h = self.block1.forward_t(&h, train)?;
        let h = self.down2.forward_t(&h, train)?;
        let h = self.block2.forward_t(&h, train)?;
        let h = self.down3.forward_t(&h, train)?;
        let h = self.block3.forward_t(&h, train)?;
        Ok(h.mean((2, 3))?)
    }

    fn out_dim(&self) -> usize {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use candle_core::Device;

    #[test]
    fn encoders_produce_declared_dims() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::zeros((2, 3, 32, 32), candle_core::DType::F32, &dev)?;
        for kind in [
            EncoderKind::Mlp { hidden: 8, depth: 2, out: 5 },
            EncoderKind::Conv { out: 128 },
            EncoderKind::ResNet { width: 4 },
        ] {
            let p = Params::new(&dev);
            let enc = kind.build((3, 32, 32), p.vb())?;
            p.init(0)?;
            let e = enc.forward_t(&x, true)?;
            assert_eq!(e.dims(), &[2, enc.out_dim()]);
        }
        Ok(())
    }
}
