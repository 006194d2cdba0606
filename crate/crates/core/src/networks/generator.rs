//! Residual encoder-decoder image generator with feature taps.
//!
//! The encoder is a flat sequence of atomic operations. Layer index `k`
//! names the output of the k-th operation (1-based); index 0 is the input
//! image itself. With two downsampling stages the sequence is
//!
//! ```text
//!  1 pad   2 conv7   3 norm   4 relu
//!  5 conv  6 norm    7 relu   8 pool      (stage 1, width -> 2·width)
//!  9 conv 10 norm   11 relu  12 pool      (stage 2)
//! 13.. residual blocks, one index each
//! ```
//!
//! so the full-scale tap list `[1, 5, 9, 13, 17]` selects the padded input,
//! both stage convolutions and residual blocks 1 and 5.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{normalize, replicate_pad, Conv2d, ConvTranspose2d, NormKind};
use super::params::ParamBuilder;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels after the first convolution; doubled by each stage.
    pub width: usize,
    pub n_down: usize,
    pub n_blocks: usize,
    /// Kernel of the first and last convolutions (odd).
    pub edge_kernel: usize,
    pub norm: NormKind,
    /// Strictly increasing encoder layer indices exposed as feature taps.
    pub tap_layers: Vec<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl GeneratorSpec {
    /// Nine-block, 64-wide generator tapped at layers 1, 5, 9, 13, 17.
    pub fn full_scale() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            width: 64,
            n_down: 2,
            n_blocks: 9,
            edge_kernel: 7,
            norm: NormKind::Instance,
            tap_layers: vec![1, 5, 9, 13, 17],
        }
    }

    /// Desk-scale generator: width 16, two residual blocks, taps at
    /// the padded input, both stage convolutions and the first block.
    pub fn toy() -> Self {
        Self {
            width: 16,
            n_blocks: 2,
            tap_layers: vec![1, 5, 9, 13],
            ..Self::full_scale()
        }
    }

    /// Number of atomic encoder operations.
    pub fn encoder_len(&self) -> usize {
        4 + 4 * self.n_down + self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 {
            return Err(invalid!("generator channels must be positive"));
        }
        if self.edge_kernel % 2 == 0 {
            return Err(invalid!("edge_kernel must be odd, got {}", self.edge_kernel));
        }
        if self.tap_layers.is_empty() {
            return Err(invalid!("at least one tap layer is required"));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!(
                "tap_layers must be strictly increasing, got {:?}",
                self.tap_layers
            ));
        }
        let last = *self.tap_layers.last().unwrap();
        if last > self.encoder_len() {
            return Err(invalid!(
                "tap layer {last} exceeds encoder length {}",
                self.encoder_len()
            ));
        }
        Ok(())
    }

    /// Channel count of the output of encoder layer `layer` (0 = input).
    pub fn layer_channels(&self, layer: usize) -> usize {
        if layer <= 1 {
            return self.in_channels;
        }
        if layer <= 4 {
            return self.width;
        }
        let stage_layer = layer - 5;
        if stage_layer < 4 * self.n_down {
            return self.width << (stage_layer / 4 + 1);
        }
        self.width << self.n_down
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.tap_layers.iter().map(|&l| self.layer_channels(l)).collect()
    }
}

/// Feature map captured at one encoder layer, `[B, C, h, w]`.
#[derive(Debug, Clone)]
pub struct FeatureTap {
    pub layer: usize,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    norm: NormKind,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, ch: usize, norm: NormKind) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), ch, ch, 3, 1, 0)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), ch, ch, 3, 1, 0)?,
            norm,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&replicate_pad(x, 1)?)?;
        let h = normalize(&h, self.norm)?.relu()?;
        let h = self.conv2.forward(&replicate_pad(&h, 1)?)?;
        let h = normalize(&h, self.norm)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
enum EncoderOp {
    Pad(usize),
    Conv(Conv2d),
    Norm(NormKind),
    Relu,
    Pool,
    Res(ResBlock),
}

impl EncoderOp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            EncoderOp::Pad(p) => replicate_pad(x, *p),
            EncoderOp::Conv(c) => c.forward(x),
            EncoderOp::Norm(k) => normalize(x, *k),
            EncoderOp::Relu => Ok(x.relu()?),
            EncoderOp::Pool => Ok(x.avg_pool2d(2)?),
            EncoderOp::Res(r) => r.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    conv: ConvTranspose2d,
    norm: NormKind,
}

#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    encoder: Vec<EncoderOp>,
    up: Vec<UpStage>,
    out_conv: Conv2d,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, pb: &mut ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let pad = spec.edge_kernel / 2;
        let mut encoder = vec![
            EncoderOp::Pad(pad),
            EncoderOp::Conv(Conv2d::new(
                &mut pb.pp("enc.conv_in"),
                spec.in_channels,
                spec.width,
                spec.edge_kernel,
                1,
                0,
            )?),
            EncoderOp::Norm(spec.norm),
            EncoderOp::Relu,
        ];
        let mut ch = spec.width;
        for i in 0..spec.n_down {
            let conv = Conv2d::new(&mut pb.pp(format!("enc.down{i}")), ch, ch * 2, 3, 1, 1)?;
            encoder.extend([
                EncoderOp::Conv(conv),
                EncoderOp::Norm(spec.norm),
                EncoderOp::Relu,
                EncoderOp::Pool,
            ]);
            ch *= 2;
        }
        for i in 0..spec.n_blocks {
            encoder.push(EncoderOp::Res(ResBlock::new(
                &mut pb.pp(format!("enc.res{i}")),
                ch,
                spec.norm,
            )?));
        }
        debug_assert_eq!(encoder.len(), spec.encoder_len());

        let mut up = Vec::with_capacity(spec.n_down);
        for i in 0..spec.n_down {
            up.push(UpStage {
                conv: ConvTranspose2d::new(&mut pb.pp(format!("dec.up{i}")), ch, ch / 2, 4, 2, 1)?,
                norm: spec.norm,
            });
            ch /= 2;
        }
        let out_conv = Conv2d::new(
            &mut pb.pp("dec.conv_out"),
            ch,
            spec.out_channels,
            spec.edge_kernel,
            1,
            0,
        )?;
        Ok(Self {
            spec: spec.clone(),
            encoder,
            up,
            out_conv,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| invalid!("generator input must be [B, C, H, W], got {:?}", x.dims()))?;
        if c != self.spec.in_channels {
            return Err(invalid!(
                "generator expects {} input channels, got {c}",
                self.spec.in_channels
            ));
        }
        let f = 1 << self.spec.n_down;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid!(
                "spatial size {h}x{w} must be a positive multiple of {f}"
            ));
        }
        Ok(())
    }

    /// Runs the encoder, collecting taps, up to `stop` operations.
    fn encode(&self, x: &Tensor, stop: usize) -> Result<(Tensor, Vec<FeatureTap>)> {
        let mut taps = Vec::with_capacity(self.spec.tap_layers.len());
        let mut next = self.spec.tap_layers.iter().peekable();
        let mut h = x.clone();
        for (i, op) in self.encoder.iter().take(stop).enumerate() {
            h = op.forward(&h)?;
            if next.peek() == Some(&&(i + 1)) {
                next.next();
                taps.push(FeatureTap {
                    layer: i + 1,
                    features: h.clone(),
                });
            }
        }
        Ok((h, taps))
    }

    /// Translated image and the taps of the input.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<FeatureTap>)> {
        self.check_input(x)?;
        let (mut h, taps) = self.encode(x, self.encoder.len())?;
        for stage in &self.up {
            h = normalize(&stage.conv.forward(&h)?, stage.norm)?.relu()?;
        }
        let h = replicate_pad(&h, self.spec.edge_kernel / 2)?;
        let y = self.out_conv.forward(&h)?.tanh()?;
        Ok((y, taps))
    }

    /// Taps only; stops after the deepest tapped layer.
    pub fn encode_taps(&self, x: &Tensor) -> Result<Vec<FeatureTap>> {
        self.check_input(x)?;
        let stop = *self.spec.tap_layers.last().unwrap();
        Ok(self.encode(x, stop)?.1)
    }

    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }
}
