use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, normalize, Conv2d, NormKind};
use super::params::ParamBuilder;
use crate::error::{invalid, Result};

const SLOPE: f64 = 0.2;

/// Patch discriminator: `n_down` strided convolutions followed by a
/// stride-1 convolution to a one-channel score map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub width: usize,
    pub n_down: usize,
    pub kernel: usize,
    pub padding: usize,
    pub norm: NormKind,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl DiscriminatorSpec {
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            width: 16,
            n_down: 3,
            kernel: 4,
            padding: 1,
            norm: NormKind::Instance,
        }
    }

    /// Score-map size for an `h × w` input, or `None` if it collapses.
    pub fn score_grid(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let step = |n: usize, stride: usize| -> Option<usize> {
            let padded = n + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / stride + 1)
        };
        let (mut h, mut w) = (h, w);
        let first_stride = if self.n_down > 0 { 2 } else { 1 };
        h = step(h, first_stride)?;
        w = step(w, first_stride)?;
        for _ in 1..self.n_down {
            h = step(h, 2)?;
            w = step(w, 2)?;
        }
        Some((step(h, 1)?, step(w, 1)?))
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(spec: &DiscriminatorSpec, pb: &mut ParamBuilder) -> Result<Self> {
        let mut convs = Vec::new();
        let first_stride = if spec.n_down > 0 { 2 } else { 1 };
        convs.push(Conv2d::new(
            &mut pb.pp("conv0"),
            spec.in_channels,
            spec.width,
            spec.kernel,
            first_stride,
            spec.padding,
        )?);
        let mut ch = spec.width;
        for i in 1..spec.n_down {
            convs.push(Conv2d::new(
                &mut pb.pp(format!("conv{i}")),
                ch,
                ch * 2,
                spec.kernel,
                2,
                spec.padding,
            )?);
            ch *= 2;
        }
        let head = Conv2d::new(&mut pb.pp("head"), ch, 1, spec.kernel, 1, spec.padding)?;
        Ok(Self {
            spec: spec.clone(),
            convs,
            head,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Score map `[B, 1, gh, gw]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| invalid!("discriminator input must be [B, C, H, W], got {:?}", x.dims()))?;
        if c != self.spec.in_channels {
            return Err(invalid!(
                "discriminator expects {} channels, got {c}",
                self.spec.in_channels
            ));
        }
        if self.spec.score_grid(h, w).is_none() {
            return Err(invalid!("input {h}x{w} too small for the discriminator"));
        }
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i > 0 {
                h = normalize(&h, self.spec.norm)?;
            }
            h = leaky_relu(&h, SLOPE)?;
        }
        self.head.forward(&h)
    }
}
