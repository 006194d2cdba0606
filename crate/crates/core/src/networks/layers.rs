//! Conv, transposed-conv and affine layers on raw candle tensors.

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::params::{ParamBuilder, INIT_STD};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.normal("weight", &[out_ch, in_ch, kernel, kernel], INIT_STD)?,
            bias: pb.zeros("bias", &[out_ch])?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Transposed convolution; with kernel 4, stride 2, padding 1 it doubles the
/// spatial size exactly.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.normal("weight", &[in_ch, out_ch, kernel, kernel], INIT_STD)?,
            bias: pb.zeros("bias", &[out_ch])?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// `x W^T + b` on `[P, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.normal("weight", &[out_dim, in_dim], INIT_STD)?,
            bias: pb.zeros("bias", &[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-image, per-channel normalization without affine parameters.
    #[default]
    Instance,
    None,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

pub fn normalize(x: &Tensor, kind: NormKind) -> Result<Tensor> {
    match kind {
        NormKind::None => Ok(x.clone()),
        NormKind::Instance => {
            let (b, c, h, w) = x.dims4()?;
            let flat = x.reshape((b, c, h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            let out = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
            Ok(out.reshape((b, c, h, w))?)
        }
    }
}

/// Edge-replicating spatial padding.
pub fn replicate_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_same(2, pad, pad)?.pad_with_same(3, pad, pad)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let neg = (x.minimum(0.0)? * slope)?;
    Ok((x.relu()? + neg)?)
}
