use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{ParamBuilder, INIT_STD};
use crate::error::{invalid, Result};

const RMS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegGenSpec {
    /// Noise dimension Z.
    pub noise_dim: usize,
    pub hidden: usize,
    /// Largest per-coordinate noise offset, relative to the unit-RMS
    /// context.
    pub noise_scale: f64,
}

impl Default for NegGenSpec {
    fn default() -> Self {
        Self {
            noise_dim: 32,
            hidden: 256,
            noise_scale: 0.25,
        }
    }
}

/// Noise-conditioned negative generator.
///
/// With `ĉ = ctx / rms(ctx)`,
/// `out = (ĉ + W·ĉ) + noise_scale · tanh(mlp([ĉ ‖ z]))`.
/// The centre `ĉ + W·ĉ` ignores the noise, so the diversity term (a
/// difference of outputs for two noises) only reaches the noise branch,
/// and that branch is bounded. The centre has no bias, so it always moves
/// with the context. Context and output share the embedding dimension M.
#[derive(Debug, Clone)]
pub struct NegGen {
    centre: Var,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    noise_dim: usize,
    noise_scale: f64,
}

impl NegGen {
    pub fn new(embed_dim: usize, spec: &NegGenSpec, pb: &mut ParamBuilder) -> Result<Self> {
        if !(spec.noise_scale.is_finite() && spec.noise_scale >= 0.0) {
            return Err(invalid!("noise_scale must be finite and >= 0, got {}", spec.noise_scale));
        }
        Ok(Self {
            centre: pb.pp("centre").normal("weight", &[embed_dim, embed_dim], INIT_STD)?,
            fc1: Linear::new(&mut pb.pp("fc1"), embed_dim + spec.noise_dim, spec.hidden)?,
            fc2: Linear::new(&mut pb.pp("fc2"), spec.hidden, spec.hidden)?,
            fc3: Linear::new(&mut pb.pp("fc3"), spec.hidden, embed_dim)?,
            noise_dim: spec.noise_dim,
            noise_scale: spec.noise_scale,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.fc3.out_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Raw (unnormalized) negatives for one context `[M]` and noises `[N, Z]`.
    pub fn forward(&self, ctx: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let m = ctx.dims1().map_err(|_| invalid!("context must be [M], got {:?}", ctx.dims()))?;
        if m != self.embed_dim() {
            return Err(invalid!(
                "context has dimension {m}, negative generator expects {}",
                self.embed_dim()
            ));
        }
        let (n, z) = noise
            .dims2()
            .map_err(|_| invalid!("noise must be [N, Z], got {:?}", noise.dims()))?;
        if z != self.noise_dim {
            return Err(invalid!(
                "noise has dimension {z}, negative generator expects {}",
                self.noise_dim
            ));
        }
        let rms = (ctx.sqr()?.mean_all()? + RMS_EPS)?.sqrt()?;
        let row = ctx.unsqueeze(0)?.broadcast_div(&rms)?;
        let centre = (&row + row.matmul(&self.centre.as_tensor().t()?)?)?;
        let input = Tensor::cat(&[&row.broadcast_as((n, m))?, noise], 1)?;
        let h = self.fc1.forward(&input)?.relu()?;
        let h = self.fc2.forward(&h)?.relu()?;
        let offset = (self.fc3.forward(&h)?.tanh()? * self.noise_scale)?;
        Ok(offset.broadcast_add(&centre)?)
    }
}

/// One raw negative for context `[M]` and noise `[Z]`.
pub fn generate_negative(ctx: &Tensor, z: &Tensor, neg: &NegGen) -> Result<Tensor> {
    let z = z
        .unsqueeze(0)
        .map_err(|_| invalid!("noise must be a vector"))?;
    Ok(neg.forward(ctx, &z)?.squeeze(0)?)
}
