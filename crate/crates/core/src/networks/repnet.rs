use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::generator::FeatureTap;
use super::layers::Linear;
use super::params::ParamBuilder;
use crate::error::{invalid, Result};

/// Shape of every per-layer representation network; the input width comes
/// from the tapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepNetSpec {
    pub hidden: usize,
    /// Embedding dimension M.
    pub out_dim: usize,
}

impl Default for RepNetSpec {
    fn default() -> Self {
        Self {
            hidden: 256,
            out_dim: 256,
        }
    }
}

/// Two affine layers with a ReLU between, applied to each pixel's feature
/// vector independently.
#[derive(Debug, Clone)]
pub struct RepNet {
    fc1: Linear,
    fc2: Linear,
}

impl RepNet {
    pub fn new(in_dim: usize, spec: &RepNetSpec, pb: &mut ParamBuilder) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), in_dim, spec.hidden)?,
            fc2: Linear::new(&mut pb.pp("fc2"), spec.hidden, spec.out_dim)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    /// `[P, C]` feature rows to `[P, M]` embeddings.
    pub fn forward_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let (_, c) = rows.dims2()?;
        if c != self.in_dim() {
            return Err(invalid!(
                "representation network expects {} channels, got {c}",
                self.in_dim()
            ));
        }
        self.fc2.forward(&self.fc1.forward(rows)?.relu()?)
    }

    /// Spatial mean of the embedding map of `rows` (all pixels of one image).
    ///
    /// The second layer is affine, so it is applied once to the mean hidden
    /// activation instead of to every pixel.
    pub fn mean_embedding(&self, rows: &Tensor) -> Result<Tensor> {
        let (_, c) = rows.dims2()?;
        if c != self.in_dim() {
            return Err(invalid!(
                "representation network expects {} channels, got {c}",
                self.in_dim()
            ));
        }
        let hidden = self.fc1.forward(rows)?.relu()?.mean_keepdim(0)?;
        Ok(self.fc2.forward(&hidden)?.squeeze(0)?)
    }
}

/// Applies `rep` at every spatial location: `[B, C, h, w]` to `[B, M, h, w]`.
pub fn embed_patches(tap: &FeatureTap, rep: &RepNet) -> Result<Tensor> {
    let (b, c, h, w) = tap.features.dims4()?;
    if c != rep.in_dim() {
        return Err(invalid!(
            "tap at layer {} has {c} channels, representation network expects {}",
            tap.layer,
            rep.in_dim()
        ));
    }
    let rows = tap
        .features
        .permute((0, 2, 3, 1))?
        .reshape((b * h * w, c))?;
    let out = rep.forward_rows(&rows)?;
    Ok(out
        .reshape((b, h, w, rep.out_dim()))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}
