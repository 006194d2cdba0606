//! Scalar objectives: patch-wise InfoNCE, the negative-generator diversity
//! term, least-squares GAN losses and the weighted per-network objectives.
//!
//! Every loss is a differentiable function of candle tensors, so the same
//! code serves the training step (through autograd) and the numeric tests.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor_ext::{all_finite, scalar_f64};

/// Tolerance on `‖v‖₂ = 1` accepted by [`ContrastiveBatch::new`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Looser unit-norm tolerance applied to single-precision batches, whose
/// normalization round-off alone is of order 1e-7 per coordinate.
pub const UNIT_NORM_TOL_F32: f64 = 1e-5;

/// Default InfoNCE temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// How per-query losses within one layer are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryReduction {
    /// Average over the S queries; loss magnitude does not depend on S.
    #[default]
    Mean,
    /// Sum over the S queries.
    Sum,
}

/// Queries, aligned positives and a shared negative list for one image/layer.
///
/// `q` and `k_pos` are `[S, M]`, `k_neg` is `[N, M]`; all rows unit-norm.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    q: Tensor,
    k_pos: Tensor,
    k_neg: Tensor,
    tau: f64,
}

impl ContrastiveBatch {
    /// Builds a batch after checking shapes, finiteness, unit norms and `tau > 0`.
    pub fn new(q: Tensor, k_pos: Tensor, k_neg: Tensor, tau: f64) -> Result<Self> {
        check_shapes(&q, &k_pos, &k_neg, tau)?;
        for (name, t) in [("q", &q), ("k_pos", &k_pos), ("k_neg", &k_neg)] {
            if !all_finite(t)? {
                return Err(invalid!("{name} contains non-finite values"));
            }
            let tol = if t.dtype() == DType::F32 {
                UNIT_NORM_TOL_F32
            } else {
                UNIT_NORM_TOL
            };
            let norms = t.to_dtype(DType::F64)?.sqr()?.sum(D::Minus1)?.sqrt()?;
            for (i, n) in norms.to_vec1::<f64>()?.into_iter().enumerate() {
                if (n - 1.0).abs() > tol {
                    return Err(invalid!("{name}[{i}] has norm {n}, expected 1"));
                }
            }
        }
        Ok(Self {
            q,
            k_pos,
            k_neg,
            tau,
        })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k_pos(&self) -> &Tensor {
        &self.k_pos
    }

    pub fn k_neg(&self) -> &Tensor {
        &self.k_neg
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_queries(&self) -> usize {
        self.q.dims()[0]
    }

    pub fn num_negatives(&self) -> usize {
        self.k_neg.dims()[0]
    }
}

fn check_shapes(q: &Tensor, k_pos: &Tensor, k_neg: &Tensor, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid!("temperature must be positive and finite, got {tau}"));
    }
    let (s, m) = q
        .dims2()
        .map_err(|_| invalid!("q must be [S, M], got {:?}", q.dims()))?;
    let (s2, m2) = k_pos
        .dims2()
        .map_err(|_| invalid!("k_pos must be [S, M], got {:?}", k_pos.dims()))?;
    let (n, m3) = k_neg
        .dims2()
        .map_err(|_| invalid!("k_neg must be [N, M], got {:?}", k_neg.dims()))?;
    if s == 0 || n == 0 {
        return Err(invalid!("need S >= 1 and N >= 1, got S={s}, N={n}"));
    }
    if s != s2 || m != m2 || m != m3 {
        return Err(invalid!(
            "shape mismatch: q {:?}, k_pos {:?}, k_neg {:?}",
            q.dims(),
            k_pos.dims(),
            k_neg.dims()
        ));
    }
    Ok(())
}

/// Per-query logits `[S, 1 + N]`, positive first, already divided by `tau`.
pub fn contrastive_logits(q: &Tensor, k_pos: &Tensor, k_neg: &Tensor, tau: f64) -> Result<Tensor> {
    check_shapes(q, k_pos, k_neg, tau)?;
    let pos = (q * k_pos)?.sum_keepdim(1)?;
    let neg = q.matmul(&k_neg.t()?)?;
    Ok((Tensor::cat(&[&pos, &neg], 1)? / tau)?)
}

/// InfoNCE on raw tensors, without the unit-norm precondition.
///
/// Used directly by gradient checks, where perturbed inputs leave the sphere.
pub fn contrastive_loss(
    q: &Tensor,
    k_pos: &Tensor,
    k_neg: &Tensor,
    tau: f64,
    reduction: QueryReduction,
) -> Result<Tensor> {
    let logits = contrastive_logits(q, k_pos, k_neg, tau)?;
    // The shift is a constant for autograd; log-sum-exp is exact for any shift.
    let shift = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&shift)?.exp()?.sum_keepdim(1)?.log()? + &shift)?;
    let per_query = (lse - logits.narrow(1, 0, 1)?)?.squeeze(1)?;
    Ok(match reduction {
        QueryReduction::Mean => per_query.mean_all()?,
        QueryReduction::Sum => per_query.sum_all()?,
    })
}

/// InfoNCE averaged over the batch's queries.
pub fn info_nce(batch: &ContrastiveBatch) -> Result<Tensor> {
    info_nce_with(batch, QueryReduction::Mean)
}

pub fn info_nce_with(batch: &ContrastiveBatch, reduction: QueryReduction) -> Result<Tensor> {
    contrastive_loss(&batch.q, &batch.k_pos, &batch.k_neg, batch.tau, reduction)
}

/// Sum of per-layer InfoNCE terms for one image.
pub fn patch_nce(per_layer: &[ContrastiveBatch]) -> Result<Tensor> {
    patch_nce_with(per_layer, QueryReduction::Mean)
}

pub fn patch_nce_with(per_layer: &[ContrastiveBatch], reduction: QueryReduction) -> Result<Tensor> {
    let mut terms = per_layer.iter().map(|b| info_nce_with(b, reduction));
    let first = terms
        .next()
        .ok_or_else(|| invalid!("patch_nce needs at least one layer"))??;
    terms.try_fold(first, |acc, t| Ok(acc.add(&t?)?))
}

/// Negative L1 distance between two raw negative-generator outputs.
///
/// Accepts `[M]` vectors or `[P, M]` row-aligned pairs; for pairs the result
/// is the mean over rows. Always `<= 0`.
pub fn diversity_loss(out1: &Tensor, out2: &Tensor) -> Result<Tensor> {
    if out1.dims() != out2.dims() {
        return Err(invalid!(
            "diversity_loss dimension mismatch: {:?} vs {:?}",
            out1.dims(),
            out2.dims()
        ));
    }
    let l1 = (out1 - out2)?.abs()?;
    let dist = match out1.rank() {
        1 => l1.sum_all()?,
        2 => l1.sum(1)?.mean_all()?,
        r => return Err(invalid!("diversity_loss expects rank 1 or 2, got {r}")),
    };
    Ok(dist.neg()?)
}

/// Discriminator outputs on real and generated images (any shape; patch maps
/// are averaged over every element).
#[derive(Debug, Clone)]
pub struct GanScores {
    pub real: Option<Tensor>,
    pub fake: Tensor,
}

impl GanScores {
    pub fn new(real: Tensor, fake: Tensor) -> Self {
        Self {
            real: Some(real),
            fake,
        }
    }

    pub fn fake_only(fake: Tensor) -> Self {
        Self { real: None, fake }
    }
}

fn nonempty<'a>(t: Option<&'a Tensor>, what: &str) -> Result<&'a Tensor> {
    match t {
        Some(t) if t.elem_count() > 0 => Ok(t),
        _ => Err(invalid!("{what} scores are empty")),
    }
}

/// `mean[(1 - D(real))²] + mean[D(fake)²]`.
pub fn lsgan_d(scores: &GanScores) -> Result<Tensor> {
    let real = nonempty(scores.real.as_ref(), "real")?;
    let fake = nonempty(Some(&scores.fake), "fake")?;
    let real_term = real.affine(-1.0, 1.0)?.sqr()?.mean_all()?;
    let fake_term = fake.sqr()?.mean_all()?;
    Ok((real_term + fake_term)?)
}

/// `mean[(1 - D(fake))²]`; real scores are ignored.
pub fn lsgan_g(scores: &GanScores) -> Result<Tensor> {
    let fake = nonempty(Some(&scores.fake), "fake")?;
    Ok(fake.affine(-1.0, 1.0)?.sqr()?.mean_all()?)
}

/// Trade-off weights of the per-network objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the generator GAN term in `L_G`.
    pub lambda_gan: f64,
    /// Weight of the diversity term in `L_N`.
    pub lambda_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_div: 1.0,
        }
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub ad_cont: f64,
    pub div: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub l_h: f64,
    pub l_g: f64,
    pub l_n: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.ad_cont,
            self.div,
            self.gan_g,
            self.gan_d,
            self.l_h,
            self.l_g,
            self.l_n,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `L_H = ad`, `L_G = ad + λ1·gan_g`, `L_N = -ad + λ2·div`.
pub fn assemble_losses(ad_cont: f64, div: f64, gan_g: f64, w: LossWeights) -> Result<LossBundle> {
    if ![ad_cont, div, gan_g, w.lambda_gan, w.lambda_div]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(invalid!("assemble_losses inputs must be finite"));
    }
    Ok(LossBundle {
        ad_cont,
        div,
        gan_g,
        gan_d: 0.0,
        l_h: ad_cont,
        l_g: ad_cont + w.lambda_gan * gan_g,
        l_n: -ad_cont + w.lambda_div * div,
    })
}

/// Scalar value of a 0-d loss tensor.
pub fn loss_value(t: &Tensor) -> Result<f64> {
    let v = scalar_f64(t)?;
    if v.is_nan() {
        return Err(Error::Numerical("loss evaluated to NaN".into()));
    }
    Ok(v)
}
