//! Query/positive/negative construction per tap layer: position sampling,
//! normalization, the spatial-mean context and negative banks.

use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::networks::{NegGen, RepNet};
use crate::tensor_ext::{index_tensor, randn, to_vec_f64};

/// Norms at or below this are rejected by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Scales a vector `[M]`, or each row of `[P, M]`, to unit L2 norm.
///
/// Rows with norm `<= 1e-12` are an error, never silently clamped.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let norms = match v.rank() {
        1 => v.sqr()?.sum_keepdim(0)?.sqrt()?,
        2 => v.sqr()?.sum_keepdim(1)?.sqrt()?,
        r => return Err(invalid!("l2_normalize expects rank 1 or 2, got {r}")),
    };
    for (i, n) in to_vec_f64(&norms)?.into_iter().enumerate() {
        if !(n > NORM_EPS) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {n:e}; cannot normalize"
            )));
        }
    }
    Ok(v.broadcast_div(&norms)?)
}

/// Sampled spatial positions of one layer's feature map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionSet {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub positions: Vec<(usize, usize)>,
}

impl PositionSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn for_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    /// Row-major flat indices `r * width + c`.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.positions
            .iter()
            .map(|&(r, c)| r * self.width + c)
            .collect()
    }
}

/// `s` distinct positions drawn uniformly without replacement.
pub fn sample_positions<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    s: usize,
    rng: &mut R,
) -> Result<PositionSet> {
    let total = h * w;
    if s == 0 || s > total {
        return Err(invalid!("cannot sample {s} positions from a {h}x{w} map"));
    }
    let positions = rand::seq::index::sample(rng, total, s)
        .into_iter()
        .map(|i| (i / w, i % w))
        .collect();
    Ok(PositionSet {
        layer: 0,
        height: h,
        width: w,
        positions,
    })
}

/// Unit queries and positives at shared positions, plus the raw spatial
/// mean of the source embedding.
#[derive(Debug, Clone)]
pub struct EmbeddedPatchSet {
    pub layer: usize,
    /// `[S, M]`, from the translated image.
    pub q: Tensor,
    /// `[S, M]`, from the source image.
    pub k_pos: Tensor,
    /// `[M]`, mean over every source position (not only sampled ones).
    pub ctx_mean: Tensor,
}

impl EmbeddedPatchSet {
    pub fn detach(&self) -> Self {
        Self {
            layer: self.layer,
            q: self.q.detach(),
            k_pos: self.k_pos.detach(),
            ctx_mean: self.ctx_mean.detach(),
        }
    }
}

fn map_rows(emb: &Tensor) -> Result<(Tensor, usize, usize)> {
    let emb = match emb.rank() {
        3 => emb.clone(),
        4 if emb.dims()[0] == 1 => emb.squeeze(0)?,
        _ => {
            return Err(invalid!(
                "embedding map must be [M, h, w] or [1, M, h, w], got {:?}",
                emb.dims()
            ))
        }
    };
    let (m, h, w) = emb.dims3()?;
    Ok((emb.reshape((m, h * w))?.t()?.contiguous()?, h, w))
}

/// Patch set from full embedding maps of the translated (`emb_y`) and
/// source (`emb_x`) images.
pub fn build_patch_set(emb_y: &Tensor, emb_x: &Tensor, pos: &PositionSet) -> Result<EmbeddedPatchSet> {
    if emb_y.dims() != emb_x.dims() {
        return Err(invalid!(
            "embedding maps differ in shape: {:?} vs {:?}",
            emb_y.dims(),
            emb_x.dims()
        ));
    }
    let (rows_y, h, w) = map_rows(emb_y)?;
    let (rows_x, _, _) = map_rows(emb_x)?;
    check_bounds(pos, h, w)?;
    let idx = index_tensor(&pos.flat_indices())?;
    Ok(EmbeddedPatchSet {
        layer: pos.layer,
        q: l2_normalize(&rows_y.index_select(&idx, 0)?)?,
        k_pos: l2_normalize(&rows_x.index_select(&idx, 0)?)?,
        ctx_mean: rows_x.mean(0)?,
    })
}

/// Same result as embedding both feature maps and calling
/// [`build_patch_set`], but only the sampled translated-image pixels go
/// through the representation network.
///
/// `rows_y`/`rows_x` are `[h*w, C]` pixel features of one image.
pub fn build_patch_set_from_features(
    rows_y: &Tensor,
    rows_x: &Tensor,
    rep: &RepNet,
    pos: &PositionSet,
) -> Result<EmbeddedPatchSet> {
    if rows_y.dims() != rows_x.dims() {
        return Err(invalid!(
            "feature maps differ in shape: {:?} vs {:?}",
            rows_y.dims(),
            rows_x.dims()
        ));
    }
    check_bounds(pos, pos.height, pos.width)?;
    if rows_x.dims()[0] != pos.height * pos.width {
        return Err(invalid!(
            "{} feature rows for a {}x{} position grid",
            rows_x.dims()[0],
            pos.height,
            pos.width
        ));
    }
    let idx = index_tensor(&pos.flat_indices())?;
    Ok(EmbeddedPatchSet {
        layer: pos.layer,
        q: l2_normalize(&rep.forward_rows(&rows_y.index_select(&idx, 0)?)?)?,
        k_pos: l2_normalize(&rep.forward_rows(&rows_x.index_select(&idx, 0)?)?)?,
        ctx_mean: rep.mean_embedding(rows_x)?,
    })
}

fn check_bounds(pos: &PositionSet, h: usize, w: usize) -> Result<()> {
    if pos.height != h || pos.width != w {
        return Err(invalid!(
            "positions sampled for {}x{}, map is {h}x{w}",
            pos.height,
            pos.width
        ));
    }
    if let Some(&(r, c)) = pos.positions.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(invalid!("position ({r}, {c}) outside {h}x{w}"));
    }
    Ok(())
}

/// Negatives of one image and layer.
#[derive(Debug, Clone)]
pub struct NegativeBank {
    pub layer: usize,
    /// `[N, M]` unit vectors.
    pub k_neg: Tensor,
    /// `[N, M]` pre-normalization outputs, kept for the diversity term.
    pub raw: Tensor,
    /// `[N, Z]` noise that produced the bank, for generated banks.
    pub noises: Option<Tensor>,
}

impl NegativeBank {
    pub fn len(&self) -> usize {
        self.k_neg.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn detach(&self) -> Self {
        Self {
            layer: self.layer,
            k_neg: self.k_neg.detach(),
            raw: self.raw.detach(),
            noises: self.noises.clone(),
        }
    }
}

/// Draws `n` standard-normal noise vectors and maps them through `neg`.
pub fn build_negative_bank<R: Rng + ?Sized>(
    ctx_mean: &Tensor,
    neg: &NegGen,
    n: usize,
    rng: &mut R,
) -> Result<NegativeBank> {
    if n == 0 {
        return Err(invalid!("negative bank needs N >= 1"));
    }
    let noises = randn(rng, &[n, neg.noise_dim()], 1.0, ctx_mean.dtype())?;
    bank_from_noise(ctx_mean, neg, &noises)
}

/// Bank for given noise; used to regenerate a bank after `neg` changed.
pub fn bank_from_noise(ctx_mean: &Tensor, neg: &NegGen, noises: &Tensor) -> Result<NegativeBank> {
    let raw = neg.forward(ctx_mean, noises)?;
    Ok(NegativeBank {
        layer: 0,
        k_neg: l2_normalize(&raw)?,
        raw,
        noises: Some(noises.clone()),
    })
}

/// Bank from a learned `[N, M]` variable.
pub fn free_bank(bank: &Var) -> Result<NegativeBank> {
    let raw = bank.as_tensor().clone();
    Ok(NegativeBank {
        layer: 0,
        k_neg: l2_normalize(&raw)?,
        raw,
        noises: None,
    })
}

/// Embeddings of `n` random source positions, without replacement when the
/// map is large enough.
pub fn in_image_bank<R: Rng + ?Sized>(
    rows_x: &Tensor,
    rep: &RepNet,
    n: usize,
    rng: &mut R,
) -> Result<NegativeBank> {
    let total = rows_x.dims2()?.0;
    if n == 0 || total == 0 {
        return Err(invalid!("cannot draw {n} in-image negatives from {total} positions"));
    }
    let idx: Vec<usize> = if n <= total {
        rand::seq::index::sample(rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    };
    let raw = rep.forward_rows(&rows_x.index_select(&index_tensor(&idx)?, 0)?)?;
    Ok(NegativeBank {
        layer: 0,
        k_neg: l2_normalize(&raw)?,
        raw,
        noises: None,
    })
}

/// Summary of a set of query-negative cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HardnessSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl HardnessSummary {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            q05: q(0.05),
            q25: q(0.25),
            q50: q(0.5),
            q75: q(0.75),
            q95: q(0.95),
        }
    }
}

/// All `S·N` similarities `q_s · k_n` (row-major in s) and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessStats {
    pub values: Vec<f64>,
    pub summary: HardnessSummary,
}

pub fn hardness_stats(patch_set: &EmbeddedPatchSet, bank: &NegativeBank) -> Result<HardnessStats> {
    cosine_table(&patch_set.q, &bank.k_neg)
}

/// Similarities between unit rows `q [S, M]` and `k [N, M]`, clamped to
/// `[-1, 1]` against round-off.
pub fn cosine_table(q: &Tensor, k: &Tensor) -> Result<HardnessStats> {
    let (_, m) = q.dims2()?;
    let (_, m2) = k.dims2()?;
    if m != m2 {
        return Err(invalid!("dimension mismatch: queries {m}, negatives {m2}"));
    }
    let sims = q.matmul(&k.t()?)?;
    let values: Vec<f64> = to_vec_f64(&sims)?
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    let summary = HardnessSummary::from_values(&values);
    Ok(HardnessStats { values, summary })
}

/// One similarity per line.
pub fn write_similarities(path: &Path, values: &[f64]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for v in values {
        writeln!(out, "{v}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Mean L1 distance over all unordered pairs of rows of `raw [N, M]`.
pub fn mean_pairwise_l1(raw: &Tensor) -> Result<f64> {
    let (n, m) = raw.dims2()?;
    if n < 2 {
        return Ok(0.0);
    }
    let v = to_vec_f64(raw)?;
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += (0..m).map(|d| (v[i * m + d] - v[j * m + d]).abs()).sum::<f64>();
        }
    }
    Ok(acc / (n * (n - 1) / 2) as f64)
}

/// Mean of a per-row reduction helper used by diagnostics.
pub fn row_norms(t: &Tensor) -> Result<Vec<f64>> {
    to_vec_f64(&t.sqr()?.sum(D::Minus1)?.sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let v = Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap();
        let u = l2_normalize(&v).unwrap().to_vec1::<f64>().unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&Tensor::new(&[0.6f64, 0.8], &Device::Cpu).unwrap())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!((again[0] - 0.6).abs() < 1e-15 && (again[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let v = Tensor::zeros((2, 3), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l2_normalize(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn exhaustive_and_single_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_positions(3, 4, 12, &mut rng).unwrap();
        let mut idx = p.flat_indices();
        idx.sort();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
        let p = sample_positions(1, 1, 1, &mut rng).unwrap();
        assert_eq!(p.positions, vec![(0, 0)]);
        assert!(sample_positions(2, 2, 5, &mut rng).is_err());
        assert!(sample_positions(2, 2, 0, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = sample_positions(16, 16, 64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_positions(16, 16, 64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_maps_give_identical_queries_and_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = randn(&mut rng, &[5, 4, 3], 1.0, candle_core::DType::F64).unwrap();
        let pos = sample_positions(4, 3, 6, &mut rng).unwrap();
        let set = build_patch_set(&emb, &emb, &pos).unwrap();
        let q = set.q.to_vec2::<f64>().unwrap();
        let k = set.k_pos.to_vec2::<f64>().unwrap();
        assert_eq!(q, k);
    }

    #[test]
    fn constant_map_has_constant_context() {
        let c = [0.5f64, -1.0, 2.0];
        let data: Vec<f64> = c.iter().flat_map(|&v| std::iter::repeat(v).take(6)).collect();
        let emb = Tensor::from_vec(data, (3, 2, 3), &Device::Cpu).unwrap();
        let pos = sample_positions(2, 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let set = build_patch_set(&emb, &emb, &pos).unwrap();
        let ctx = set.ctx_mean.to_vec1::<f64>().unwrap();
        for (a, b) in ctx.iter().zip(c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_bounds_positions_are_rejected() {
        let emb = Tensor::ones((2, 2, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        let pos = PositionSet {
            layer: 0,
            height: 2,
            width: 2,
            positions: vec![(2, 0)],
        };
        assert!(build_patch_set(&emb, &emb, &pos).is_err());
    }

    #[test]
    fn summary_quantiles() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let s = HardnessSummary::from_values(&v);
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.q25 - 0.25).abs() < 1e-12);
        assert!((s.q95 - 0.95).abs() < 1e-12);
        assert_eq!((s.min, s.max, s.count), (0.0, 1.0, 101));
    }

    #[test]
    fn orthogonal_similarity_is_zero() {
        let q = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let k = Tensor::new(&[[0.0f64, 1.0], [0.0, -1.0]], &Device::Cpu).unwrap();
        let t = cosine_table(&q, &k).unwrap();
        assert_eq!(t.values, vec![0.0, 0.0]);
    }

    #[test]
    fn pairwise_l1_of_two_rows() {
        let r = Tensor::new(&[[0.0f64, 0.0], [1.0, -2.0]], &Device::Cpu).unwrap();
        assert_eq!(mean_pairwise_l1(&r).unwrap(), 3.0);
    }
}
