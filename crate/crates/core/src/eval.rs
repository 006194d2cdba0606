//! Fréchet distance between embedded image sets, mask-overlap
//! correspondence for synthetic data, and per-pixel similarity maps.

use candle_core::{DType, Tensor};
use image::{GrayImage, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::tensor_to_rgb;
use crate::error::{invalid, Error, Result};
use crate::networks::Networks;
use crate::tensor_ext::{randn, to_vec_f64};

/// Tolerance on covariance symmetry and on negative eigenvalues.
pub const COV_TOL: f64 = 1e-8;
/// Relative bound below which a negative eigenvalue of the square-root
/// argument is a numerical failure rather than round-off.
pub const SQRT_NEG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderMode {
    /// Three fixed random strided convolutions and a global average pool.
    #[default]
    RandomFrozenConv,
    /// Area-averaged `g × g` thumbnail, flattened; `dim = 3·g²`.
    DownsampledPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureEmbedderConfig {
    pub mode: EmbedderMode,
    pub dim: usize,
    pub seed: u64,
}

impl Default for FeatureEmbedderConfig {
    fn default() -> Self {
        Self {
            mode: EmbedderMode::RandomFrozenConv,
            dim: 64,
            seed: 0,
        }
    }
}

/// Frozen image embedder; its weights never change after construction.
#[derive(Debug, Clone)]
pub enum Embedder {
    Conv { weights: Vec<Tensor> },
    Pixels { grid: usize },
}

const CONV_WIDTHS: [usize; 2] = [16, 32];

impl Embedder {
    pub fn new(cfg: &FeatureEmbedderConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(invalid!("embedder dimension must be positive"));
        }
        match cfg.mode {
            EmbedderMode::DownsampledPixels => {
                let grid = ((cfg.dim / 3) as f64).sqrt().round() as usize;
                if grid == 0 || 3 * grid * grid != cfg.dim {
                    return Err(invalid!(
                        "downsampled-pixels dimension must be 3·g², got {}",
                        cfg.dim
                    ));
                }
                Ok(Embedder::Pixels { grid })
            }
            EmbedderMode::RandomFrozenConv => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
                let chans = [3, CONV_WIDTHS[0], CONV_WIDTHS[1], cfg.dim];
                let weights = chans
                    .windows(2)
                    .map(|c| {
                        let fan_in = (c[0] * 9) as f64;
                        randn(&mut rng, &[c[1], c[0], 3, 3], (2.0 / fan_in).sqrt(), DType::F32)
                    })
                    .collect::<Result<_>>()?;
                Ok(Embedder::Conv { weights })
            }
        }
    }

    /// One row per image of a `[3, H, W]` list.
    pub fn embed(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|img| self.embed_one(img)).collect()
    }

    fn embed_one(&self, img: &Tensor) -> Result<Vec<f64>> {
        let x = match img.rank() {
            3 => img.unsqueeze(0)?,
            4 if img.dims()[0] == 1 => img.clone(),
            _ => return Err(invalid!("embedder expects one [3, H, W] image, got {:?}", img.dims())),
        }
        .to_dtype(DType::F32)?;
        match self {
            Embedder::Conv { weights } => {
                let mut h = x;
                for w in weights {
                    h = h.conv2d(w, 1, 2, 1, 1)?.relu()?;
                }
                to_vec_f64(&h.mean((2, 3))?)
            }
            Embedder::Pixels { grid } => {
                let (_, _, hh, ww) = x.dims4()?;
                if hh % grid != 0 || ww % grid != 0 {
                    return Err(invalid!("image {hh}x{ww} not divisible into a {grid}x{grid} grid"));
                }
                to_vec_f64(&x.avg_pool2d((hh / grid, ww / grid))?)
            }
        }
    }
}

/// Mean and covariance of an embedded set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    /// Checks shapes, symmetry and positive semidefiniteness.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(invalid!("covariance is {}x{}, mean has {d} entries", sigma.nrows(), sigma.ncols()));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > COV_TOL * sigma.amax().max(1.0) {
            return Err(invalid!("covariance not symmetric (max deviation {asym:e})"));
        }
        let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if min_eig < -COV_TOL * sigma.amax().max(1.0) {
            return Err(invalid!("covariance has eigenvalue {min_eig:e}"));
        }
        Ok(Self { mu, sigma })
    }

    /// Sample mean and unbiased covariance of at least two rows.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(invalid!("need at least 2 samples, got {n}"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid!("samples have differing dimensions"));
        }
        let mut mu = DVector::zeros(d);
        for r in rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mu;
            sigma += &c * c.transpose();
        }
        sigma /= (n - 1) as f64;
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn embed_set(images: &[Tensor], cfg: &FeatureEmbedderConfig) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(invalid!("need at least 2 images, got {}", images.len()));
    }
    GaussianStats::from_samples(&Embedder::new(cfg)?.embed(images)?)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix after clamping round-off negatives;
/// values below `-SQRT_NEG_TOL·scale` are an error.
fn clamped_eigen(m: &DMatrix<f64>, scale: f64, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let floor = -SQRT_NEG_TOL * scale.max(f64::MIN_POSITIVE);
    for v in eig.eigenvalues.iter_mut() {
        if *v < floor {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the trace of the square
/// root taken from the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid!("dimension mismatch: {} vs {}", a.dim(), b.dim()));
    }
    let scale = a.sigma.norm().max(b.sigma.norm());
    let ea = clamped_eigen(&a.sigma, scale, "Σa")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.sigma * &sqrt_a;
    let ei = clamped_eigen(&inner, scale * scale, "Σa^½ Σb Σa^½")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let dmu = (&a.mu - &b.mu).norm_squared();
    Ok((dmu + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Rec. 601 luma of each pixel, row-major, in `[0, 255]`.
pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect()
}

/// Otsu threshold on a 256-bin histogram: pixels `> t` form the bright
/// class. `None` when every pixel falls in one bin.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    Some(best_t as f64 + 0.5)
}

/// Bright-class pixels of `img` under its Otsu threshold.
pub fn foreground_of(img: &RgbImage) -> Vec<bool> {
    let lum = luminance(img);
    match otsu_threshold(&lum) {
        Some(t) => lum.iter().map(|&v| v > t).collect(),
        None => vec![false; lum.len()],
    }
}

/// Intersection over union of two pixel sets; two empty sets score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU between the Otsu foreground of `translated` and the nonzero pixels
/// of the source shape mask.
pub fn correspondence_score(mask: &GrayImage, translated: &RgbImage) -> Result<f64> {
    if mask.dimensions() != translated.dimensions() {
        return Err(invalid!(
            "mask is {:?}, translated image is {:?}",
            mask.dimensions(),
            translated.dimensions()
        ));
    }
    let truth: Vec<bool> = mask.pixels().map(|p| p.0[0] > 0).collect();
    Ok(iou(&truth, &foreground_of(translated)))
}

/// `exp(q · k_p / τ)` per pixel `p` of `emb_x`, with unit `q` taken from
/// `emb_y` at `query` and unit `k_p`; maps are `[M, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SimilarityMap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        (i / self.width, i % self.width)
    }
}

pub fn similarity_map(query: (usize, usize), emb_y: &Tensor, emb_x: &Tensor, tau: f64) -> Result<SimilarityMap> {
    let squeeze = |t: &Tensor| -> Result<Tensor> {
        match t.rank() {
            3 => Ok(t.clone()),
            4 if t.dims()[0] == 1 => Ok(t.squeeze(0)?),
            _ => Err(invalid!("embedding map must be [M, h, w], got {:?}", t.dims())),
        }
    };
    let (ey, ex) = (squeeze(emb_y)?, squeeze(emb_x)?);
    if ey.dims() != ex.dims() {
        return Err(invalid!("maps differ: {:?} vs {:?}", ey.dims(), ex.dims()));
    }
    if !(tau > 0.0) {
        return Err(invalid!("tau must be positive"));
    }
    let (m, h, w) = ex.dims3()?;
    let (r, c) = query;
    if r >= h || c >= w {
        return Err(invalid!("query ({r}, {c}) outside the {h}x{w} map"));
    }
    let vy = to_vec_f64(&ey)?;
    let vx = to_vec_f64(&ex)?;
    let unit = |v: &[f64], idx: usize| -> Result<Vec<f64>> {
        let col: Vec<f64> = (0..m).map(|k| v[k * h * w + idx]).collect();
        let n = col.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(n > crate::sampling::NORM_EPS) {
            return Err(Error::Degenerate(format!("embedding at pixel {idx} has norm {n:e}")));
        }
        Ok(col.into_iter().map(|a| a / n).collect())
    };
    let q = unit(&vy, r * w + c)?;
    let values = (0..h * w)
        .map(|p| {
            let k = unit(&vx, p)?;
            let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            Ok((dot / tau).exp())
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityMap {
        height: h,
        width: w,
        values,
    })
}

/// Translates each `[3, H, W]` image with the model's generator.
pub fn translate_all(nets: &Networks, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| {
            let x = nets.cast(&img.unsqueeze(0)?)?;
            Ok(nets.generator.translate(&x)?.squeeze(0)?.to_dtype(DType::F32)?)
        })
        .collect()
}

/// Metrics of one model on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frechet: f64,
    /// Mean over source images; absent without masks.
    pub correspondence: Option<f64>,
    pub num_sources: usize,
    pub num_targets: usize,
}

/// Translates `sources`, compares them with `targets` and, given masks,
/// scores shape correspondence.
pub fn evaluate(
    nets: &Networks,
    sources: &[Tensor],
    masks: Option<&[GrayImage]>,
    targets: &[Tensor],
    embedder: &FeatureEmbedderConfig,
) -> Result<EvalSummary> {
    let translated = translate_all(nets, sources)?;
    evaluate_images(sources.len(), &translated, masks, targets, embedder)
}

/// As [`evaluate`] for already translated images.
pub fn evaluate_images(
    num_sources: usize,
    translated: &[Tensor],
    masks: Option<&[GrayImage]>,
    targets: &[Tensor],
    embedder: &FeatureEmbedderConfig,
) -> Result<EvalSummary> {
    let frechet = frechet_distance(&embed_set(translated, embedder)?, &embed_set(targets, embedder)?)?;
    let correspondence = match masks {
        Some(masks) => {
            if masks.len() != translated.len() {
                return Err(invalid!("{} masks for {} images", masks.len(), translated.len()));
            }
            let mut acc = 0.0;
            for (m, t) in masks.iter().zip(translated) {
                acc += correspondence_score(m, &tensor_to_rgb(t)?)?;
            }
            Some(acc / masks.len() as f64)
        }
        None => None,
    };
    Ok(EvalSummary {
        frechet,
        correspondence,
        num_sources,
        num_targets: targets.len(),
    })
}
