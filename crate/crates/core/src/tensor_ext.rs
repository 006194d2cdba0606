//! Small host-side helpers around candle tensors.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_vec_f64(t)?.iter().all(|v| v.is_finite()))
}

/// Draws an i.i.d. standard-normal tensor from a host rng, so every random
/// draw in the crate flows from one seeded generator.
pub fn randn<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
    dtype: DType,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Index tensor for `index_select`.
pub fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
}

/// Rows `[h*w, C]` of one image of a `[B, C, h, w]` feature map.
pub fn pixel_rows(features: &Tensor, image: usize) -> Result<Tensor> {
    let (_, c, h, w) = features.dims4()?;
    Ok(features
        .narrow(0, image, 1)?
        .reshape((c, h * w))?
        .t()?
        .contiguous()?)
}

/// Sum of squares of the elementwise difference, as f64.
pub fn sq_dist(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    scalar_f64(&d.sqr()?.sum_all()?)
}
