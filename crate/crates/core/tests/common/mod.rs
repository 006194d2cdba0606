#![allow(dead_code)]

pub mod dd;
pub mod step_fd;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gauss(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn units(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| unit(rng, n)).collect()
}

pub fn mat(rows: &[Vec<f64>]) -> Tensor {
    let m = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), m), &Device::Cpu).unwrap()
}

pub fn vec1(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x` (step `h`).
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Autograd gradient of `f` at a tensor with the shape of `like`.
pub fn autograd(like: &Tensor, x: &[f64], f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&Tensor::from_vec(x.to_vec(), like.dims(), &Device::Cpu).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    values(grads.get(var.as_tensor()).unwrap())
}

/// Brute-force InfoNCE averaged over queries, with the max-shift written out.
pub fn info_nce_oracle(q: &[Vec<f64>], kp: &[Vec<f64>], kn: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (qs, ks) in q.iter().zip(kp) {
        let mut logits = vec![dot(qs, ks) / tau];
        logits.extend(kn.iter().map(|k| dot(qs, k) / tau));
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        total += max + sum.ln() - logits[0];
    }
    total / q.len() as f64
}

/// A model small enough for many steps in a test: 16×16 images, four taps.
pub fn small_model() -> negcut::networks::ModelConfig {
    use negcut::networks::{DiscriminatorSpec, GeneratorSpec, ModelConfig, NegGenSpec, RepNetSpec};
    ModelConfig {
        generator: GeneratorSpec {
            width: 4,
            n_blocks: 1,
            tap_layers: vec![2, 5, 9, 13],
            ..GeneratorSpec::toy()
        },
        repnet: RepNetSpec { hidden: 16, out_dim: 16 },
        neggen: NegGenSpec { noise_dim: 4, hidden: 16, ..NegGenSpec::default() },
        discriminator: DiscriminatorSpec {
            width: 4,
            n_down: 2,
            ..DiscriminatorSpec::toy()
        },
    }
}

pub fn small_train_config(seed: u64) -> negcut::training::TrainConfig {
    negcut::training::TrainConfig {
        model: small_model(),
        num_patches: 8,
        num_negatives: 16,
        seed,
        epochs: 2,
        checkpoint_every: 1,
        check_unit_norms: true,
        ..Default::default()
    }
}

pub fn small_data(count: usize, seed: u64) -> negcut::data::UnpairedDataset {
    use negcut::data::{generate_synth_dataset, SynthConfig, UnpairedDataset};
    let cfg = SynthConfig {
        size: 16,
        count_a: count,
        count_b: count,
        seed,
        ..SynthConfig::default()
    };
    let (a, b) = generate_synth_dataset(&cfg).unwrap();
    UnpairedDataset::from_synth(&a, &b).unwrap()
}
