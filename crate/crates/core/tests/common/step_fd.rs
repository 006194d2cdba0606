//! Finite-difference check of every gradient one training step applies.
//!
//! The phase objectives are rebuilt here from public building blocks
//! (generator, representation networks, negative generators, losses) and
//! differentiated numerically around the parameters each phase started
//! from, using the positions and noise the step drew.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use negcut::losses::{contrastive_loss, diversity_loss, lsgan_d, lsgan_g, GanScores};
use negcut::networks::{
    DiscriminatorSpec, GeneratorSpec, ModelConfig, NegGenSpec, Negatives, Networks, NormKind, Partition,
    Precision, RepNetSpec,
};
use negcut::sampling::{bank_from_noise, build_patch_set_from_features, NegativeBank, PositionSet};
use negcut::tensor_ext::{index_tensor, pixel_rows};
use negcut::training::{
    train_step_traced, LearningRates, OptimizerConfig, OptimizerKind, StepTrace, TrainConfig, TrainState,
};

use super::{gauss, rel_err, rng, scalar, values};

pub const FD_STEP: f64 = 1e-5;

/// One-by-two-pixel images, one convolution, two taps, float64.
pub fn fd_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            generator: GeneratorSpec {
                in_channels: 3,
                out_channels: 3,
                width: 2,
                n_down: 0,
                n_blocks: 0,
                edge_kernel: 1,
                norm: NormKind::None,
                tap_layers: vec![2, 4],
            },
            repnet: RepNetSpec { hidden: 3, out_dim: 3 },
            neggen: NegGenSpec {
                noise_dim: 2,
                hidden: 3,
                ..NegGenSpec::default()
            },
            discriminator: DiscriminatorSpec {
                in_channels: 3,
                width: 2,
                n_down: 0,
                kernel: 1,
                padding: 0,
                norm: NormKind::None,
            },
        },
        precision: Precision::F64,
        lr: LearningRates::uniform(0.05),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::default()
        },
        batch_size: 2,
        num_patches: 2,
        num_negatives: 4,
        seed,
        check_unit_norms: true,
        ..TrainConfig::default()
    }
}

type Snapshot = BTreeMap<Partition, BTreeMap<String, Tensor>>;

fn networks_at(cfg: &TrainConfig, snap: &Snapshot) -> Networks {
    let nets = Networks::new(&cfg.model, cfg.negative_mode(), cfg.num_negatives, cfg.seed, cfg.precision).unwrap();
    for p in Partition::ALL {
        nets.params.get(p).load(&snap[&p]).unwrap();
    }
    nets
}

/// Central differences of `f` with respect to every scalar of `p`.
fn numeric_grads(nets: &Networks, p: Partition, f: &dyn Fn(&Networks) -> f64) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, var) in nets.params.get(p).iter() {
        let base = values(var.as_tensor());
        let shape = var.as_tensor().dims().to_vec();
        let mut g = Vec::with_capacity(base.len());
        let mut probe = base.clone();
        for i in 0..base.len() {
            let mut eval = |v: f64| {
                probe[i] = v;
                var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                f(nets)
            };
            let up = eval(base[i] + FD_STEP);
            let down = eval(base[i] - FD_STEP);
            probe[i] = base[i];
            g.push((up - down) / (2.0 * FD_STEP));
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        out.insert(name.clone(), g);
    }
    out
}

struct Cells {
    positions: Vec<Vec<PositionSet>>,
    noises: Vec<Vec<Tensor>>,
}

fn contrastive_terms(
    nets: &Networks,
    x: &Tensor,
    cells: &Cells,
    cfg: &TrainConfig,
    frozen: Option<&[Vec<NegativeBank>]>,
) -> (f64, f64, Vec<Vec<NegativeBank>>) {
    let (y, taps_x) = nets.generator.forward(x).unwrap();
    let taps_y = nets.generator.encode_taps(&y).unwrap();
    let Negatives::Generator(gens) = &nets.negatives else { panic!("generated negatives expected") };
    let batch = cells.positions.len();
    let (mut ad, mut div) = (0.0, 0.0);
    let mut banks = Vec::new();
    for i in 0..batch {
        let mut row = Vec::new();
        for l in 0..taps_x.len() {
            let rows_x = pixel_rows(&taps_x[l].features, i).unwrap();
            let rows_y = pixel_rows(&taps_y[l].features, i).unwrap();
            let set = build_patch_set_from_features(&rows_y, &rows_x, &nets.repnets[l], &cells.positions[i][l]).unwrap();
            let bank = match frozen {
                Some(b) => b[i][l].clone(),
                None => bank_from_noise(&set.ctx_mean, &gens[l], &cells.noises[i][l]).unwrap(),
            };
            ad += scalar(&contrastive_loss(&set.q, &set.k_pos, &bank.k_neg, cfg.tau, cfg.reduction).unwrap());
            let n = bank.raw.dims()[0];
            let even = index_tensor(&(0..n / 2).map(|j| 2 * j).collect::<Vec<_>>()).unwrap();
            let odd = index_tensor(&(0..n / 2).map(|j| 2 * j + 1).collect::<Vec<_>>()).unwrap();
            div += scalar(
                &diversity_loss(
                    &bank.raw.index_select(&even, 0).unwrap(),
                    &bank.raw.index_select(&odd, 0).unwrap(),
                )
                .unwrap(),
            );
            row.push(bank);
        }
        banks.push(row);
    }
    (ad / batch as f64, div / batch as f64, banks)
}

/// Worst norm-wise relative error, over every parameter tensor, between
/// the gradient a step applied and central differences of its phase
/// objective.
pub fn max_step_gradient_error(seed: u64) -> f64 {
    let cfg = fd_config(seed);
    let mut r = rng(seed);
    let mut image = || {
        let v: Vec<f64> = gauss(&mut r, 2 * 3 * 2).iter().map(|v| v.tanh()).collect();
        Tensor::from_vec(v, (2, 3, 1, 2), &Device::Cpu).unwrap()
    };
    let (x, y_real) = (image(), image());

    let mut state = TrainState::new(&cfg).unwrap();
    // Weights of order one, so the objectives are far from flat.
    for p in Partition::ALL {
        let set = state.nets.params.get(p);
        let fresh: BTreeMap<String, Tensor> = set
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor();
                let w: Vec<f64> = gauss(&mut r, t.elem_count()).iter().map(|g| 0.7 * g).collect();
                (k.clone(), Tensor::from_vec(w, t.dims(), &Device::Cpu).unwrap())
            })
            .collect();
        set.load(&fresh).unwrap();
    }

    let mut trace = StepTrace::with_snapshots();
    train_step_traced(&mut state, &x, &y_real, &cfg, 1.0, Some(&mut trace)).unwrap();
    let cells = Cells {
        positions: trace.positions.clone(),
        noises: trace
            .noises
            .iter()
            .map(|row| row.iter().map(|z| z.clone().expect("noise recorded")).collect())
            .collect(),
    };
    let snap = |i: usize| trace.snapshots[i].1.clone();
    let mut worst: f64 = 0.0;
    let mut compare = |p: Partition, numeric: BTreeMap<String, Vec<f64>>| {
        for (name, g) in numeric {
            worst = worst.max(rel_err(&values(&trace.grads[&p][&name]), &g));
        }
    };

    // Discriminator phase, from the initial parameters.
    let nets = networks_at(&cfg, &snap(0));
    let y_fake = nets.generator.translate(&x).unwrap().detach();
    let d_obj = |n: &Networks| {
        let scores = GanScores::new(n.discriminator.forward(&y_real).unwrap(), n.discriminator.forward(&y_fake).unwrap());
        scalar(&lsgan_d(&scores).unwrap())
    };
    compare(Partition::Discriminator, numeric_grads(&nets, Partition::Discriminator, &d_obj));

    // Negative phase: -ad + λ2·div, after the discriminator update.
    let nets = networks_at(&cfg, &snap(1));
    let n_obj = |n: &Networks| {
        let (ad, div, _) = contrastive_terms(n, &x, &cells, &cfg, None);
        -ad + cfg.weights.lambda_div * div
    };
    compare(Partition::NegGens, numeric_grads(&nets, Partition::NegGens, &n_obj));

    // Encoder phase: banks from the updated negative generators, frozen.
    let nets = networks_at(&cfg, &snap(2));
    let (_, _, banks) = contrastive_terms(&nets, &x, &cells, &cfg, None);
    let e_obj = |n: &Networks| {
        let (ad, _, _) = contrastive_terms(n, &x, &cells, &cfg, Some(&banks));
        let y = n.generator.translate(&x).unwrap();
        let gan = scalar(&lsgan_g(&GanScores::fake_only(n.discriminator.forward(&y).unwrap())).unwrap());
        ad + cfg.weights.lambda_gan * gan
    };
    compare(Partition::RepNets, numeric_grads(&nets, Partition::RepNets, &e_obj));
    compare(Partition::Generator, numeric_grads(&nets, Partition::Generator, &e_obj));
    worst
}
