//! Acceptance criteria 1 to 9, one PASS/FAIL line each.
//!
//! Runs as a plain binary so every line is printed. Exits non-zero if any
//! criterion fails. Runtime budgets are reported next to each result; they
//! refer to a desktop CPU and do not decide the outcome.

mod common;

use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use common::dd::frechet_oracle;
use common::step_fd::max_step_gradient_error;
use common::*;
use nalgebra::{DMatrix, DVector};
use negcut::data::{generate_synth_dataset, SynthConfig, SynthSample, UnpairedDataset};
use negcut::eval::{evaluate, frechet_distance, FeatureEmbedderConfig, GaussianStats};
use negcut::losses::*;
use negcut::networks::params::tensors_bitwise_eq;
use negcut::networks::{Partition, Precision};
use negcut::training::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// Criterion 1

fn loss_oracles() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let unit_batch = |r: &mut rand_chacha::ChaCha8Rng, s: usize, n: usize, m: usize| {
        (units(r, s, m), units(r, s, m), units(r, n, m))
    };
    for i in 0..200 {
        let (m, s, n) = (2 + i % 31, 1 + i % 7, 1 + (i * 13) % 40);
        let tau = 0.05 + 0.01 * (i % 20) as f64;
        let (q, kp, kn) = unit_batch(&mut r, s, n, m);
        let b = ContrastiveBatch::new(mat(&q), mat(&kp), mat(&kn), tau).unwrap();
        worst = worst.max((scalar(&info_nce(&b).unwrap()) - info_nce_oracle(&q, &kp, &kn, tau)).abs());
    }
    for i in 0..200 {
        let layers: Vec<_> = (0..1 + i % 5).map(|_| unit_batch(&mut r, 3, 9, 6)).collect();
        let batches: Vec<_> = layers
            .iter()
            .map(|(q, kp, kn)| ContrastiveBatch::new(mat(q), mat(kp), mat(kn), 0.07).unwrap())
            .collect();
        let want: f64 = layers.iter().map(|(q, kp, kn)| info_nce_oracle(q, kp, kn, 0.07)).sum();
        worst = worst.max((scalar(&patch_nce(&batches).unwrap()) - want).abs());
    }
    for i in 0..200 {
        let rows = 1 + i % 4;
        let (a, b) = (gauss(&mut r, rows * 32), gauss(&mut r, rows * 32));
        let want = -a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / rows as f64;
        let ta = Tensor::from_vec(a, (rows, 32), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b, (rows, 32), &Device::Cpu).unwrap();
        worst = worst.max((scalar(&diversity_loss(&ta, &tb).unwrap()) - want).abs());
    }
    for i in 0..200 {
        let (real, fake) = (gauss(&mut r, 1 + i % 9), gauss(&mut r, 1 + i % 5));
        let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
        let want_d = mean(&real, &|x| (1.0 - x).powi(2)) + mean(&fake, &|x| x * x);
        let want_g = mean(&fake, &|x| (1.0 - x).powi(2));
        let scores = GanScores::new(vec1(&real), vec1(&fake));
        worst = worst.max((scalar(&lsgan_d(&scores).unwrap()) - want_d).abs());
        worst = worst.max((scalar(&lsgan_g(&scores).unwrap()) - want_g).abs());
    }
    for _ in 0..200 {
        let v = gauss(&mut r, 5);
        let w = LossWeights {
            lambda_gan: v[3].abs(),
            lambda_div: v[4].abs(),
        };
        let b = assemble_losses(v[0], v[1], v[2], w).unwrap();
        worst = worst
            .max((b.l_h - v[0]).abs())
            .max((b.l_g - (v[0] + w.lambda_gan * v[2])).abs())
            .max((b.l_n - (-v[0] + w.lambda_div * v[1])).abs());
    }
    let e = vec![1.0, 0.0, 0.0];
    let mut uniform_err: f64 = 0.0;
    for n in [1usize, 16, 255] {
        let b = ContrastiveBatch::new(mat(&[e.clone()]), mat(&[e.clone()]), mat(&vec![e.clone(); n]), 0.07).unwrap();
        uniform_err = uniform_err.max((scalar(&info_nce(&b).unwrap()) - ((n + 1) as f64).ln()).abs());
    }
    outcome(
        worst < 1e-10 && uniform_err < 1e-9,
        format!("max oracle error {worst:.2e} (< 1e-10), uniform-logit error {uniform_err:.2e} (< 1e-9)"),
    )
}

// Criterion 2

fn fd_error(like: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let x = values(like);
    let analytic = autograd(like, &x, &f);
    let numeric = central_diff(&x, 1e-5, |p| {
        scalar(&f(&Tensor::from_vec(p.to_vec(), like.dims(), like.device()).unwrap()))
    });
    rel_err(&analytic, &numeric)
}

fn gradients() -> Outcome {
    let mut r = rng(102);
    let mut loss_worst: f64 = 0.0;
    for _ in 0..10 {
        let (q, kp, kn) = (mat(&units(&mut r, 4, 6)), mat(&units(&mut r, 4, 6)), mat(&units(&mut r, 8, 6)));
        let loss = |q: &Tensor, kp: &Tensor, kn: &Tensor| {
            contrastive_loss(q, kp, kn, 0.2, QueryReduction::Mean).unwrap()
        };
        loss_worst = loss_worst
            .max(fd_error(&q, |t| loss(t, &kp, &kn)))
            .max(fd_error(&kp, |t| loss(&q, t, &kn)))
            .max(fd_error(&kn, |t| loss(&q, &kp, t)));
        let (a, b) = (vec1(&gauss(&mut r, 16)), vec1(&gauss(&mut r, 16)));
        loss_worst = loss_worst
            .max(fd_error(&a, |t| diversity_loss(t, &b).unwrap()))
            .max(fd_error(&b, |t| diversity_loss(&a, t).unwrap()));
        let (real, fake) = (vec1(&gauss(&mut r, 6)), vec1(&gauss(&mut r, 6)));
        loss_worst = loss_worst
            .max(fd_error(&real, |t| lsgan_d(&GanScores::new(t.clone(), fake.clone())).unwrap()))
            .max(fd_error(&fake, |t| lsgan_d(&GanScores::new(real.clone(), t.clone())).unwrap()))
            .max(fd_error(&fake, |t| lsgan_g(&GanScores::fake_only(t.clone())).unwrap()));
    }
    let step_worst = (0..3).map(max_step_gradient_error).fold(0.0, f64::max);
    outcome(
        loss_worst < 1e-4 && step_worst < 1e-4,
        format!("loss inputs {loss_worst:.2e}, whole-step parameters {step_worst:.2e} (< 1e-4 relative)"),
    )
}

// Criterion 3

fn isolation() -> Outcome {
    let data = synth_data(&SynthConfig {
        count_a: 10,
        count_b: 10,
        seed: 3,
        ..SynthConfig::default()
    });
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg).unwrap();
    let mut violations = Vec::new();
    for step in 0..50 {
        let (x, y) = step_batch(&data, cfg.seed, step);
        let mut trace = StepTrace::with_snapshots();
        train_step_traced(&mut state, &x, &y, &cfg, 1.0, Some(&mut trace)).unwrap();
        let s = &trace.snapshots;
        let same = |a: usize, b: usize, p: Partition| {
            s[a].1[&p].iter().all(|(k, v)| tensors_bitwise_eq(v, &s[b].1[&p][k]).unwrap())
        };
        for p in [Partition::Generator, Partition::RepNets, Partition::Discriminator] {
            if !same(1, 2, p) {
                violations.push(format!("step {step}: negative phase moved {p}"));
            }
        }
        if !same(2, 3, Partition::NegGens) {
            violations.push(format!("step {step}: encoder phase moved {}", Partition::NegGens));
        }
    }
    outcome(
        violations.is_empty(),
        if violations.is_empty() {
            "50 steps, no cross-phase parameter change".to_string()
        } else {
            violations.join("; ")
        },
    )
}

// Criterion 4

fn adversarial_direction() -> Outcome {
    let data = synth_data(&SynthConfig {
        count_a: 2,
        count_b: 2,
        seed: 4,
        ..SynthConfig::default()
    });
    let x = UnpairedDataset::batch(&data.a, &[0]).unwrap();
    let (mut up, mut down) = (0, 0);
    for trial in 0..20 {
        let cfg = TrainConfig {
            seed: trial,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&cfg).unwrap();
        let probe = probe_adversarial_direction(&state.nets, &x, &cfg, 1e-5, trial).unwrap();
        up += (probe.negative_change() >= 0.0) as usize;
        down += (probe.repnet_change() <= 0.0) as usize;
    }
    outcome(
        up >= 18 && down >= 18,
        format!("negative phase raised the loss in {up}/20, representation phase lowered it in {down}/20 (>= 18 each)"),
    )
}

// Criterion 5

fn random_spd(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_row_slice(d, d, &gauss(r, d * d));
    &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05
}

fn frechet_suite() -> Outcome {
    let mut r = rng(105);
    let stats = |mu: Vec<f64>, s: DMatrix<f64>| GaussianStats::new(DVector::from_vec(mu), s).unwrap();
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() };
    let (mut self_err, mut mean_err, mut oracle_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for d in 1..=8 {
        let s = stats(gauss(&mut r, d), random_spd(&mut r, d));
        self_err = self_err.max(frechet_distance(&s, &s).unwrap().abs());
        let sigma = random_spd(&mut r, d);
        let (ma, mb) = (gauss(&mut r, d), gauss(&mut r, d));
        let want: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum();
        let got = frechet_distance(&stats(ma, sigma.clone()), &stats(mb, sigma)).unwrap();
        mean_err = mean_err.max((got - want).abs());
    }
    for i in 0..100 {
        let d = 1 + i % 8;
        let (sa, sb) = (random_spd(&mut r, d), random_spd(&mut r, d));
        let (ma, mb) = (gauss(&mut r, d), gauss(&mut r, d));
        let want = frechet_oracle(&ma, &rows(&sa), &mb, &rows(&sb));
        let got = frechet_distance(&stats(ma, sa), &stats(mb, sb)).unwrap();
        oracle_err = oracle_err.max((got - want).abs() / want.abs());
    }
    outcome(
        self_err < 1e-10 && mean_err < 1e-8 && oracle_err < 1e-6,
        format!(
            "identical stats {self_err:.2e}, equal covariances {mean_err:.2e} (< 1e-8), \
             oracle relative {oracle_err:.2e} on 100 pairs (< 1e-6)"
        ),
    )
}

// Criteria 6 and 7 share the lambda_div = 1 runs.

const TOY_STEPS: u64 = 500;
const SEEDS: [u64; 3] = [0, 1, 2];

fn synth_data(cfg: &SynthConfig) -> UnpairedDataset {
    let (a, b) = generate_synth_dataset(cfg).unwrap();
    UnpairedDataset::from_synth(&a, &b).unwrap()
}

fn step_batch(data: &UnpairedDataset, seed: u64, step: u64) -> (Tensor, Tensor) {
    let n = data.a.len();
    let epoch = step as usize / n;
    let k = step as usize % n;
    let ia = epoch_permutation(seed, epoch, 0, n)[k];
    let ib = epoch_permutation(seed, epoch, 1, data.b.len())[k % data.b.len()];
    (
        UnpairedDataset::batch(&data.a, &[ia]).unwrap(),
        UnpairedDataset::batch(&data.b, &[ib]).unwrap(),
    )
}

struct ToyRun {
    hardness_gap: f64,
    generated: f64,
    in_image: f64,
    spread: f64,
}

fn toy_run(seed: u64, lambda_div: f64) -> ToyRun {
    let data = synth_data(&SynthConfig {
        seed,
        ..SynthConfig::default()
    });
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.weights.lambda_div = lambda_div;
    let mut state = TrainState::new(&cfg).unwrap();
    for step in 0..TOY_STEPS {
        let (x, y) = step_batch(&data, seed, step);
        train_step(&mut state, &x, &y, &cfg, 1.0).unwrap();
    }
    let probe = UnpairedDataset::batch(&data.a, &[0, 1, 2, 3]).unwrap();
    let cmp = compare_hardness(&state.nets, &probe, &cfg, 1).unwrap();
    let (generated, in_image) = (cmp.generated_summary().mean, cmp.in_image_summary().mean);
    ToyRun {
        hardness_gap: generated - in_image,
        generated,
        in_image,
        spread: negative_spread(&state.nets, &probe, &cfg, 1).unwrap(),
    }
}

fn hardness_shift(runs: &[ToyRun]) -> Outcome {
    let gap = runs.iter().map(|r| r.hardness_gap).sum::<f64>() / runs.len() as f64;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3} vs {:.3}", r.generated, r.in_image))
        .collect();
    outcome(
        gap >= 0.05,
        format!(
            "mean gap {gap:.3} (>= 0.05); generated vs in-image per seed: {}",
            per_seed.join(", ")
        ),
    )
}

fn collapse(with_div: &[ToyRun], without_div: &[ToyRun]) -> Outcome {
    let wins = with_div
        .iter()
        .zip(without_div)
        .filter(|(a, b)| b.spread < 0.5 * a.spread)
        .count();
    let pairs: Vec<String> = with_div
        .iter()
        .zip(without_div)
        .map(|(a, b)| format!("{:.3} vs {:.3}", b.spread, a.spread))
        .collect();
    outcome(
        wins >= 2,
        format!(
            "spread without vs with diversity: {} ({wins}/3 below half, need 2)",
            pairs.join(", ")
        ),
    )
}

// Criterion 8

fn end_to_end() -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let synth = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let (a, b) = generate_synth_dataset(&synth).unwrap();
        let data = UnpairedDataset::from_synth(&a, &b).unwrap();
        let held_out = SynthConfig {
            seed: seed + 1000,
            ..synth.clone()
        };
        let (ea, eb) = generate_synth_dataset(&held_out).unwrap();
        let tensors = |s: &[SynthSample]| -> Vec<Tensor> { s.iter().map(|x| x.tensor().unwrap()).collect() };
        let (sources, targets) = (tensors(&ea), tensors(&eb));
        let masks: Vec<_> = ea.iter().map(|s| s.mask.clone()).collect();

        let cfg = TrainConfig {
            seed,
            epochs: 30,
            checkpoint_every: 30,
            ..TrainConfig::default()
        };
        let embedder = FeatureEmbedderConfig::default();
        let untrained = TrainState::new(&cfg).unwrap();
        let before = evaluate(&untrained.nets, &sources, Some(&masks), &targets, &embedder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = train_loop(
            &data,
            &cfg,
            &RunOptions {
                out_dir: dir.path().to_path_buf(),
                resume: None,
            },
        )
        .unwrap();
        let after = evaluate(&run.state.nets, &sources, Some(&masks), &targets, &embedder).unwrap();
        let corr = after.correspondence.unwrap();
        let pass = corr >= 0.6 && after.frechet < before.frechet;
        ok += pass as usize;
        lines.push(format!(
            "seed {seed}: correspondence {corr:.3}, Frechet {:.3} vs untrained {:.3}",
            after.frechet, before.frechet
        ));
    }
    outcome(ok >= 2, format!("{ok}/3 seeds pass (need 2); {}", lines.join("; ")))
}

// Criterion 9

fn reproducibility() -> Outcome {
    let data = synth_data(&SynthConfig {
        count_a: 4,
        count_b: 4,
        seed: 9,
        ..SynthConfig::default()
    });
    let cfg = TrainConfig {
        seed: 9,
        epochs: 2,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let logs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let out = train_loop(
                &data,
                &cfg,
                &RunOptions {
                    out_dir: dir.path().to_path_buf(),
                    resume: None,
                },
            )
            .unwrap();
            std::fs::read(out.metrics_path).unwrap()
        })
        .collect();
    outcome(
        !logs[0].is_empty() && logs[0] == logs[1],
        format!("two runs, metrics logs of {} and {} bytes, identical: {}", logs[0].len(), logs[1].len(), logs[0] == logs[1]),
    )
}

fn report(id: u32, budget: Option<Duration>, started: Instant, o: Outcome) -> bool {
    let took = started.elapsed();
    let time = match budget {
        Some(b) => format!("{:.1}s, budget {}s", took.as_secs_f64(), b.as_secs()),
        None => format!("{:.1}s", took.as_secs_f64()),
    };
    println!(
        "criterion {id}: {} | {} | {time}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, Some(Duration::from_secs(10)), t, loss_oracles());
    let t = Instant::now();
    all &= report(2, Some(Duration::from_secs(120)), t, gradients());
    let t = Instant::now();
    all &= report(3, None, t, isolation());
    let t = Instant::now();
    all &= report(4, None, t, adversarial_direction());
    let t = Instant::now();
    all &= report(5, Some(Duration::from_secs(30)), t, frechet_suite());

    let t = Instant::now();
    let with_div: Vec<ToyRun> = SEEDS.iter().map(|&s| toy_run(s, 1.0)).collect();
    all &= report(6, Some(Duration::from_secs(20 * 60)), t, hardness_shift(&with_div));
    // The lambda_div = 1 runs count towards this criterion's runtime too.
    let without_div: Vec<ToyRun> = SEEDS.iter().map(|&s| toy_run(s, 0.0)).collect();
    all &= report(7, Some(Duration::from_secs(40 * 60)), t, collapse(&with_div, &without_div));

    let t = Instant::now();
    all &= report(8, Some(Duration::from_secs(3600)), t, end_to_end());
    let t = Instant::now();
    all &= report(9, None, t, reproducibility());
    if !all {
        std::process::exit(1);
    }
}
