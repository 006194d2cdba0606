use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::PartitionOptimizer;
use crate::error::{invalid, Error, Result};
use crate::losses::{
    assemble_losses, contrastive_loss, diversity_loss, lsgan_d, lsgan_g, GanScores, LossBundle,
    UNIT_NORM_TOL, UNIT_NORM_TOL_F32,
};
use crate::networks::{FeatureTap, Negatives, Networks, Partition};
use crate::sampling::{
    bank_from_noise, build_patch_set_from_features, cosine_table, free_bank, in_image_bank,
    row_norms, sample_positions, EmbeddedPatchSet, HardnessSummary, NegativeBank, PositionSet,
};
use crate::tensor_ext::{all_finite, index_tensor, pixel_rows, randn, scalar_f64};

/// Parameters, optimizer states and step/epoch counters of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub nets: Networks,
    optimizers: BTreeMap<Partition, PartitionOptimizer>,
    pub global_step: u64,
    /// Next epoch to run.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(
            &config.model,
            config.negative_mode(),
            config.num_negatives,
            config.seed,
            config.precision,
        )?;
        Ok(Self::from_networks(nets, config))
    }

    pub fn from_networks(nets: Networks, config: &TrainConfig) -> Self {
        let optimizers = Partition::ALL
            .into_iter()
            .map(|p| (p, PartitionOptimizer::new(p, config.optimizer)))
            .collect();
        Self {
            nets,
            optimizers,
            global_step: 0,
            epoch: 0,
        }
    }

    pub fn optimizer(&self, p: Partition) -> &PartitionOptimizer {
        &self.optimizers[&p]
    }

    pub fn optimizer_mut(&mut self, p: Partition) -> &mut PartitionOptimizer {
        self.optimizers.get_mut(&p).expect("every partition has an optimizer")
    }

    fn update(&mut self, p: Partition, grads: &GradStore, lr: f64) -> Result<f64> {
        let set = self.nets.params.get(p).clone();
        self.optimizer_mut(p).step(&set, grads, lr)
    }
}

/// Randomness of step `step`: a dedicated stream of the run seed, so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Discriminator,
    Negative,
    Encoder,
}

/// Everything observable about one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub lr_scale: f64,
    /// Losses of the encoder phase; `l_n` and `ad_cont_neg` come from the
    /// negative phase, before the negative generators moved.
    pub losses: LossBundle,
    pub ad_cont_neg: f64,
    /// Query-negative cosine similarity per tap layer, encoder-phase banks.
    pub hardness: Vec<HardnessSummary>,
    /// L2 norm of each partition's parameter change.
    pub update_norms: BTreeMap<Partition, f64>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Optional introspection of a step: the random draws, the gradients each
/// partition was updated with, and parameter snapshots around each phase.
#[derive(Debug, Default)]
pub struct StepTrace {
    pub capture_snapshots: bool,
    /// `[image][layer]`.
    pub positions: Vec<Vec<PositionSet>>,
    /// `[image][layer]`, generated negatives only.
    pub noises: Vec<Vec<Option<Tensor>>>,
    pub grads: BTreeMap<Partition, BTreeMap<String, Tensor>>,
    /// `(None, start)`, then one entry after each phase.
    pub snapshots: Vec<(Option<Phase>, BTreeMap<Partition, BTreeMap<String, Tensor>>)>,
}

impl StepTrace {
    pub fn with_snapshots() -> Self {
        Self {
            capture_snapshots: true,
            ..Self::default()
        }
    }

    fn snapshot(&mut self, phase: Option<Phase>, nets: &Networks) -> Result<()> {
        if self.capture_snapshots {
            self.snapshots.push((phase, nets.params.snapshot()?));
        }
        Ok(())
    }

    fn record_grads(&mut self, nets: &Networks, p: Partition, grads: &GradStore) -> Result<()> {
        let mut out = BTreeMap::new();
        for (name, var) in nets.params.get(p).iter() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.copy()?.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            out.insert(name.clone(), g);
        }
        self.grads.insert(p, out);
        Ok(())
    }
}

/// Random draws of one (image, layer) cell.
struct CellDraws {
    pos: PositionSet,
    noise: Option<Tensor>,
    in_image: Option<NegativeBank>,
}

fn finite(t: &Tensor, what: &str, step: u64) -> Result<f64> {
    let v = scalar_f64(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
            step,
        });
    }
    Ok(v)
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let tol = if t.dtype() == DType::F64 {
        UNIT_NORM_TOL
    } else {
        UNIT_NORM_TOL_F32
    };
    if let Some(n) = row_norms(t)?.into_iter().find(|n| (n - 1.0).abs() > tol) {
        return Err(Error::Invariant(format!("{what} row has norm {n}")));
    }
    Ok(())
}

/// Sum over layers of the batch-mean diversity term; pairs are rows
/// `(2j, 2j+1)` of each raw bank.
fn bank_diversity(raw: &Tensor) -> Result<Option<Tensor>> {
    let n = raw.dims()[0];
    if n < 2 {
        return Ok(None);
    }
    let pairs = n / 2;
    let even: Vec<usize> = (0..pairs).map(|j| 2 * j).collect();
    let odd: Vec<usize> = (0..pairs).map(|j| 2 * j + 1).collect();
    let a = raw.index_select(&index_tensor(&even)?, 0)?;
    let b = raw.index_select(&index_tensor(&odd)?, 0)?;
    Ok(Some(diversity_loss(&a, &b)?))
}

fn add(acc: Option<Tensor>, t: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        Some(a) => (a + t)?,
        None => t,
    }))
}

/// Draws positions and negatives' randomness for every (image, layer).
fn draw_cells(
    nets: &Networks,
    taps_x: &[FeatureTap],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<CellDraws>>> {
    let batch = taps_x[0].features.dims()[0];
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut row = Vec::with_capacity(taps_x.len());
        for (l, tap) in taps_x.iter().enumerate() {
            let (_, _, h, w) = tap.features.dims4()?;
            let s = cfg.num_patches.min(h * w);
            let pos = sample_positions(h, w, s, rng)?.for_layer(l);
            let (noise, in_image) = match &nets.negatives {
                Negatives::Generator(gens) => {
                    let z = randn(rng, &[cfg.num_negatives, gens[l].noise_dim()], 1.0, nets.dtype())?;
                    (Some(z), None)
                }
                Negatives::Free(_) => (None, None),
                Negatives::InImage => {
                    let rows = pixel_rows(&tap.features.detach(), i)?;
                    let bank = in_image_bank(&rows, &nets.repnets[l], cfg.num_negatives, rng)?;
                    (None, Some(bank.detach()))
                }
            };
            row.push(CellDraws {
                pos,
                noise,
                in_image,
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Query/positive sets for every (image, layer), connected to θ_G and θ_H.
fn patch_sets(
    nets: &Networks,
    taps_x: &[FeatureTap],
    taps_y: &[FeatureTap],
    draws: &[Vec<CellDraws>],
) -> Result<Vec<Vec<EmbeddedPatchSet>>> {
    draws
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(l, cell)| {
                    let rows_x = pixel_rows(&taps_x[l].features, i)?;
                    let rows_y = pixel_rows(&taps_y[l].features, i)?;
                    let mut set =
                        build_patch_set_from_features(&rows_y, &rows_x, &nets.repnets[l], &cell.pos)?;
                    set.layer = l;
                    Ok(set)
                })
                .collect()
        })
        .collect()
}

/// Bank of one cell from the current negative model; connected to θ_N.
fn cell_bank(nets: &Networks, l: usize, cell: &CellDraws, ctx: &Tensor) -> Result<NegativeBank> {
    let mut bank = match &nets.negatives {
        Negatives::Generator(gens) => {
            let z = cell
                .noise
                .as_ref()
                .ok_or_else(|| Error::Invariant("generated bank without noise".into()))?;
            bank_from_noise(&ctx.detach(), &gens[l], z)?
        }
        Negatives::Free(banks) => free_bank(&banks[l])?,
        Negatives::InImage => cell
            .in_image
            .clone()
            .ok_or_else(|| Error::Invariant("in-image bank missing".into()))?,
    };
    bank.layer = l;
    Ok(bank)
}

/// Batch-mean adversarial contrastive loss and diversity term of the
/// negative phase; queries and positives enter as constants.
fn negative_objective(
    nets: &Networks,
    patches: &[Vec<EmbeddedPatchSet>],
    draws: &[Vec<CellDraws>],
    cfg: &TrainConfig,
) -> Result<(Tensor, Option<Tensor>)> {
    let batch = patches.len() as f64;
    let with_div = cfg.use_diversity_loss && matches!(nets.negatives, Negatives::Generator(_));
    let mut ad = None;
    let mut div = None;
    for (row, cells) in patches.iter().zip(draws) {
        for (l, (set, cell)) in row.iter().zip(cells).enumerate() {
            let bank = cell_bank(nets, l, cell, &set.ctx_mean)?;
            if cfg.check_unit_norms {
                check_unit_rows(&bank.k_neg, "k_neg")?;
            }
            let term = contrastive_loss(
                &set.q.detach(),
                &set.k_pos.detach(),
                &bank.k_neg,
                cfg.tau,
                cfg.reduction,
            )?;
            ad = add(ad, term)?;
            if with_div {
                if let Some(d) = bank_diversity(&bank.raw)? {
                    div = add(div, d)?;
                }
            }
        }
    }
    let ad = (ad.ok_or_else(|| invalid!("empty batch"))? / batch)?;
    let div = div.map(|d| d / batch).transpose()?;
    Ok((ad, div))
}

/// Banks regenerated from the current negative model, detached.
fn frozen_banks(
    nets: &Networks,
    patches: &[Vec<EmbeddedPatchSet>],
    draws: &[Vec<CellDraws>],
) -> Result<Vec<Vec<NegativeBank>>> {
    patches
        .iter()
        .zip(draws)
        .map(|(row, cells)| {
            row.iter()
                .zip(cells)
                .enumerate()
                .map(|(l, (set, cell))| Ok(cell_bank(nets, l, cell, &set.ctx_mean)?.detach()))
                .collect()
        })
        .collect()
}

/// Batch-mean contrastive loss against fixed banks, connected to θ_G, θ_H.
fn encoder_objective(
    patches: &[Vec<EmbeddedPatchSet>],
    banks: &[Vec<NegativeBank>],
    cfg: &TrainConfig,
) -> Result<Tensor> {
    let mut ad = None;
    for (row, brow) in patches.iter().zip(banks) {
        for (set, bank) in row.iter().zip(brow) {
            let term = contrastive_loss(&set.q, &set.k_pos, &bank.k_neg, cfg.tau, cfg.reduction)?;
            ad = add(ad, term)?;
        }
    }
    Ok((ad.ok_or_else(|| invalid!("empty batch"))? / patches.len() as f64)?)
}

fn check_batch(x: &Tensor, what: &str) -> Result<usize> {
    let (b, _, _, _) = x
        .dims4()
        .map_err(|_| invalid!("{what} batch must be [B, C, H, W], got {:?}", x.dims()))?;
    if b == 0 {
        return Err(invalid!("{what} batch is empty"));
    }
    Ok(b)
}

/// One alternating update: discriminator, then negative generators
/// (ascent on the contrastive loss), then image generator and
/// representation networks (descent against regenerated, frozen banks).
pub fn train_step(
    state: &mut TrainState,
    x: &Tensor,
    y_real: &Tensor,
    cfg: &TrainConfig,
    lr_scale: f64,
) -> Result<StepReport> {
    train_step_traced(state, x, y_real, cfg, lr_scale, None)
}

pub fn train_step_traced(
    state: &mut TrainState,
    x: &Tensor,
    y_real: &Tensor,
    cfg: &TrainConfig,
    lr_scale: f64,
    mut trace: Option<&mut StepTrace>,
) -> Result<StepReport> {
    let started = Instant::now();
    let step = state.global_step;
    check_batch(x, "source")?;
    check_batch(y_real, "target")?;
    let mut rng = step_rng(cfg.seed, step);
    let x = state.nets.cast(x)?;
    let y_real = state.nets.cast(y_real)?;
    for (t, what) in [(&x, "source batch"), (&y_real, "target batch")] {
        if !all_finite(t)? {
            return Err(Error::NonFinite {
                what: what.to_string(),
                step,
            });
        }
    }
    if let Some(t) = trace.as_deref_mut() {
        t.snapshot(None, &state.nets)?;
    }

    // Forward pass and all random draws of the step.
    let (y, taps_x) = state.nets.generator.forward(&x)?;
    let taps_y = state.nets.generator.encode_taps(&y)?;
    let draws = draw_cells(&state.nets, &taps_x, cfg, &mut rng)?;
    let patches = patch_sets(&state.nets, &taps_x, &taps_y, &draws)?;
    if cfg.check_unit_norms {
        for set in patches.iter().flatten() {
            check_unit_rows(&set.q, "q")?;
            check_unit_rows(&set.k_pos, "k_pos")?;
        }
    }
    if let Some(t) = trace.as_deref_mut() {
        t.positions = draws
            .iter()
            .map(|r| r.iter().map(|c| c.pos.clone()).collect())
            .collect();
        t.noises = draws
            .iter()
            .map(|r| r.iter().map(|c| c.noise.clone()).collect())
            .collect();
    }
    let mut update_norms = BTreeMap::new();

    // Discriminator phase.
    let d_real = state.nets.discriminator.forward(&y_real)?;
    let d_fake = state.nets.discriminator.forward(&y.detach())?;
    let loss_d = lsgan_d(&GanScores::new(d_real, d_fake))?;
    let gan_d = finite(&loss_d, "gan_d", step)?;
    let grads = loss_d.backward()?;
    if let Some(t) = trace.as_deref_mut() {
        t.record_grads(&state.nets, Partition::Discriminator, &grads)?;
    }
    let lr = cfg.lr.discriminator * lr_scale;
    update_norms.insert(
        Partition::Discriminator,
        state.update(Partition::Discriminator, &grads, lr)?,
    );
    if let Some(t) = trace.as_deref_mut() {
        t.snapshot(Some(Phase::Discriminator), &state.nets)?;
    }

    // Negative phase: ascend the contrastive loss, only θ_N moves.
    let (ad_n, div_t) = negative_objective(&state.nets, &patches, &draws, cfg)?;
    let ad_cont_neg = finite(&ad_n, "ad_cont (negative phase)", step)?;
    let div = match &div_t {
        Some(d) => finite(d, "div", step)?,
        None => 0.0,
    };
    let mut n_norm = 0.0;
    if !state.nets.params.neggens.is_empty() {
        let mut l_n = ad_n.neg()?;
        if let Some(d) = &div_t {
            l_n = (l_n + (d * cfg.weights.lambda_div)?)?;
        }
        let grads = l_n.backward()?;
        if let Some(t) = trace.as_deref_mut() {
            t.record_grads(&state.nets, Partition::NegGens, &grads)?;
        }
        n_norm = state.update(Partition::NegGens, &grads, cfg.lr.neggens * lr_scale)?;
    }
    update_norms.insert(Partition::NegGens, n_norm);
    if let Some(t) = trace.as_deref_mut() {
        t.snapshot(Some(Phase::Negative), &state.nets)?;
    }

    // Encoder phase: banks regenerated by the updated θ_N, then frozen.
    let banks = frozen_banks(&state.nets, &patches, &draws)?;
    let ad_e = encoder_objective(&patches, &banks, cfg)?;
    let ad_cont = finite(&ad_e, "ad_cont", step)?;
    let d_gen = state.nets.discriminator.forward(&y)?;
    let loss_g = lsgan_g(&GanScores::fake_only(d_gen))?;
    let gan_g = finite(&loss_g, "gan_g", step)?;
    let total = (&ad_e + (&loss_g * cfg.weights.lambda_gan)?)?;
    let grads = total.backward()?;
    if let Some(t) = trace.as_deref_mut() {
        t.record_grads(&state.nets, Partition::RepNets, &grads)?;
        t.record_grads(&state.nets, Partition::Generator, &grads)?;
    }
    update_norms.insert(
        Partition::RepNets,
        state.update(Partition::RepNets, &grads, cfg.lr.repnets * lr_scale)?,
    );
    update_norms.insert(
        Partition::Generator,
        state.update(Partition::Generator, &grads, cfg.lr.generator * lr_scale)?,
    );
    if let Some(t) = trace.as_deref_mut() {
        t.snapshot(Some(Phase::Encoder), &state.nets)?;
    }

    let mut hardness = Vec::with_capacity(taps_x.len());
    for l in 0..taps_x.len() {
        let mut values = Vec::new();
        for (row, brow) in patches.iter().zip(&banks) {
            values.extend(cosine_table(&row[l].q.detach(), &brow[l].k_neg)?.values);
        }
        hardness.push(HardnessSummary::from_values(&values));
    }

    let mut losses = assemble_losses(ad_cont, div, gan_g, cfg.weights)?;
    losses.gan_d = gan_d;
    losses.l_n = -ad_cont_neg + cfg.weights.lambda_div * div;
    for (p, n) in &update_norms {
        if !n.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{p} update"),
                step,
            });
        }
    }
    state.global_step += 1;
    Ok(StepReport {
        step,
        epoch: state.epoch,
        lr_scale,
        losses,
        ad_cont_neg,
        hardness,
        update_norms,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Contrastive loss before and after one isolated negative-phase update and
/// one isolated representation-network update on a fixed batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionProbe {
    pub ad_before: f64,
    pub ad_after_negative: f64,
    pub ad_after_repnet: f64,
}

impl DirectionProbe {
    pub fn negative_change(&self) -> f64 {
        self.ad_after_negative - self.ad_before
    }

    pub fn repnet_change(&self) -> f64 {
        self.ad_after_repnet - self.ad_after_negative
    }
}

/// Runs the negative-phase objective for one update of θ_N, then the
/// contrastive loss for one update of θ_H, each with a fresh optimizer at
/// learning rate `lr`, on frozen draws from `seed`. The image generator
/// and discriminator are not touched.
pub fn probe_adversarial_direction(
    nets: &Networks,
    x: &Tensor,
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
) -> Result<DirectionProbe> {
    check_batch(x, "source")?;
    let x = nets.cast(x)?;
    let mut rng = step_rng(seed, 0);
    let (y, taps_x) = nets.generator.forward(&x)?;
    let taps_x: Vec<FeatureTap> = taps_x
        .into_iter()
        .map(|t| FeatureTap {
            layer: t.layer,
            features: t.features.detach(),
        })
        .collect();
    let taps_y: Vec<FeatureTap> = nets
        .generator
        .encode_taps(&y.detach())?
        .into_iter()
        .map(|t| FeatureTap {
            layer: t.layer,
            features: t.features.detach(),
        })
        .collect();
    let draws = draw_cells(nets, &taps_x, cfg, &mut rng)?;
    let contrastive = |nets: &Networks| -> Result<(Vec<Vec<EmbeddedPatchSet>>, Tensor)> {
        let patches = patch_sets(nets, &taps_x, &taps_y, &draws)?;
        let banks = frozen_banks(nets, &patches, &draws)?;
        let ad = encoder_objective(&patches, &banks, cfg)?;
        Ok((patches, ad))
    };

    let (patches, ad) = contrastive(nets)?;
    let ad_before = scalar_f64(&ad)?;

    if !nets.params.neggens.is_empty() {
        let (ad_n, div) = negative_objective(nets, &patches, &draws, cfg)?;
        let mut l_n = ad_n.neg()?;
        if let Some(d) = div {
            l_n = (l_n + (d * cfg.weights.lambda_div)?)?;
        }
        let grads = l_n.backward()?;
        PartitionOptimizer::new(Partition::NegGens, cfg.optimizer).step(
            &nets.params.neggens,
            &grads,
            lr,
        )?;
    }
    let (_, ad) = contrastive(nets)?;
    let ad_after_negative = scalar_f64(&ad)?;

    let grads = ad.backward()?;
    PartitionOptimizer::new(Partition::RepNets, cfg.optimizer).step(
        &nets.params.repnets,
        &grads,
        lr,
    )?;
    let (_, ad) = contrastive(nets)?;
    Ok(DirectionProbe {
        ad_before,
        ad_after_negative,
        ad_after_repnet: scalar_f64(&ad)?,
    })
}

/// Query-negative cosine similarities of the model's own negatives and of
/// random in-image negatives, for the same queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardnessComparison {
    /// `[layer]` similarity values, every image and query.
    pub generated: Vec<Vec<f64>>,
    pub in_image: Vec<Vec<f64>>,
}

impl HardnessComparison {
    pub fn generated_summary(&self) -> HardnessSummary {
        HardnessSummary::from_values(&self.generated.concat())
    }

    pub fn in_image_summary(&self) -> HardnessSummary {
        HardnessSummary::from_values(&self.in_image.concat())
    }
}

pub fn compare_hardness(
    nets: &Networks,
    x: &Tensor,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<HardnessComparison> {
    check_batch(x, "source")?;
    let x = nets.cast(x)?;
    let mut rng = step_rng(seed, 0);
    let (y, taps_x) = nets.generator.forward(&x)?;
    let taps_y = nets.generator.encode_taps(&y)?;
    let draws = draw_cells(nets, &taps_x, cfg, &mut rng)?;
    let patches = patch_sets(nets, &taps_x, &taps_y, &draws)?;
    let banks = frozen_banks(nets, &patches, &draws)?;
    let layers = taps_x.len();
    let mut generated = vec![Vec::new(); layers];
    let mut in_image = vec![Vec::new(); layers];
    for (i, (row, brow)) in patches.iter().zip(&banks).enumerate() {
        for l in 0..layers {
            let q = row[l].q.detach();
            generated[l].extend(cosine_table(&q, &brow[l].k_neg)?.values);
            let rows_x = pixel_rows(&taps_x[l].features.detach(), i)?;
            let bank = in_image_bank(&rows_x, &nets.repnets[l], cfg.num_negatives, &mut rng)?;
            in_image[l].extend(cosine_table(&q, &bank.k_neg)?.values);
        }
    }
    Ok(HardnessComparison {
        generated,
        in_image,
    })
}

/// Mean pairwise L1 distance among raw generated negatives, averaged over
/// images and layers; 0 for in-image negatives.
pub fn negative_spread(nets: &Networks, x: &Tensor, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    check_batch(x, "source")?;
    if matches!(nets.negatives, Negatives::InImage) {
        return Ok(0.0);
    }
    let x = nets.cast(x)?;
    let mut rng = step_rng(seed, 0);
    let (y, taps_x) = nets.generator.forward(&x)?;
    let taps_y = nets.generator.encode_taps(&y)?;
    let draws = draw_cells(nets, &taps_x, cfg, &mut rng)?;
    let patches = patch_sets(nets, &taps_x, &taps_y, &draws)?;
    let banks = frozen_banks(nets, &patches, &draws)?;
    let all: Vec<&NegativeBank> = banks.iter().flatten().collect();
    let mut acc = 0.0;
    for bank in &all {
        acc += crate::sampling::mean_pairwise_l1(&bank.raw)?;
    }
    Ok(acc / all.len() as f64)
}
