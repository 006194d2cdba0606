use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::{LossWeights, QueryReduction, DEFAULT_TAU};
use crate::networks::{ModelConfig, NegativeMode, Partition, Precision};

/// Per-partition learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub generator: f64,
    pub repnets: f64,
    pub neggens: f64,
    pub discriminator: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self::uniform(2e-4)
    }
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            generator: lr,
            repnets: lr,
            neggens: lr,
            discriminator: lr,
        }
    }

    pub fn get(&self, p: Partition) -> f64 {
        match p {
            Partition::Generator => self.generator,
            Partition::RepNets => self.repnets,
            Partition::NegGens => self.neggens,
            Partition::Discriminator => self.discriminator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `θ ← θ - lr·g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Negatives used when the negative generator is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegSource {
    /// Random other patches of the source image.
    #[default]
    InImage,
    /// One learned bank per layer, ascended directly in embedding space.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub precision: Precision,
    pub lr: LearningRates,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// First epoch of the linear decay; `None` means half of `epochs`.
    pub decay_start: Option<usize>,
    pub tau: f64,
    /// Sampled positions per layer.
    pub num_patches: usize,
    /// Negatives per bank.
    pub num_negatives: usize,
    pub weights: LossWeights,
    pub reduction: QueryReduction,
    pub seed: u64,
    pub use_neg_generator: bool,
    pub use_diversity_loss: bool,
    pub neg_source: NegSource,
    /// Metrics are logged every this many steps.
    pub log_every: u64,
    /// Checkpoints and hardness histograms every this many epochs (the last
    /// epoch is always written).
    pub checkpoint_every: usize,
    /// Checks unit norms of every query, positive and negative each step.
    pub check_unit_norms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            precision: Precision::F32,
            lr: LearningRates::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 1,
            epochs: 20,
            decay_start: None,
            tau: DEFAULT_TAU,
            num_patches: 64,
            num_negatives: 256,
            weights: LossWeights::default(),
            reduction: QueryReduction::Mean,
            seed: 0,
            use_neg_generator: true,
            use_diversity_loss: true,
            neg_source: NegSource::InImage,
            log_every: 1,
            checkpoint_every: 5,
            check_unit_norms: cfg!(debug_assertions),
        }
    }
}

impl TrainConfig {
    pub fn negative_mode(&self) -> NegativeMode {
        match (self.use_neg_generator, self.neg_source) {
            (true, _) => NegativeMode::Generator,
            (false, NegSource::InImage) => NegativeMode::InImage,
            (false, NegSource::Free) => NegativeMode::Free,
        }
    }

    pub fn decay_start_epoch(&self) -> usize {
        self.decay_start.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for p in Partition::ALL {
            let lr = self.lr.get(p);
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(invalid!("lr.{}: must be finite and >= 0, got {lr}", lr_field(p)));
            }
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(invalid!("optimizer betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(invalid!("optimizer.eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(invalid!("epochs must be >= 1"));
        }
        if self.decay_start_epoch() > self.epochs {
            return Err(invalid!(
                "decay_start {} exceeds epochs {}",
                self.decay_start_epoch(),
                self.epochs
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid!("tau must be positive, got {}", self.tau));
        }
        if self.num_patches == 0 || self.num_negatives == 0 {
            return Err(invalid!("num_patches and num_negatives must be >= 1"));
        }
        let w = &self.weights;
        if !(w.lambda_gan >= 0.0 && w.lambda_div >= 0.0) {
            return Err(invalid!("loss weights must be >= 0"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(invalid!("log_every and checkpoint_every must be >= 1"));
        }
        Ok(())
    }
}

fn lr_field(p: Partition) -> &'static str {
    match p {
        Partition::Generator => "generator",
        Partition::RepNets => "repnets",
        Partition::NegGens => "neggens",
        Partition::Discriminator => "discriminator",
    }
}

/// Learning-rate multiplier for `epoch`: 1 before the decay start, then
/// linear towards 0 at the end of the last epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.epochs;
    if epoch >= total {
        return Err(invalid!("epoch {epoch} outside [0, {total})"));
    }
    let start = config.decay_start_epoch();
    if epoch < start {
        return Ok(1.0);
    }
    Ok(1.0 - (epoch - start) as f64 / (total - start) as f64)
}
