//! The four parametric components (image generator, representation
//! networks, negative generators, discriminator) and their parameter
//! partition.

pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod neggen;
pub mod params;
pub mod repnet;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{FeatureTap, Generator, GeneratorSpec};
pub use layers::NormKind;
pub use neggen::{generate_negative, NegGen, NegGenSpec};
pub use params::{ParamBuilder, ParamPartition, ParamSet, Partition};
pub use repnet::{embed_patches, RepNet, RepNetSpec};

use crate::error::{invalid, Result};

/// Floating-point precision of every tensor in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Where the negatives of each contrastive term come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Instance-wise negatives from the adversarial negative generators.
    Generator,
    /// Embeddings of random other patches of the source image.
    InImage,
    /// A learned bank of vectors per layer, ascended directly in embedding
    /// space and shared by all images.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub repnet: RepNetSpec,
    pub neggen: NegGenSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            generator: GeneratorSpec::toy(),
            repnet: RepNetSpec::default(),
            neggen: NegGenSpec::default(),
            discriminator: DiscriminatorSpec::toy(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            generator: GeneratorSpec::full_scale(),
            discriminator: DiscriminatorSpec {
                width: 64,
                ..DiscriminatorSpec::toy()
            },
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.repnet.out_dim == 0 || self.repnet.hidden == 0 {
            return Err(invalid!("representation network dimensions must be positive"));
        }
        if self.neggen.noise_dim == 0 || self.neggen.hidden == 0 {
            return Err(invalid!("negative generator dimensions must be positive"));
        }
        if self.discriminator.in_channels != self.generator.out_channels {
            return Err(invalid!(
                "discriminator sees {} channels but the generator emits {}",
                self.discriminator.in_channels,
                self.generator.out_channels
            ));
        }
        Ok(())
    }
}

/// Per-layer negative models.
#[derive(Debug, Clone)]
pub enum Negatives {
    Generator(Vec<NegGen>),
    /// One `[N, M]` bank per layer.
    Free(Vec<Var>),
    InImage,
}

impl Negatives {
    pub fn mode(&self) -> NegativeMode {
        match self {
            Negatives::Generator(_) => NegativeMode::Generator,
            Negatives::Free(_) => NegativeMode::Free,
            Negatives::InImage => NegativeMode::InImage,
        }
    }
}

/// All networks of the method plus the partition of their parameters.
#[derive(Debug, Clone)]
pub struct Networks {
    pub generator: Generator,
    pub repnets: Vec<RepNet>,
    pub negatives: Negatives,
    pub discriminator: Discriminator,
    pub params: ParamPartition,
    config: ModelConfig,
    n_free: usize,
    precision: Precision,
}

impl Networks {
    /// Fresh networks with N(0, 0.02) weights and zero biases.
    ///
    /// `n_free` is the bank size for [`NegativeMode::Free`] and ignored otherwise.
    pub fn new(
        config: &ModelConfig,
        mode: NegativeMode,
        n_free: usize,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        config.validate()?;
        let dtype = precision.dtype();
        let mut g_set = ParamSet::new(Partition::Generator);
        let mut h_set = ParamSet::new(Partition::RepNets);
        let mut n_set = ParamSet::new(Partition::NegGens);
        let mut d_set = ParamSet::new(Partition::Discriminator);

        let mut rng = Partition::Generator.init_rng(seed);
        let generator = Generator::new(
            &config.generator,
            &mut ParamBuilder::new(&mut g_set, &mut rng, dtype),
        )?;

        let mut rng = Partition::RepNets.init_rng(seed);
        let mut pb = ParamBuilder::new(&mut h_set, &mut rng, dtype);
        let repnets = config
            .generator
            .tap_channels()
            .into_iter()
            .enumerate()
            .map(|(i, c)| RepNet::new(c, &config.repnet, &mut pb.pp(format!("h{i}"))))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = Partition::NegGens.init_rng(seed);
        let mut pb = ParamBuilder::new(&mut n_set, &mut rng, dtype);
        let m = config.repnet.out_dim;
        let n_layers = config.generator.tap_layers.len();
        let negatives = match mode {
            NegativeMode::Generator => Negatives::Generator(
                (0..n_layers)
                    .map(|i| NegGen::new(m, &config.neggen, &mut pb.pp(format!("n{i}"))))
                    .collect::<Result<_>>()?,
            ),
            NegativeMode::Free => {
                if n_free == 0 {
                    return Err(invalid!("free negative bank needs N >= 1"));
                }
                Negatives::Free(
                    (0..n_layers)
                        .map(|i| pb.pp(format!("free{i}")).normal("bank", &[n_free, m], 1.0))
                        .collect::<Result<_>>()?,
                )
            }
            NegativeMode::InImage => Negatives::InImage,
        };

        let mut rng = Partition::Discriminator.init_rng(seed);
        let discriminator = Discriminator::new(
            &config.discriminator,
            &mut ParamBuilder::new(&mut d_set, &mut rng, dtype),
        )?;

        let params = ParamPartition {
            generator: g_set,
            repnets: h_set,
            neggens: n_set,
            discriminator: d_set,
        };
        params.check_disjoint()?;
        Ok(Self {
            generator,
            repnets,
            negatives,
            discriminator,
            params,
            config: config.clone(),
            n_free: if mode == NegativeMode::Free { n_free } else { 0 },
            precision,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn num_layers(&self) -> usize {
        self.repnets.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.repnet.out_dim
    }

    /// Moves an image batch to this model's dtype.
    pub fn cast(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.to_dtype(self.dtype())?)
    }
}
