//! Named parameter sets and their four-way partition.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ext::randn;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// The four disjoint trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// Image generator.
    #[serde(rename = "theta_G")]
    Generator,
    /// Per-layer representation networks.
    #[serde(rename = "theta_H")]
    RepNets,
    /// Per-layer negative generators (or free negative banks).
    #[serde(rename = "theta_N")]
    NegGens,
    /// Discriminator.
    #[serde(rename = "theta_D")]
    Discriminator,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Generator,
        Partition::RepNets,
        Partition::NegGens,
        Partition::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Generator => "theta_G",
            Partition::RepNets => "theta_H",
            Partition::NegGens => "theta_N",
            Partition::Discriminator => "theta_D",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Initialization rng for this partition: its own stream of the shared
    /// seed, so enabling or disabling one group never shifts another group's
    /// initial weights.
    pub fn init_rng(self, seed: u64) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.stream());
        rng
    }

    fn stream(self) -> u64 {
        match self {
            Partition::Generator => 1,
            Partition::RepNets => 2,
            Partition::NegGens => 3,
            Partition::Discriminator => 4,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Name-ordered variables of one partition.
#[derive(Debug, Clone)]
pub struct ParamSet {
    partition: Partition,
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new(partition: Partition) -> Self {
        Self {
            partition,
            vars: BTreeMap::new(),
        }
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::Invariant(format!(
                "duplicate parameter {name} in {}",
                self.partition
            )));
        }
        Ok(())
    }

    /// Deep copy of every value (detached tensors would alias the storage).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// True when every value is bitwise equal to `snapshot`.
    pub fn bitwise_eq(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<bool> {
        if snapshot.len() != self.vars.len() {
            return Ok(false);
        }
        for (k, v) in &self.vars {
            let Some(s) = snapshot.get(k) else {
                return Ok(false);
            };
            if !tensors_bitwise_eq(v.as_tensor(), s)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// L2 norm of the difference to `snapshot`.
    pub fn distance_to(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<f64> {
        let mut acc = 0.0;
        for (k, v) in &self.vars {
            if let Some(s) = snapshot.get(k) {
                acc += crate::tensor_ext::sq_dist(v.as_tensor(), s)?;
            }
        }
        Ok(acc.sqrt())
    }

    /// Overwrites values from a name-keyed map; every name must be present.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let src = values.get(k).ok_or_else(|| {
                Error::InvalidInput(format!("missing parameter {}/{k}", self.partition))
            })?;
            if src.dims() != v.dims() {
                return Err(Error::InvalidInput(format!(
                    "parameter {}/{k}: shape {:?}, expected {:?}",
                    self.partition,
                    src.dims(),
                    v.dims()
                )));
            }
            v.set(&src.to_dtype(v.dtype())?)?;
        }
        Ok(())
    }
}

pub fn tensors_bitwise_eq(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let eq = match a.dtype() {
        DType::F32 => {
            let x = a.flatten_all()?.to_vec1::<f32>()?;
            let y = b.flatten_all()?.to_vec1::<f32>()?;
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => {
            let x = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let y = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
    };
    Ok(eq)
}

/// θ_G, θ_H, θ_N, θ_D.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    pub generator: ParamSet,
    pub repnets: ParamSet,
    pub neggens: ParamSet,
    pub discriminator: ParamSet,
}

impl ParamPartition {
    pub fn get(&self, p: Partition) -> &ParamSet {
        match p {
            Partition::Generator => &self.generator,
            Partition::RepNets => &self.repnets,
            Partition::NegGens => &self.neggens,
            Partition::Discriminator => &self.discriminator,
        }
    }

    pub fn sets(&self) -> [&ParamSet; 4] {
        [
            &self.generator,
            &self.repnets,
            &self.neggens,
            &self.discriminator,
        ]
    }

    /// Checks that no variable (by tensor identity) belongs to two partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut total = 0;
        for set in self.sets() {
            for (name, var) in set.iter() {
                total += 1;
                if !ids.insert(var.as_tensor().id()) {
                    return Err(Error::Invariant(format!(
                        "parameter {}/{name} is shared with another partition",
                        set.partition
                    )));
                }
            }
        }
        debug_assert_eq!(ids.len(), total);
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<Partition, BTreeMap<String, Tensor>>> {
        Partition::ALL
            .into_iter()
            .map(|p| Ok((p, self.get(p).snapshot()?)))
            .collect()
    }
}

/// Creates parameters into a [`ParamSet`] under a dotted name prefix.
pub struct ParamBuilder<'a> {
    set: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(set: &'a mut ParamSet, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        Self {
            set,
            rng,
            prefix: String::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Child builder whose names are prefixed by `name.`.
    pub fn pp<'b>(&'b mut self, name: impl AsRef<str>) -> ParamBuilder<'b> {
        ParamBuilder {
            prefix: self.full_name(name.as_ref()),
            set: self.set,
            rng: self.rng,
            dtype: self.dtype,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let t = randn(self.rng, shape, std, self.dtype)?;
        self.register(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &candle_core::Device::Cpu)?;
        self.register(name, t)
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.set.insert(self.full_name(name), var.clone())?;
        Ok(var)
    }
}
