use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::config::{OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::networks::{ParamSet, Partition};
use crate::tensor_ext::scalar_f64;

/// Optimizer state of one partition.
///
/// A parameter absent from the gradient store is treated as having a zero
/// gradient, so moments keep decaying consistently.
#[derive(Debug, Clone)]
pub struct PartitionOptimizer {
    partition: Partition,
    config: OptimizerConfig,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl PartitionOptimizer {
    pub fn new(partition: Partition, config: OptimizerConfig) -> Self {
        Self {
            partition,
            config,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every variable of `set` and returns the L2 norm
    /// of the parameter change. With `lr == 0` parameters are left bitwise
    /// untouched while the moments still advance.
    pub fn step(&mut self, set: &ParamSet, grads: &GradStore, lr: f64) -> Result<f64> {
        if set.partition() != self.partition {
            return Err(Error::Invariant(format!(
                "optimizer for {} applied to {}",
                self.partition,
                set.partition()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.config;
        let mut sq_norm = 0.0;
        for (name, var) in set.iter() {
            // Gradients carry op history back into the step's graph; moments
            // built from them would keep every past graph alive.
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            let delta = match c.kind {
                OptimizerKind::Sgd => (g * lr)?,
                OptimizerKind::Adam => {
                    let m = match self.m.get(name) {
                        Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                        None => (&g * (1.0 - c.beta1))?,
                    };
                    let g2 = g.sqr()?;
                    let v = match self.v.get(name) {
                        Some(v) => ((v * c.beta2)? + (g2 * (1.0 - c.beta2))?)?,
                        None => (g2 * (1.0 - c.beta2))?,
                    };
                    let m_hat = (&m / (1.0 - c.beta1.powi(t)))?;
                    let v_hat = (&v / (1.0 - c.beta2.powi(t)))?;
                    let delta = (m_hat / (v_hat.sqrt()? + c.eps)?)?.affine(lr, 0.0)?;
                    self.m.insert(name.clone(), m.detach());
                    self.v.insert(name.clone(), v.detach());
                    delta
                }
            };
            if lr != 0.0 {
                sq_norm += scalar_f64(&delta.sqr()?.sum_all()?)?;
                var.set(&(var.as_tensor().detach() - delta.detach())?)?;
            }
        }
        Ok(sq_norm.sqrt())
    }

    /// Moment tensors keyed `opt/<partition>/{m,v}/<name>`, for checkpoints.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let p = self.partition.name();
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("opt/{p}/m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("opt/{p}/v/{k}"), t.clone());
        }
        out
    }

    /// Restores moments from [`state_tensors`](Self::state_tensors) output.
    pub fn load_state(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let p = self.partition.name();
        let m_prefix = format!("opt/{p}/m/");
        let v_prefix = format!("opt/{p}/v/");
        self.steps = steps;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(&m_prefix) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&v_prefix) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(())
    }
}
