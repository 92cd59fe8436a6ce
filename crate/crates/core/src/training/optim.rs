//! Adam with bias correction and externally supplied learning rate.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: ADAM_EPS,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every var that received a gradient. With
    /// `lr == 0` the moments advance but parameters are left untouched.
    pub fn step(&mut self, vars: &BTreeMap<String, Var>, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            if lr != 0.0 {
                let m_hat = (&m / bc1)?;
                let v_hat = (&v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                var.set(&(var.as_tensor() - (update * lr)?)?)?;
            }
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.first
            .iter()
            .map(|(k, t)| (format!("{prefix}.m.{k}"), t.clone()))
            .chain(self.second.iter().map(|(k, t)| (format!("{prefix}.v.{k}"), t.clone())))
            .collect()
    }

    /// Restores moments saved by [`Adam::state_tensors`], casting to the
    /// parameters' dtype and checking shapes against them.
    pub fn restore(
        &mut self,
        prefix: &str,
        step: u64,
        saved: &BTreeMap<String, Tensor>,
        vars: &BTreeMap<String, Var>,
    ) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (name, var) in vars {
            for (kind, dst) in [("m", &mut self.first), ("v", &mut self.second)] {
                let key = format!("{prefix}.{kind}.{name}");
                if let Some(t) = saved.get(&key) {
                    if t.dims() != var.dims() {
                        return Err(Error::shape(format!("optimizer state `{key}`"), var.dims(), t.dims()));
                    }
                    dst.insert(name.clone(), t.to_dtype(var.dtype())?);
                }
            }
        }
        Ok(())
    }
}
