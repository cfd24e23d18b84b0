use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A trainable tensor with its gradient and Nadam slots.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// First-moment accumulator.
    pub m: Vec<f64>,
    /// Second-moment accumulator.
    pub v: Vec<f64>,
    /// Number of optimizer steps applied.
    pub step: u64,
}

/// Batch-norm running statistics (not trainable).
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

/// Pending running-statistics update recorded by a train-mode batch norm.
#[derive(Clone, Debug)]
pub(crate) struct StatUpdate {
    pub id: StatsId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Owns every parameter and running-statistics buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<RunningStats>,
    by_name: HashMap<String, ParamId>,
    stats_by_name: HashMap<String, StatsId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.stats_by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name: name.clone(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> Result<StatsId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.stats_by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        let id = StatsId(self.stats.len());
        self.stats.push(RunningStats {
            name: name.clone(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        });
        self.stats_by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn stats_id(&self, name: &str) -> Option<StatsId> {
        self.stats_by_name.get(name).copied()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.params[id.0].name.starts_with(prefix))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let s = &mut self.stats[u.id.0];
            for (r, b) in s.mean.iter_mut().zip(&u.mean) {
                *r = super::kernels::BN_MOMENTUM * *r + (1.0 - super::kernels::BN_MOMENTUM) * b;
            }
            for (r, b) in s.var.iter_mut().zip(&u.var) {
                *r = super::kernels::BN_MOMENTUM * *r + (1.0 - super::kernels::BN_MOMENTUM) * b;
            }
            s.initialized = true;
        }
    }

    /// Round parameters, moments and running statistics to `f32`, the
    /// on-disk precision, so an in-memory model equals its reloaded checkpoint.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.snap_to_f32();
            p.m.iter_mut().for_each(|v| *v = *v as f32 as f64);
            p.v.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for s in &mut self.stats {
            s.mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
            s.var.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Nesterov-accelerated Adam with a constant momentum coefficient.
///
/// With `t` the step count after increment:
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
/// `m_hat = b1 m / (1 - b1^(t+1)) + (1-b1) g / (1 - b1^t)`,
/// `v_hat = v / (1 - b2^t)`, `w -= lr m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nadam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Nadam {
    pub fn new(lr: f64) -> Self {
        Nadam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Update the given parameters in place and zero their gradients.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = &store.params[id.0];
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        for &id in ids {
            let p = &mut store.params[id.0];
            p.step += 1;
            let t = p.step as i32;
            let b1 = self.beta1;
            let b2 = self.beta2;
            let c1_next = 1.0 - b1.powi(t + 1);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let grads = p.grad.data_mut();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let m_hat = b1 * p.m[i] / c1_next + (1.0 - b1) * g / c1;
                let v_hat = p.v[i] / c2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                grads[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let (mut store, id) = scalar_store(0.3);
        let opt = Nadam::new(0.1);
        // the first step from zero moments must not move the parameter
        opt.step(&mut store, &[id]).unwrap();
        assert_eq!(store.get(id).value.data()[0], 0.3);
        store.get_mut(id).v[0] = 0.25;
        opt.step(&mut store, &[id]).unwrap();
        assert_eq!(store.get(id).value.data()[0], 0.3);
        assert_eq!(store.get(id).m[0], 0.0);
        assert!((store.get(id).v[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad.data_mut()[0] = 1.0;
        let opt = Nadam::new(1e-3);
        opt.step(&mut store, &[id]).unwrap();
        // m = 0.1, v = 0.001, m_hat = 0.9*0.1/(1-0.81) + 0.1/0.1, v_hat = 1
        let m_hat = 0.9 * 0.1 / (1.0 - 0.81) + 1.0;
        let expected = 1.0 - 1e-3 * m_hat / (1.0 + 1e-8);
        assert!((store.get(id).value.data()[0] - expected).abs() < 1e-12);
        assert_eq!(store.get(id).grad.data()[0], 0.0);
        assert_eq!(store.get(id).step, 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad.data_mut()[0] = f64::NAN;
        let err = Nadam::new(1e-3).step(&mut store, &[id]).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(0.0)).unwrap();
        assert!(store.add("a", Tensor::scalar(0.0)).is_err());
        assert!(store.add_stats("a", 2).is_err());
    }
}
