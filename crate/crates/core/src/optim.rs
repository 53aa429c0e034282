//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ids: Vec<ParamId>, store: &ParamStore) -> Self {
        let m = ids.iter().map(|id| Tensor::zeros(store.value(*id).shape())).collect::<Vec<_>>();
        Adam {
            cfg,
            v: m.clone(),
            m,
            ids,
            step: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, id) in self.ids.iter().enumerate() {
            let p = store.get_mut(*id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] + c.weight_decay * *w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                *w -= c.lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.eps);
            }
        }
    }

    /// Moment arrays keyed by `<prefix>.m.<param>` / `<prefix>.v.<param>`,
    /// plus the step counter as a one-element array.
    pub fn state_arrays(&self, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}.step"), Tensor::full(&[1], self.step as f64))];
        for (k, id) in self.ids.iter().enumerate() {
            let name = &store.get(*id).name;
            out.push((format!("{prefix}.m.{name}"), self.m[k].clone()));
            out.push((format!("{prefix}.v.{name}"), self.v[k].clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, store: &ParamStore, arrays: &[(String, Tensor)]) -> Result<()> {
        let find = |key: String| -> Result<&Tensor> {
            arrays
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::parse("optimizer state", format!("missing `{key}`")))
        };
        self.step = find(format!("{prefix}.step"))?.data()[0] as u64;
        for (k, id) in self.ids.iter().enumerate() {
            let name = &store.get(*id).name;
            let m = find(format!("{prefix}.m.{name}"))?;
            let v = find(format!("{prefix}.v.{name}"))?;
            if m.shape() != self.m[k].shape() || v.shape() != self.v[k].shape() {
                return Err(Error::Shape(format!("optimizer state for `{name}` has the wrong shape")));
            }
            self.m[k] = m.clone();
            self.v[k] = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap(), ParamGroup::Weights);
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.0), vec![id], &store);
        for _ in 0..300 {
            store.zero_grads();
            let x = store.value(id).clone();
            store.get_mut(id).grad = x.map(|v| 2.0 * v);
            adam.step(&mut store);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_leaves_values_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[3], 0.5), ParamGroup::Architecture);
        let before = store.value(id).clone();
        store.get_mut(id).grad = Tensor::full(&[3], 7.0);
        let mut adam = Adam::new(AdamConfig::new(0.0, 1e-3), vec![id], &store);
        adam.step(&mut store);
        assert_eq!(store.value(id), &before);
    }
}
