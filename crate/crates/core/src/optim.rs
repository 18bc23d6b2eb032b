//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWSettings {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub settings: AdamWSettings,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    /// Moment buffers are created for exactly the tensors in `params`.
    pub fn new(settings: AdamWSettings, params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (k, p) in params.iter() {
            m.insert(k.clone(), Matrix::zeros(p.rows(), p.cols()));
        }
        Self {
            settings,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// The optimizer's parameter list.
    pub fn param_names(&self) -> Vec<String> {
        self.m.names().cloned().collect()
    }

    /// One update. Tensors without a gradient entry still receive weight decay
    /// and a moment update with a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let s = self.settings;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(m) = self.m.get_mut(name) else { continue };
            let v = self.v.get_mut(name).expect("moment buffers stay paired");
            let g = grads.get(name);
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = s.beta1 * md[i] + (1.0 - s.beta1) * gi;
                vd[i] = s.beta2 * vd[i] + (1.0 - s.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= s.lr * s.weight_decay * pd[i];
                pd[i] -= s.lr * mhat / (vhat.sqrt() + s.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWSettings::new(0.1, 0.0), &p);
        let g = BTreeMap::from([("w".to_string(), Matrix::from_vec(1, 2, vec![2.0, -0.5]))]);
        opt.step(&mut p, &g);
        let w = p.expect("w");
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::scalar(2.0));
        let mut opt = AdamW::new(AdamWSettings::new(0.5, 0.1), &p);
        opt.step(&mut p, &BTreeMap::new());
        assert!((p.expect("w").to_scalar() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Matrix::scalar(5.0));
        let mut opt = AdamW::new(AdamWSettings::new(0.1, 0.0), &p);
        for _ in 0..500 {
            let x = p.expect("x").to_scalar();
            let g = BTreeMap::from([("x".to_string(), Matrix::scalar(2.0 * (x - 1.0)))]);
            opt.step(&mut p, &g);
        }
        assert!((p.expect("x").to_scalar() - 1.0).abs() < 1e-2);
    }
}
