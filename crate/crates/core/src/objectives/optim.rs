use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut s = ParamStore::new();
            for (name, t) in p.iter() {
                s.insert(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Adam {
            m: zeros(params),
            v: zeros(params),
            config,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::invalid(format!("no optimizer state for {name}"))),
            };
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                *pi -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, -1.0, 0.5]));
        let mut g = ParamStore::new();
        g.insert("x", Tensor::vector(vec![3.0, -0.2, 0.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        adam.step(&mut p, &g).unwrap();
        let x = p.get("x").unwrap().data();
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((x[0] - 0.9).abs() < 1e-8);
        assert!((x[1] + 0.9).abs() < 1e-8);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![5.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        for _ in 0..500 {
            let x = p.get("x").unwrap().data()[0];
            let mut g = ParamStore::new();
            g.insert("x", Tensor::vector(vec![2.0 * (x - 2.0)]));
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p.get("x").unwrap().data()[0] - 2.0).abs() < 1e-2);
    }
}
