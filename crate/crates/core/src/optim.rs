use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::vit::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = params.zeros_like().values;
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let c1 = one - T::from_f64(self.cfg.beta1.powi(t));
        let c2 = one - T::from_f64(self.cfg.beta2.powi(t));
        let lr = T::from_f64(self.cfg.learning_rate);
        let eps = T::from_f64(self.cfg.eps);
        for (((p, g), m), v) in params
            .entries_mut()
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamStore::<f64>::new();
        ps.register("w".into(), vec![2], vec![1.0, -1.0]);
        let mut g = ps.zeros_like();
        g.values[0] = vec![3.0, -0.5];
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.update(&mut ps, &g);
        // bias-corrected first step is lr * sign(g)
        assert!((ps.get(0)[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((ps.get(0)[1] - (-1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.register("w".into(), vec![1], vec![5.0]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &ps);
        for _ in 0..500 {
            let mut g = ps.zeros_like();
            g.values[0][0] = 2.0 * ps.get(0)[0];
            opt.update(&mut ps, &g);
        }
        assert!(ps.get(0)[0].abs() < 1e-2);
    }
}
