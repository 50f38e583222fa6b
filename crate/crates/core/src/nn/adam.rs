//! Bias-corrected Adam over the parameters of a [`Module`].

use ndarray::Array2;

use super::layers::Module;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update using the gradients currently stored in `module`.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let first = m.is_empty();
        let mut idx = 0;
        let mut err = None;
        module.visit("", &mut |name, p| {
            if first {
                m.push(Array2::zeros(p.value.dim()));
                v.push(Array2::zeros(p.value.dim()));
            }
            if idx >= m.len() || m[idx].dim() != p.value.dim() {
                err.get_or_insert_with(|| invalid(format!("optimizer state does not match parameter {name}")));
                return;
            }
            let (mi, vi) = (&mut m[idx], &mut v[idx]);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(mi)
                .and(vi)
                .for_each(|w, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= c.lr * mh / (vh.sqrt() + c.eps);
                });
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Param;

    struct Vector(Param);

    impl Module for Vector {
        fn visit(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("x", &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut x = Vector(Param::new(Array2::from_elem((1, 3), 0.7)));
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut x).unwrap();
        assert!(x.0.value.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn descends_a_parabola() {
        let mut x = Vector(Param::new(Array2::from_elem((1, 1), 1.0)));
        let mut opt = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
        x.0.grad[[0, 0]] = 2.0;
        opt.step(&mut x).unwrap();
        assert!(x.0.value[[0, 0]] < 1.0);
    }

    #[test]
    fn matches_reference_trace_on_quadratic() {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let init: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) / 3.0).collect();
        let mut x = Vector(Param::new(Array2::from_shape_vec((1, 10), init.clone()).unwrap()));
        let mut opt = AdamState::new(cfg);
        let (mut r, mut m, mut v) = (init, vec![0.0; 10], vec![0.0; 10]);
        for step in 1..=200 {
            x.0.grad = x.0.value.mapv(|w| 2.0 * w);
            opt.step(&mut x).unwrap();
            for i in 0..10 {
                let g = 2.0 * r[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(step));
                let vh = v[i] / (1.0 - 0.999f64.powi(step));
                r[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..10 {
            assert!((x.0.value[[0, i]] - r[i]).abs() < 1e-12);
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }
}
