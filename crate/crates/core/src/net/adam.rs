use serde::{Deserialize, Serialize};

use crate::net::model::Param;
use crate::net::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Updates are applied in parameter order, so a
/// run is bitwise reproducible given identical gradients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Param]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pv = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pv.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pv[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Param> {
        vec![Param { name: "w".into(), value: Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap() }]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Tensor::zeros([1, 1, 1, 3])]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        opt.step(&mut p, &[Tensor::from_vec([1, 1, 1, 3], vec![3.0, -1.0, 0.0]).unwrap()]);
        let d = p[0].value.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.9).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = params();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..2000 {
            let g = p[0].value.map(|x| 2.0 * (x - 3.0));
            opt.step(&mut p, &[g]);
        }
        assert!(p[0].value.data().iter().all(|&x| (x - 3.0).abs() < 1e-3));
    }
}
