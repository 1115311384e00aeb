//! Adam with bias correction; complex entries update re/im independently.

use crate::tape::{ParamGrads, ParamSet};
use crate::tensor::{Storage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments per real scalar, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.real_scalars()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    match t.storage() {
        Storage::Real(v) => v.clone(),
        Storage::Complex(v) => v.iter().flat_map(|z| [z.re, z.im]).collect(),
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamGrads, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let g = flat(&grads.grads[id.0]);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = params.get_mut(id);
        for (k, &gk) in g.iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            let upd = cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            if upd != 0.0 {
                p.set_scalar_at(k, p.scalar_at(k) - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::C64;

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::real(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        p.insert("k", Tensor::complex(&[1], vec![C64::new(0.3, -0.1)]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = params();
        let before = p.clone();
        let g = ParamGrads::zeros(&p);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut g = ParamGrads::zeros(&p);
        g.grads[0] = Tensor::real(&[3], vec![0.7, -3.0, 1e-3]).unwrap();
        g.grads[1] = Tensor::complex(&[1], vec![C64::new(2.0, -5.0)]).unwrap();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        adam_step(&mut p, &g, &mut s, &cfg);
        for id in p.ids() {
            let (a, b) = (before.get(id), p.get(id));
            for k in 0..a.real_scalars() {
                let step = a.scalar_at(k) - b.scalar_at(k);
                let sign = g.grads[id.0].scalar_at(k).signum();
                assert!((step - sign * 0.01).abs() < 1e-6 * 0.01 / 1e-3, "{step}");
            }
        }
    }
}
