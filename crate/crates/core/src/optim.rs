//! First-order optimizers over `(param, grad)` buffer pairs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nets::TappedNetwork;

/// Anything exposing its trainable buffers in a fixed order.
pub trait Parameters {
    /// Grad buffers may be empty when no gradient has been accumulated yet.
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>));

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, g| g.iter_mut().for_each(|v| *v = 0.0));
    }
}

impl Parameters for TappedNetwork {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>)) {
        TappedNetwork::for_each_param(self, f);
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut dyn Parameters) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut idx = 0;
        params.for_each_param(&mut |p, g| {
            if velocity.len() <= idx {
                velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut velocity[idx];
            idx += 1;
            if g.is_empty() {
                return;
            }
            for ((w, &gw), vw) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let d = gw + wd * *w;
                *vw = mu * *vw + d;
                *w -= lr * *vw;
            }
        });
    }
}

/// Adam with coupled L2 weight decay (decay added to the gradient).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut dyn Parameters) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - libm::powf(b1, self.t as f32);
        let bc2 = 1.0 - libm::powf(b2, self.t as f32);
        let step = self.lr / bc1;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.for_each_param(&mut |p, g| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            if g.is_empty() {
                return;
            }
            for i in 0..p.len() {
                let d = g[i] + wd * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * d;
                v[i] = b2 * v[i] + (1.0 - b2) * d * d;
                p[i] -= step * m[i] / (libm::sqrtf(v[i] / bc2) + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        x: Vec<f32>,
        g: Vec<f32>,
    }

    impl Parameters for Quad {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>)) {
            f(&mut self.x, &mut self.g);
        }
    }

    impl Quad {
        // f(x) = sum (x - 3)^2
        fn grad(&mut self) {
            self.g = self.x.iter().map(|x| 2.0 * (x - 3.0)).collect();
        }
    }

    #[test]
    fn sgd_first_step_matches_hand_value() {
        let mut q = Quad { x: vec![1.0], g: vec![] };
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        q.grad();
        opt.step(&mut q);
        assert!((q.x[0] - 1.4).abs() < 1e-6);
        q.grad();
        opt.step(&mut q);
        // v = 0.9 * -4 + -3.2 = -6.8
        assert!((q.x[0] - 2.08).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut q = Quad { x: vec![1.0, 5.0], g: vec![] };
        let mut opt = Adam::new(0.01, 0.0);
        q.grad();
        opt.step(&mut q);
        assert!((q.x[0] - 1.01).abs() < 1e-6 && (q.x[1] - 4.99).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut q = Quad { x: vec![-2.0, 8.0], g: vec![] };
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            q.grad();
            opt.step(&mut q);
        }
        assert!(q.x.iter().all(|x| (x - 3.0).abs() < 1e-2));
    }

    #[test]
    fn empty_grads_are_skipped() {
        let mut q = Quad { x: vec![1.0], g: vec![] };
        Sgd::new(0.1, 0.9, 0.1).step(&mut q);
        Adam::new(0.1, 0.1).step(&mut q);
        assert_eq!(q.x, vec![1.0]);
    }
}
