//! First-order optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// SGD with classical momentum and decoupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((x, &gx), vx) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gx = gx + wd * *x;
                *vx = mu * *vx + gx;
                *x -= lr * *vx;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Cosine decay over `total` steps after a linear warmup of `warmup` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    /// Learning rate at 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let s = CosineSchedule { base_lr: 1.0, warmup: 2, total: 10 };
        assert_eq!(s.lr(0), 0.5);
        assert_eq!(s.lr(1), 1.0);
        assert_eq!(s.lr(2), 1.0);
        assert!((s.lr(6) - 0.5).abs() < 1e-12);
        assert!(s.lr(9) < s.lr(8));
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut x = Matrix::from_vec(1, 2, vec![3.0f64, -2.0]);
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..200 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[g], 0.05);
        }
        assert!(x.max_abs() < 1e-3);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Matrix::from_vec(1, 2, vec![3.0f64, -2.0]);
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[g], 0.01);
        }
        assert!(x.max_abs() < 1e-2);
    }
}
