use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Adam; a non-zero weight decay is folded into the gradient (L2).
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

/// Adam/AdamW moments and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, 0.0)
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamW, learning_rate, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("optimizer_step", &[params.len()], &[grads.len()]));
        }
        if self.first.is_empty() {
            self.first = params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect();
            self.second = self.first.clone();
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("optimizer_step", params.get(id).shape(), g.shape()));
            }
            if self.first[id.index()].len() != g.len() {
                return Err(Error::shape(
                    "optimizer_moments",
                    &[self.first[id.index()].len()],
                    &[g.len()],
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        let wd = T::lit(self.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let mut gj = g.data()[j];
                if self.kind == OptimizerKind::Adam && self.weight_decay != 0.0 {
                    gj = gj + wd * p[j];
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                if self.kind == OptimizerKind::AdamW {
                    p[j] = p[j] - lr * wd * p[j];
                }
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected m̂ = v̂ = 1 so Δ = lr·1/(1+eps)
        let mut s = scalar_store(1.0);
        let mut opt = OptimizerState::adam(0.1);
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let p = s.get(s.find("p").unwrap()).item();
        assert!((p - 0.9).abs() < 1e-7, "{p}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut opt = OptimizerState::adam(0.1);
        for _ in 0..3 {
            opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(s.get(s.find("p").unwrap()).item(), 0.7);
    }

    #[test]
    fn adamw_decay_with_zero_gradient() {
        let mut s = scalar_store(2.0);
        let mut opt = OptimizerState::adamw(0.01, 0.5);
        opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        let p = s.get(s.find("p").unwrap()).item();
        assert!((p - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn gradient_shape_checked() {
        let mut s = scalar_store(1.0);
        let mut opt = OptimizerState::adam(0.1);
        assert!(opt.step(&mut s, &[Tensor::zeros(&[2])]).is_err());
        assert!(opt.step(&mut s, &[]).is_err());
    }
}
