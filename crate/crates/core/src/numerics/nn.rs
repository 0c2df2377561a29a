//! Small layers shared by the encoder and the denoiser.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform(±1/√fan_in) weights, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w), false)?;
        tape.add_bias(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
