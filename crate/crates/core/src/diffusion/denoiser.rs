//! Task-conditioned noise predictor.
//!
//! Input is `[h ‖ y_t]`; three conditional layers each apply a linear map,
//! inject the timestep/task condition, then Softplus. The condition is
//! injected by element-wise modulation (default), by concatenation, or by
//! single-head cross-attention over the timestep and task tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Linear, ParamId, ParamStore, Real, Seeds, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Em,
    Concat,
    Xattn,
}

pub const COND_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub tasks: usize,
    pub steps: usize,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CrossAttn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub store: ParamStore<T>,
    time_table: ParamId,
    task_table: ParamId,
    fusion: Option<(Linear, Linear)>,
    layers: Vec<Linear>,
    xattn: Vec<CrossAttn>,
    out: Linear,
}

/// One batch of denoiser inputs.
pub struct DenoiseInput<'a, T> {
    /// `[B, input_dim]`, already standardized.
    pub h: &'a Tensor<T>,
    /// `[B, 1]`.
    pub y_t: &'a Tensor<T>,
    pub t: &'a [usize],
    pub task: &'a [usize],
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seeds: &Seeds) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.tasks == 0 || config.steps == 0 {
            return Err(Error::Config(format!("invalid denoiser configuration {config:?}")));
        }
        let mut rng = seeds.stream("denoiser-init", &[]);
        let dn = config.hidden;
        let mut store = ParamStore::new();
        let time_table = store.normal("time_embedding", &[config.steps + 1, dn], 1.0, &mut rng);
        let task_table = store.normal("task_embedding", &[config.tasks, dn], 1.0, &mut rng);
        let fusion = match config.conditioning {
            Conditioning::Xattn => None,
            _ => {
                let f1 = Linear::new(&mut store, "fusion.1", 2 * dn, dn, &mut rng);
                let f2 = Linear::new(&mut store, "fusion.2", dn, dn, &mut rng);
                // modulation starts close to identity
                *store.get_mut(f2.b) = Tensor::ones(&[dn]);
                Some((f1, f2))
            }
        };
        let extra = if config.conditioning == Conditioning::Concat {
            dn
        } else {
            0
        };
        let mut layers = Vec::with_capacity(COND_LAYERS);
        let mut xattn = Vec::new();
        for i in 0..COND_LAYERS {
            let fan_in = if i == 0 { config.input_dim + 1 } else { dn };
            layers.push(Linear::new(
                &mut store,
                &format!("cond{i}"),
                fan_in + extra,
                dn,
                &mut rng,
            ));
            if config.conditioning == Conditioning::Xattn {
                xattn.push(CrossAttn {
                    q: Linear::new(&mut store, &format!("cond{i}.xattn.q"), dn, dn, &mut rng),
                    k: Linear::new(&mut store, &format!("cond{i}.xattn.k"), dn, dn, &mut rng),
                    v: Linear::new(&mut store, &format!("cond{i}.xattn.v"), dn, dn, &mut rng),
                    o: Linear::new(&mut store, &format!("cond{i}.xattn.o"), dn, dn, &mut rng),
                });
            }
        }
        // zero output: the untrained model predicts no noise
        let out = Linear::zeroed(&mut store, "out", dn, 1);
        Ok(Denoiser {
            config,
            store,
            time_table,
            task_table,
            fusion,
            layers,
            xattn,
            out,
        })
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            store: self.store.cast(),
            time_table: self.time_table,
            task_table: self.task_table,
            fusion: self.fusion,
            layers: self.layers.clone(),
            xattn: self.xattn.clone(),
            out: self.out,
        }
    }

    pub fn task_table(&self) -> ParamId {
        self.task_table
    }

    /// Rebuild the task table for `tasks` tasks, keeping rows that already exist.
    pub fn with_tasks(&self, tasks: usize, seeds: &Seeds) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.tasks = tasks;
        let mut fresh = Denoiser::<T>::new(cfg, seeds)?;
        for id in self.store.ids() {
            let name = self.store.name(id);
            let target = fresh.store.find(name).expect("same layout");
            if id == self.task_table {
                let dn = self.config.hidden;
                let keep = self.config.tasks.min(tasks) * dn;
                let dst = fresh.store.get_mut(target).data_mut();
                dst[..keep].copy_from_slice(&self.store.get(id).data()[..keep]);
            } else {
                fresh.store.set(target, self.store.get(id).clone())?;
            }
        }
        Ok(fresh)
    }

    /// Fused modulation vector `γ_{t,u}`: `[B, d_dn]`.
    pub fn condition(&self, tape: &mut Tape<T>, p: &Bound, t: &[usize], task: &[usize]) -> Result<Var> {
        let (gt, gu) = self.tokens(tape, p, t, task)?;
        let (f1, f2) = self
            .fusion
            .ok_or_else(|| Error::Config("cross-attention conditioning has no fused vector".into()))?;
        let c = tape.concat_cols(&[gt, gu])?;
        let c = f1.forward(tape, p, c)?;
        let c = tape.softplus(c);
        f2.forward(tape, p, c)
    }

    fn tokens(&self, tape: &mut Tape<T>, p: &Bound, t: &[usize], task: &[usize]) -> Result<(Var, Var)> {
        if let Some(&bad) = task.iter().find(|&&u| u >= self.config.tasks) {
            return Err(Error::Data(format!(
                "unknown task {bad} (model has {} tasks)",
                self.config.tasks
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s > self.config.steps) {
            return Err(Error::Config(format!("timestep {bad} beyond {}", self.config.steps)));
        }
        let gt = tape.gather_rows(p.var(self.time_table), t)?;
        let gu = tape.gather_rows(p.var(self.task_table), task)?;
        Ok((gt, gu))
    }

    /// Predicted noise `[B, 1]`. `modulation` overrides `γ_{t,u}` (EM mode only).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &DenoiseInput<'_, T>,
        modulation: Option<Var>,
    ) -> Result<Var> {
        let b = input.h.rows();
        if input.h.cols() != self.config.input_dim
            || input.y_t.len() != b
            || input.t.len() != b
            || input.task.len() != b
        {
            return Err(Error::shape("denoiser input", input.h.shape(), input.y_t.shape()));
        }
        let h = tape.constant(input.h.clone());
        let y = tape.constant(input.y_t.clone().reshape(&[b, 1])?);
        let mut x = tape.concat_cols(&[h, y])?;
        let dn = self.config.hidden;
        match self.config.conditioning {
            Conditioning::Em => {
                let g = match modulation {
                    Some(g) => g,
                    None => self.condition(tape, p, input.t, input.task)?,
                };
                for layer in &self.layers {
                    let z = layer.forward(tape, p, x)?;
                    let z = tape.mul(g, z)?;
                    x = tape.softplus(z);
                }
            }
            Conditioning::Concat => {
                let g = self.condition(tape, p, input.t, input.task)?;
                for layer in &self.layers {
                    let xin = tape.concat_cols(&[x, g])?;
                    let z = layer.forward(tape, p, xin)?;
                    x = tape.softplus(z);
                }
            }
            Conditioning::Xattn => {
                let (gt, gu) = self.tokens(tape, p, input.t, input.task)?;
                for (layer, xa) in self.layers.iter().zip(&self.xattn) {
                    let z = layer.forward(tape, p, x)?;
                    let q = xa.q.forward(tape, p, z)?;
                    let score = |tape: &mut Tape<T>, tok: Var| -> Result<Var> {
                        let k = xa.k.forward(tape, p, tok)?;
                        let qk = tape.mul(q, k)?;
                        let s = tape.row_sum(qk);
                        Ok(tape.scale(s, 1.0 / (dn as f64).sqrt()))
                    };
                    let (st, su) = (score(tape, gt)?, score(tape, gu)?);
                    let s = tape.concat_cols(&[st, su])?;
                    let w = tape.softmax(s);
                    let (wt, wu) = (tape.slice_cols(w, 0, 1)?, tape.slice_cols(w, 1, 1)?);
                    let vt = xa.v.forward(tape, p, gt)?;
                    let vu = xa.v.forward(tape, p, gu)?;
                    let at = tape.mul_col(wt, vt)?;
                    let au = tape.mul_col(wu, vu)?;
                    let a = tape.add(at, au)?;
                    let a = xa.o.forward(tape, p, a)?;
                    let z = tape.add(z, a)?;
                    x = tape.softplus(z);
                }
            }
        }
        self.out.forward(tape, p, x)
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, input: &DenoiseInput<'_, T>) -> Result<Var> {
        self.forward_with(tape, p, input, None)
    }

    /// Inference helper returning `ε̂` per row.
    pub fn predict(&self, input: &DenoiseInput<'_, T>) -> Result<Vec<T>> {
        let mut tape = Tape::new(false);
        let p = self.store.bind(&mut tape, false);
        let e = self.forward(&mut tape, &p, input)?;
        Ok(tape.value(e).data().to_vec())
    }
}
