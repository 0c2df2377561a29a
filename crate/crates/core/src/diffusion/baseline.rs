//! Point-regression head used by the no-diffusion ablation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffusion::model::task_count;
use crate::diffusion::{DiffusionConfig, InfoRepository, PredictRequest, RegionRow};
use crate::encoder::DIVERGENCE_LIMIT;
use crate::error::{Error, Result};
use crate::numerics::{Bound, Linear, OptimizerState, ParamId, ParamStore, Seeds, Tape, Tensor, Var};

/// MLP on `[h ‖ γ_u]` predicting the normalized target directly.
#[derive(Debug, Clone)]
pub struct PointRegressor {
    pub store: ParamStore<f32>,
    pub repository: InfoRepository,
    task_table: ParamId,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl PointRegressor {
    pub fn new(repo: InfoRepository, hidden: usize, seeds: &Seeds) -> Self {
        let mut rng = seeds.stream("point-init", &[]);
        let mut store = ParamStore::new();
        let task_table = store.normal("task_embedding", &[repo.tasks, hidden], 1.0, &mut rng);
        let l1 = Linear::new(&mut store, "l1", repo.dim + hidden, hidden, &mut rng);
        let l2 = Linear::new(&mut store, "l2", hidden, hidden, &mut rng);
        let out = Linear::new(&mut store, "out", hidden, 1, &mut rng);
        PointRegressor {
            store,
            repository: repo,
            task_table,
            l1,
            l2,
            out,
        }
    }

    pub fn hidden(&self) -> usize {
        self.l2.fan_in
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, h: Tensor<f32>, tasks: &[usize]) -> Result<Var> {
        let h = tape.constant(h);
        let g = tape.gather_rows(p.var(self.task_table), tasks)?;
        let x = tape.concat_cols(&[h, g])?;
        let x = self.l1.forward(tape, p, x)?;
        let x = tape.softplus(x);
        let x = self.l2.forward(tape, p, x)?;
        let x = tape.softplus(x);
        self.out.forward(tape, p, x)
    }

    fn inputs(&self, hs: &[&[f32]]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(hs.len() * self.repository.dim);
        for h in hs {
            if h.len() != self.repository.dim {
                return Err(Error::shape("point regressor", &[h.len()], &[self.repository.dim]));
            }
            data.extend(self.repository.standardize(h).into_iter().map(|v| v as f32));
        }
        Tensor::new(&[hs.len(), self.repository.dim], data)
    }

    /// Denormalized point predictions, one per request.
    pub fn predict(&self, requests: &[PredictRequest]) -> Result<Vec<f64>> {
        if let Some(r) = requests.iter().find(|r| r.task >= self.repository.tasks) {
            return Err(Error::Data(format!("unknown task {}", r.task)));
        }
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(1024) {
            let hs: Vec<&[f32]> = chunk.iter().map(|r| r.h.as_slice()).collect();
            let tasks: Vec<usize> = chunk.iter().map(|r| r.task).collect();
            let mut tape = Tape::new(false);
            let p = self.store.bind(&mut tape, false);
            let y = self.forward(&mut tape, &p, self.inputs(&hs)?, &tasks)?;
            out.extend(
                tape.value(y)
                    .data()
                    .iter()
                    .zip(&tasks)
                    .map(|(&z, &u)| self.repository.denormalize(u, z as f64)),
            );
        }
        Ok(out)
    }
}

/// MSE training with the diffusion head's optimizer settings and epoch count.
pub fn train_point(rows: &[RegionRow], config: &DiffusionConfig, seeds: &Seeds) -> Result<(PointRegressor, Vec<f64>)> {
    let tasks = task_count(rows)?;
    let repo = InfoRepository::build(rows, tasks, config.allow_degenerate)?;
    let mut model = PointRegressor::new(repo, config.hidden, seeds);
    let pairs: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..tasks).filter(move |&u| r.y[u].is_some()).map(move |u| (i, u)))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Data("point regressor needs at least two targets".into()));
    }
    let mut opt = OptimizerState::adamw(config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = seeds.stream("point-train", &[epoch as u64]);
        // one region per draw with a uniformly chosen task, matching the diffusion loop
        let mut order: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].y.iter().any(Option::is_some))
            .collect();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut hs = Vec::with_capacity(chunk.len());
            let mut us = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let avail: Vec<usize> = (0..tasks).filter(|&u| rows[i].y[u].is_some()).collect();
                let u = avail[rng.random_range(0..avail.len())];
                hs.push(rows[i].h.as_slice());
                us.push(u);
                ys.push(model.repository.normalize(u, rows[i].y[u].expect("available")) as f32);
            }
            let x = model.inputs(&hs)?;
            let mut tape = Tape::new(true);
            let p = model.store.bind(&mut tape, true);
            let pred = model.forward(&mut tape, &p, x, &us)?;
            let target = tape.constant(Tensor::new(&[chunk.len(), 1], ys)?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq);
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(Error::Divergence(format!(
                    "point regressor loss {value} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let g = model.store.collect_grads(&grads, &p);
            opt.step(&mut model.store, &g)?;
            total += value;
            steps += 1;
        }
        history.push(total / steps.max(1) as f64);
    }
    Ok((model, history))
}
