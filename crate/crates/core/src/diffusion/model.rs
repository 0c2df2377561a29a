//! Training loop and batched inference for the conditional diffusion regressor.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    reverse_chain, Conditioning, DenoiseInput, Denoiser, DenoiserConfig, DiffusionSchedule, InfoRepository,
    PointEstimate, RegionRow, RetrievalMode,
};
use crate::encoder::DIVERGENCE_LIMIT;
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Seeds, StreamRng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Similarity-weighted retrieval from the repository.
    Retrieved,
    /// Zero prior, i.e. a standard Gaussian endpoint.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub hidden: usize,
    pub conditioning: Conditioning,
    pub prior: PriorMode,
    pub retrieval: RetrievalMode,
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub allow_degenerate: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 100,
            beta_1: 1e-4,
            beta_t: 0.02,
            hidden: 128,
            conditioning: Conditioning::Em,
            prior: PriorMode::Retrieved,
            retrieval: RetrievalMode::Topk,
            k: 5,
            epochs: 1500,
            learning_rate: 5e-3,
            weight_decay: 0.01,
            batch_size: 64,
            allow_degenerate: false,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_1, self.beta_t)
    }
}

/// Trained denoiser together with the repository it retrieves from.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub denoiser: Denoiser<f32>,
    pub repository: InfoRepository,
}

/// Per-(region, task) prior for a training set; `None` where the target is missing.
pub fn training_priors(
    repo: &InfoRepository,
    rows: &[RegionRow],
    config: &DiffusionConfig,
    seeds: &Seeds,
) -> Result<Vec<Vec<Option<f64>>>> {
    rows.iter()
        .map(|r| {
            (0..repo.tasks)
                .map(|u| {
                    if r.y[u].is_none() {
                        return Ok(None);
                    }
                    match config.prior {
                        PriorMode::Gaussian => Ok(Some(0.0)),
                        PriorMode::Retrieved => {
                            let mut rng = seeds.stream("prior-train", &[r.region_id, u as u64]);
                            repo.retrieve_prior(
                                r.region_id,
                                &r.h,
                                u,
                                config.k,
                                config.retrieval,
                                Some(r.region_id),
                                &mut rng,
                            )
                            .map(|p| Some(p.value))
                        }
                    }
                })
                .collect()
        })
        .collect()
}

fn standardized_rows(repo: &InfoRepository, rows: &[RegionRow]) -> Vec<Vec<f32>> {
    rows.iter()
        .map(|r| repo.standardize(&r.h).into_iter().map(|v| v as f32).collect())
        .collect()
}

/// Noise-regression loop over `(region, task)` draws restricted to `tasks`.
fn fit(
    denoiser: &mut Denoiser<f32>,
    repo: &InfoRepository,
    rows: &[RegionRow],
    tasks: &[usize],
    config: &DiffusionConfig,
    seeds: &Seeds,
    label: &str,
) -> Result<Vec<f64>> {
    let schedule = config.schedule()?;
    for &u in tasks {
        let n = rows.iter().filter(|r| r.y[u].is_some()).count();
        if n < 2 {
            return Err(Error::Data(format!(
                "task {u} has {n} training regions; need at least 2"
            )));
        }
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let priors = training_priors(repo, rows, config, seeds)?;
    let h = standardized_rows(repo, rows);
    let usable: Vec<usize> = (0..rows.len())
        .filter(|&i| tasks.iter().any(|&u| rows[i].y[u].is_some()))
        .collect();
    let dim = repo.dim;
    let mut opt = OptimizerState::adamw(config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = seeds.stream(label, &[epoch as u64]);
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let mut hb = Vec::with_capacity(b * dim);
            let (mut yt, mut eps, mut ts, mut us) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in chunk {
                let avail: Vec<usize> = tasks.iter().copied().filter(|&u| rows[i].y[u].is_some()).collect();
                let u = avail[rng.random_range(0..avail.len())];
                let t = rng.random_range(1..=schedule.steps());
                let e: f64 = StandardNormal.sample(&mut rng);
                let y0 = repo.normalize(u, rows[i].y[u].expect("available"));
                let prior = priors[i][u].expect("available");
                hb.extend_from_slice(&h[i]);
                yt.push(schedule.forward_sample(y0, prior, t, e) as f32);
                eps.push(e as f32);
                ts.push(t);
                us.push(u);
            }
            let hb = Tensor::new(&[b, dim], hb)?;
            let yt = Tensor::new(&[b, 1], yt)?;
            let mut tape = Tape::new(true);
            let p = denoiser.store.bind(&mut tape, true);
            let pred = denoiser.forward(
                &mut tape,
                &p,
                &DenoiseInput {
                    h: &hb,
                    y_t: &yt,
                    t: &ts,
                    task: &us,
                },
            )?;
            let target = tape.constant(Tensor::new(&[b, 1], eps)?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq);
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(Error::Divergence(format!(
                    "diffusion loss {value} at epoch {epoch}; lower the learning rate"
                )));
            }
            let grads = tape.backward(loss)?;
            let g = denoiser.store.collect_grads(&grads, &p);
            opt.step(&mut denoiser.store, &g)?;
            total += value;
            steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        if epoch % 100 == 0 || epoch + 1 == config.epochs {
            log::info!("diffusion epoch {epoch}: loss {mean:.6}");
        }
        history.push(mean);
    }
    Ok(history)
}

pub fn task_count(rows: &[RegionRow]) -> Result<usize> {
    let tasks = rows.first().map(|r| r.y.len()).unwrap_or(0);
    if tasks == 0 {
        return Err(Error::Data("training data has no tasks".into()));
    }
    Ok(tasks)
}

/// Builds the repository from `rows` and trains a fresh denoiser on every task.
pub fn train(rows: &[RegionRow], config: &DiffusionConfig, seeds: &Seeds) -> Result<(DiffusionModel, Vec<f64>)> {
    let tasks = task_count(rows)?;
    let repo = InfoRepository::build(rows, tasks, config.allow_degenerate)?;
    let mut denoiser = Denoiser::new(
        DenoiserConfig {
            input_dim: repo.dim,
            hidden: config.hidden,
            tasks,
            steps: config.steps,
            conditioning: config.conditioning,
        },
        seeds,
    )?;
    let all: Vec<usize> = (0..tasks).collect();
    let history = fit(&mut denoiser, &repo, rows, &all, config, seeds, "diffusion-train")?;
    Ok((
        DiffusionModel {
            config: config.clone(),
            denoiser,
            repository: repo,
        },
        history,
    ))
}

/// Continues training `model` on `tasks` only, warm-starting every parameter;
/// the task table is widened when `rows` carries more tasks than the model.
pub fn finetune(
    model: &DiffusionModel,
    rows: &[RegionRow],
    tasks: &[usize],
    epochs: usize,
    seeds: &Seeds,
) -> Result<(DiffusionModel, Vec<f64>)> {
    let total = task_count(rows)?;
    if let Some(&bad) = tasks.iter().find(|&&u| u >= total) {
        return Err(Error::Config(format!("fine-tune task {bad} not present in targets")));
    }
    let repo = InfoRepository::build(rows, total, model.config.allow_degenerate)?;
    if repo.dim != model.denoiser.config.input_dim {
        return Err(Error::Data(format!(
            "embedding dimension {} does not match model input {}",
            repo.dim, model.denoiser.config.input_dim
        )));
    }
    let mut denoiser = if total > model.denoiser.config.tasks {
        model
            .denoiser
            .with_tasks(total, &Seeds::new(seeds.seed() ^ 0x7461736b))?
    } else {
        model.denoiser.clone()
    };
    let mut config = model.config.clone();
    config.epochs = epochs;
    let history = fit(&mut denoiser, &repo, rows, tasks, &config, seeds, "diffusion-finetune")?;
    Ok((
        DiffusionModel {
            config,
            denoiser,
            repository: repo,
        },
        history,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub region_id: u64,
    pub h: Vec<f32>,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub region_id: u64,
    pub task: usize,
    /// Denormalized point estimate.
    pub point: f64,
    /// Denormalized samples, one per sampling round.
    pub samples: Vec<f64>,
    /// Normalized prior used for this row.
    pub prior: f64,
    pub neighbors: Vec<u64>,
    pub weights: Vec<f64>,
}

const INFER_CHUNK: usize = 2048;

impl DiffusionModel {
    /// Prior for one request; zero under the Gaussian ablation.
    pub fn prior_for(&self, req: &PredictRequest, seeds: &Seeds) -> Result<(f64, Vec<u64>, Vec<f64>)> {
        match self.config.prior {
            PriorMode::Gaussian => Ok((0.0, Vec::new(), Vec::new())),
            PriorMode::Retrieved => {
                let mut rng = seeds.stream("prior-infer", &[req.region_id, req.task as u64]);
                let p = self.repository.retrieve_prior(
                    req.region_id,
                    &req.h,
                    req.task,
                    self.config.k,
                    self.config.retrieval,
                    None,
                    &mut rng,
                )?;
                Ok((p.value, p.neighbors, p.weights))
            }
        }
    }

    /// `rounds` independent reverse chains per request.
    pub fn predict(
        &self,
        requests: &[PredictRequest],
        rounds: usize,
        point: PointEstimate,
        seeds: &Seeds,
    ) -> Result<Vec<PredictionSet>> {
        if rounds == 0 {
            return Err(Error::Config("sampling rounds must be at least 1".into()));
        }
        let schedule = self.config.schedule()?;
        let dim = self.repository.dim;
        let mut priors = Vec::with_capacity(requests.len());
        let mut hs = Vec::with_capacity(requests.len());
        for r in requests {
            if r.task >= self.denoiser.config.tasks {
                return Err(Error::Data(format!("unknown task {}", r.task)));
            }
            if r.h.len() != dim {
                return Err(Error::shape("predict", &[r.h.len()], &[dim]));
            }
            priors.push(self.prior_for(r, seeds)?);
            hs.push(
                self.repository
                    .standardize(&r.h)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect::<Vec<f32>>(),
            );
        }
        let jobs: Vec<(usize, usize)> = (0..requests.len())
            .flat_map(|i| (0..rounds).map(move |s| (i, s)))
            .collect();
        let mut normalized = vec![0.0; jobs.len()];
        for (ci, chunk) in jobs.chunks(INFER_CHUNK).enumerate() {
            let b = chunk.len();
            let mut hb = Vec::with_capacity(b * dim);
            let mut us = Vec::with_capacity(b);
            let mut pr = Vec::with_capacity(b);
            let mut rngs: Vec<StreamRng> = Vec::with_capacity(b);
            for &(i, s) in chunk {
                hb.extend_from_slice(&hs[i]);
                us.push(requests[i].task);
                pr.push(priors[i].0);
                rngs.push(seeds.stream("sample", &[requests[i].region_id, requests[i].task as u64, s as u64]));
            }
            let hb = Tensor::new(&[b, dim], hb)?;
            let out = reverse_chain(&schedule, &pr, &mut rngs, |y, t| {
                let yt = Tensor::new(&[b, 1], y.iter().map(|&v| v as f32).collect())?;
                let ts = vec![t; b];
                let e = self.denoiser.predict(&DenoiseInput {
                    h: &hb,
                    y_t: &yt,
                    t: &ts,
                    task: &us,
                })?;
                Ok(e.into_iter().map(|v| v as f64).collect())
            })?;
            normalized[ci * INFER_CHUNK..ci * INFER_CHUNK + b].copy_from_slice(&out);
        }
        Ok(requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let samples: Vec<f64> = normalized[i * rounds..(i + 1) * rounds]
                    .iter()
                    .map(|&z| self.repository.denormalize(r.task, z))
                    .collect();
                let (prior, neighbors, weights) = priors[i].clone();
                PredictionSet {
                    region_id: r.region_id,
                    task: r.task,
                    point: point.apply(&samples),
                    samples,
                    prior,
                    neighbors,
                    weights,
                }
            })
            .collect())
    }
}
