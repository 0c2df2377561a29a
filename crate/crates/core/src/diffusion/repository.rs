//! Training-set repository of region embeddings and normalized targets, and
//! similarity-weighted prior retrieval.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One region's embedding and raw targets (missing tasks are `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub region_id: u64,
    pub h: Vec<f32>,
    pub y: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoEntry {
    pub region_id: u64,
    pub h: Vec<f32>,
    /// Normalized targets.
    pub y: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Topk,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub region_id: u64,
    pub task: usize,
    /// Normalized prior value.
    pub value: f64,
    pub neighbors: Vec<u64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoRepository {
    pub tasks: usize,
    pub dim: usize,
    pub stats: Vec<TaskStats>,
    /// Per-dimension mean and std of the stored embeddings, used to
    /// standardize denoiser inputs.
    pub h_mean: Vec<f64>,
    pub h_std: Vec<f64>,
    pub entries: Vec<RepoEntry>,
    #[serde(skip)]
    norms: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

fn norm(h: &[f32]) -> f64 {
    h.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

fn cosine(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (na * nb)
}

impl InfoRepository {
    /// Z-score targets per task with population statistics.
    ///
    /// A task with zero variance is an error unless `allow_degenerate`, in
    /// which case its std is taken as 1.
    pub fn build(train: &[RegionRow], tasks: usize, allow_degenerate: bool) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("repository needs at least one training region".into()));
        }
        let dim = train[0].h.len();
        for r in train {
            if r.h.len() != dim {
                return Err(Error::Data(format!(
                    "region {} embedding has {} values, expected {dim}",
                    r.region_id,
                    r.h.len()
                )));
            }
            if r.h.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("region {} embedding is not finite", r.region_id)));
            }
            if r.y.len() != tasks {
                return Err(Error::Data(format!(
                    "region {} has {} target slots, expected {tasks}",
                    r.region_id,
                    r.y.len()
                )));
            }
        }
        let mut stats = Vec::with_capacity(tasks);
        for u in 0..tasks {
            let vals = train.iter().filter_map(|r| r.y[u]);
            let (mean, std, n) = mean_std(vals);
            if n == 0 {
                return Err(Error::Data(format!("task {u} has no training targets")));
            }
            let std = if std > 0.0 {
                std
            } else if allow_degenerate {
                log::warn!("task {u} has zero variance; using unit scale");
                1.0
            } else {
                return Err(Error::Data(format!(
                    "task {u} has zero target variance over {n} training regions"
                )));
            };
            stats.push(TaskStats { mean, std });
        }
        let mut h_mean = Vec::with_capacity(dim);
        let mut h_std = Vec::with_capacity(dim);
        for j in 0..dim {
            let (m, s, _) = mean_std(train.iter().map(|r| r.h[j] as f64));
            h_mean.push(m);
            h_std.push(if s > 0.0 { s } else { 1.0 });
        }
        let entries = train
            .iter()
            .map(|r| RepoEntry {
                region_id: r.region_id,
                h: r.h.clone(),
                y: r.y
                    .iter()
                    .enumerate()
                    .map(|(u, v)| v.map(|v| (v - stats[u].mean) / stats[u].std))
                    .collect(),
            })
            .collect();
        let mut repo = InfoRepository {
            tasks,
            dim,
            stats,
            h_mean,
            h_std,
            entries,
            norms: Vec::new(),
        };
        repo.refresh();
        Ok(repo)
    }

    /// Recompute cached norms (needed after deserialization).
    pub fn refresh(&mut self) {
        self.norms = self.entries.iter().map(|e| norm(&e.h)).collect();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn normalize(&self, task: usize, y: f64) -> f64 {
        (y - self.stats[task].mean) / self.stats[task].std
    }

    pub fn denormalize(&self, task: usize, z: f64) -> f64 {
        z * self.stats[task].std + self.stats[task].mean
    }

    /// Embedding standardized by the repository's per-dimension statistics.
    pub fn standardize(&self, h: &[f32]) -> Vec<f64> {
        h.iter()
            .zip(self.h_mean.iter().zip(&self.h_std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect()
    }

    /// Cosine similarity of `h` to every entry (0 for zero-norm entries).
    pub fn similarities(&self, h: &[f32]) -> Result<Vec<f64>> {
        if h.len() != self.dim {
            return Err(Error::shape("retrieve", &[h.len()], &[self.dim]));
        }
        let nh = norm(h);
        if nh == 0.0 || !nh.is_finite() {
            return Err(Error::Data("query embedding has zero or non-finite norm".into()));
        }
        if self.norms.len() != self.entries.len() {
            return Err(Error::Data("repository norms not initialised; call refresh()".into()));
        }
        Ok(self
            .entries
            .iter()
            .zip(&self.norms)
            .map(|(e, &ne)| cosine(h, nh, &e.h, ne))
            .collect())
    }

    /// Softmax-weighted average of the `k` retrieved targets for `task`.
    ///
    /// Entries without a target for `task` and the entry whose region id
    /// equals `exclude` are never candidates. `k` larger than the pool is
    /// clamped.
    pub fn retrieve_prior<R: Rng + ?Sized>(
        &self,
        region_id: u64,
        h: &[f32],
        task: usize,
        k: usize,
        mode: RetrievalMode,
        exclude: Option<u64>,
        rng: &mut R,
    ) -> Result<Prior> {
        if task >= self.tasks {
            return Err(Error::Data(format!(
                "unknown task {task} (repository has {})",
                self.tasks
            )));
        }
        if k == 0 {
            return Err(Error::Config("retrieval size K must be at least 1".into()));
        }
        let sims = self.similarities(h)?;
        let pool: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].y[task].is_some() && Some(self.entries[i].region_id) != exclude)
            .collect();
        if pool.is_empty() {
            return Err(Error::Data(format!("no repository entries available for task {task}")));
        }
        let k = if k > pool.len() {
            log::warn!("retrieval size {k} exceeds pool of {}; clamping", pool.len());
            pool.len()
        } else {
            k
        };
        let chosen: Vec<usize> = match mode {
            RetrievalMode::Topk => {
                let mut order = pool;
                order.sort_by(|&a, &b| {
                    sims[b]
                        .total_cmp(&sims[a])
                        .then(self.entries[a].region_id.cmp(&self.entries[b].region_id))
                });
                order.truncate(k);
                order
            }
            RetrievalMode::Random => index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect(),
        };
        let weights = softmax(&chosen.iter().map(|&i| sims[i]).collect::<Vec<_>>());
        let value = chosen
            .iter()
            .zip(&weights)
            .map(|(&i, w)| w * self.entries[i].y[task].expect("pool filtered on presence"))
            .sum();
        Ok(Prior {
            region_id,
            task,
            value,
            neighbors: chosen.iter().map(|&i| self.entries[i].region_id).collect(),
            weights,
        })
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
