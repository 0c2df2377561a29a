//! Stage functions shared by the command line and the test suites.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{Head, RunConfig};
use crate::diffusion::{
    self, train_point, Denoiser, DenoiserConfig, DiffusionModel, InfoRepository, PointRegressor, PredictRequest,
    PredictionSet, RegionRow,
};
use crate::encoder::{extract_embeddings, pretrain, CellEncoder, CityGraph};
use crate::error::{Error, Result};
use crate::eval::{metrics, MetricReport};
use crate::grid::{region_cell_overlap, CellSet, Region};
use crate::io::{load_checkpoint, read_json, save_checkpoint, write_json, Targets};
use crate::numerics::Seeds;
use crate::region::{aggregate, CellEmbeddings, RegionEmbedding};

/// Pretrains a fresh encoder on the cells of every city.
pub fn pretrain_encoder(cities: &[&CellSet], cfg: &RunConfig) -> Result<(CellEncoder<f32>, Vec<f64>)> {
    cfg.validate()?;
    let seeds = Seeds::new(cfg.seed);
    let mut model = CellEncoder::new(cfg.encoder(), &seeds)?;
    let graphs = cities.iter().map(|c| CityGraph::new(c)).collect::<Result<Vec<_>>>()?;
    let history = pretrain(&mut model, &graphs, &cfg.pretrain(), &seeds)?;
    Ok((model, history))
}

pub fn embed_cells(model: &CellEncoder<f32>, cells: &CellSet, cfg: &RunConfig) -> Result<CellEmbeddings> {
    let rows = extract_embeddings(model, cells, &cfg.walks(), &Seeds::new(cfg.seed))?;
    CellEmbeddings::new(rows)
}

/// Region embeddings in region order; regions touching no cell are skipped with a warning.
pub fn aggregate_regions(regions: &[Region], cells: &CellSet, emb: &CellEmbeddings) -> Result<Vec<RegionEmbedding>> {
    let mut out = Vec::with_capacity(regions.len());
    for r in regions {
        let w = region_cell_overlap(r, cells);
        if w.weights.is_empty() {
            log::warn!("region {} overlaps no cell and gets no embedding", r.region_id);
            continue;
        }
        out.push(aggregate(&w, emb)?);
    }
    if out.is_empty() && !regions.is_empty() {
        return Err(Error::Data("no region overlaps the cell grid".into()));
    }
    Ok(out)
}

/// Joins region embeddings with targets; regions without any target are dropped.
pub fn region_rows(embeddings: &[RegionEmbedding], targets: &Targets, tasks: usize) -> Vec<RegionRow> {
    let by_region = targets.by_region(tasks);
    embeddings
        .iter()
        .filter_map(|e| {
            by_region.get(&e.region_id).map(|y| RegionRow {
                region_id: e.region_id,
                h: e.h.clone(),
                y: y.clone(),
            })
        })
        .collect()
}

/// Seeded split of region ids into `(train, test)`, both sorted.
pub fn split_regions(ids: &[u64], test_fraction: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut Seeds::new(seed).stream("split", &[]));
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// One request per (region, task) pair in `tasks`.
pub fn requests(embeddings: &[RegionEmbedding], tasks: &[usize]) -> Vec<PredictRequest> {
    embeddings
        .iter()
        .flat_map(|e| {
            tasks.iter().map(move |&u| PredictRequest {
                region_id: e.region_id,
                h: e.h.clone(),
                task: u,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum TrainedHead {
    Diffusion(DiffusionModel),
    Point(PointRegressor),
}

impl TrainedHead {
    pub fn repository(&self) -> &InfoRepository {
        match self {
            TrainedHead::Diffusion(m) => &m.repository,
            TrainedHead::Point(m) => &m.repository,
        }
    }
}

pub fn train_head(rows: &[RegionRow], cfg: &RunConfig) -> Result<(TrainedHead, Vec<f64>)> {
    cfg.validate()?;
    let seeds = Seeds::new(cfg.seed);
    match cfg.head {
        Head::Diffusion => {
            let (m, h) = diffusion::train(rows, &cfg.diffusion(), &seeds)?;
            Ok((TrainedHead::Diffusion(m), h))
        }
        Head::Point => {
            let (m, h) = train_point(rows, &cfg.diffusion(), &seeds)?;
            Ok((TrainedHead::Point(m), h))
        }
    }
}

/// Predictions for every request; the point head reports its single value as the only sample.
pub fn predict_head(head: &TrainedHead, reqs: &[PredictRequest], cfg: &RunConfig) -> Result<Vec<PredictionSet>> {
    match head {
        TrainedHead::Diffusion(m) => m.predict(reqs, cfg.rounds, cfg.point_estimate, &Seeds::new(cfg.seed)),
        TrainedHead::Point(m) => Ok(m
            .predict(reqs)?
            .into_iter()
            .zip(reqs)
            .map(|(v, r)| PredictionSet {
                region_id: r.region_id,
                task: r.task,
                point: v,
                samples: vec![v],
                prior: 0.0,
                neighbors: Vec::new(),
                weights: Vec::new(),
            })
            .collect()),
    }
}

/// Per-task metrics over the predictions that have a ground truth.
pub fn evaluate(preds: &[PredictionSet], truth: &Targets) -> Result<Vec<MetricReport>> {
    let lookup: BTreeMap<(u64, usize), f64> = truth.rows.iter().map(|&(r, u, v)| ((r, u), v)).collect();
    let mut by_task: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in preds {
        if let Some(&y) = lookup.get(&(p.region_id, p.task)) {
            let e = by_task.entry(p.task).or_default();
            e.0.push(p.point);
            e.1.push(y);
        }
    }
    if by_task.is_empty() {
        return Err(Error::Data("no prediction has a matching target".into()));
    }
    by_task.into_iter().map(|(u, (p, y))| metrics(u, &p, &y)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub reports: Vec<MetricReport>,
}

/// The full model followed by its five ablations.
pub fn ablation_variants(cfg: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    use crate::diffusion::{Conditioning, PriorMode, RetrievalMode};
    let full = RunConfig {
        head: Head::Diffusion,
        ..cfg.clone()
    };
    vec![
        ("full", full.clone()),
        (
            "w/o-Prior",
            RunConfig {
                prior: PriorMode::Gaussian,
                ..full.clone()
            },
        ),
        (
            "w/o-Retr",
            RunConfig {
                retrieval: RetrievalMode::Random,
                ..full.clone()
            },
        ),
        (
            "w/o-EM+C",
            RunConfig {
                conditioning: Conditioning::Concat,
                ..full.clone()
            },
        ),
        (
            "w/o-EM+CA",
            RunConfig {
                conditioning: Conditioning::Xattn,
                ..full.clone()
            },
        ),
        (
            "w/o-DiffM",
            RunConfig {
                head: Head::Point,
                ..full
            },
        ),
    ]
}

pub fn run_ablation(
    train: &[RegionRow],
    test: &[PredictRequest],
    truth: &Targets,
    cfg: &RunConfig,
) -> Result<Vec<AblationRow>> {
    ablation_variants(cfg)
        .into_iter()
        .map(|(name, c)| {
            log::info!("ablation variant {name}");
            let (head, _) = train_head(train, &c)?;
            let preds = predict_head(&head, test, &c)?;
            Ok(AblationRow {
                variant: name.to_string(),
                reports: evaluate(&preds, truth)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HeadManifest {
    Diffusion {
        config: diffusion::DiffusionConfig,
        denoiser: DenoiserConfig,
        repository: InfoRepository,
    },
    Point {
        hidden: usize,
        repository: InfoRepository,
    },
}

/// Writes `model.json` and the `head` checkpoint into `dir`.
pub fn save_head(dir: &Path, head: &TrainedHead) -> Result<()> {
    let (manifest, store) = match head {
        TrainedHead::Diffusion(m) => (
            HeadManifest::Diffusion {
                config: m.config.clone(),
                denoiser: m.denoiser.config.clone(),
                repository: m.repository.clone(),
            },
            &m.denoiser.store,
        ),
        TrainedHead::Point(m) => (
            HeadManifest::Point {
                hidden: m.hidden(),
                repository: m.repository.clone(),
            },
            &m.store,
        ),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("model.json"), &manifest)?;
    let component = match head {
        TrainedHead::Diffusion(_) => "denoiser",
        TrainedHead::Point(_) => "point-regressor",
    };
    save_checkpoint(&dir.join("head"), component, store)?;
    Ok(())
}

pub fn load_head(dir: &Path) -> Result<TrainedHead> {
    let manifest: HeadManifest = read_json(&dir.join("model.json"), "train")?;
    // parameter values come from the checkpoint; the seed only fixes the layout
    let seeds = Seeds::new(0);
    match manifest {
        HeadManifest::Diffusion {
            config,
            denoiser,
            mut repository,
        } => {
            repository.refresh();
            let mut d = Denoiser::new(denoiser, &seeds)?;
            load_checkpoint(&dir.join("head"), "denoiser", &mut d.store, "train")?;
            Ok(TrainedHead::Diffusion(DiffusionModel {
                config,
                denoiser: d,
                repository,
            }))
        }
        HeadManifest::Point { hidden, mut repository } => {
            repository.refresh();
            let mut m = PointRegressor::new(repository, hidden, &seeds);
            load_checkpoint(&dir.join("head"), "point-regressor", &mut m.store, "train")?;
            Ok(TrainedHead::Point(m))
        }
    }
}
