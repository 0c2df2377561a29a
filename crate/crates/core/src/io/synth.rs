//! Seeded synthetic cities with known ground truth.
//!
//! Every cell gets a latent class from a neighbour-smoothed random field and
//! emits Poisson POI counts from its class profile. Regions are a
//! rectangular tiling; each task is a documented function of a region's
//! overlap-weighted class fractions plus Gaussian noise.

use std::path::Path;

use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::grid::{build_hex_grid, region_cell_overlap, BBox, Region, POI_DIM};
use crate::io::dataset::{save_city, write_json, City, Targets};
use crate::numerics::Seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskFunction {
    /// `a + Σ b_c f_c`
    Linear { intercept: f64, coefs: Vec<f64> },
    /// `exp(a + Σ b_c f_c)`
    LogLinear { intercept: f64, coefs: Vec<f64> },
    /// `a + Σ b_c f_c + Σ w f_i f_j`
    Interaction {
        intercept: f64,
        coefs: Vec<f64>,
        pairs: Vec<(usize, usize, f64)>,
    },
}

impl TaskFunction {
    pub fn eval(&self, f: &[f64]) -> f64 {
        let lin = |a: f64, b: &[f64]| a + b.iter().zip(f).map(|(x, y)| x * y).sum::<f64>();
        match self {
            TaskFunction::Linear { intercept, coefs } => lin(*intercept, coefs),
            TaskFunction::LogLinear { intercept, coefs } => lin(*intercept, coefs).exp(),
            TaskFunction::Interaction {
                intercept,
                coefs,
                pairs,
            } => lin(*intercept, coefs) + pairs.iter().map(|&(i, j, w)| w * f[i] * f[j]).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub function: TaskFunction,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub bbox: BBox,
    pub edge_m: f64,
    pub region_size_m: f64,
    pub classes: usize,
    pub smoothing_passes: usize,
    /// `classes × 15` Poisson means.
    pub rates: Vec<Vec<f64>>,
    pub tasks: Vec<SyntheticTask>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let classes = 4;
        // each class is loud on three categories of its own and shares a weak background
        let rates = (0..classes)
            .map(|c| {
                (0..POI_DIM)
                    .map(|k| {
                        if k / 3 == c {
                            4.0
                        } else if k == POI_DIM - 1 {
                            1.0
                        } else {
                            0.3
                        }
                    })
                    .collect()
            })
            .collect();
        SyntheticSpec {
            bbox: BBox {
                xmin: 0.0,
                ymin: 0.0,
                xmax: 9000.0,
                ymax: 9000.0,
            },
            edge_m: 150.0,
            region_size_m: 450.0,
            classes,
            smoothing_passes: 2,
            rates,
            tasks: vec![
                SyntheticTask {
                    name: "linear".into(),
                    function: TaskFunction::Linear {
                        intercept: 20.0,
                        coefs: vec![12.0, -6.0, 4.0, 0.0],
                    },
                    sigma: 0.2,
                },
                SyntheticTask {
                    name: "log_linear".into(),
                    function: TaskFunction::LogLinear {
                        intercept: 1.0,
                        coefs: vec![-0.5, 1.5, 0.0, 0.8],
                    },
                    sigma: 0.05,
                },
                SyntheticTask {
                    name: "interaction".into(),
                    function: TaskFunction::Interaction {
                        intercept: 5.0,
                        coefs: vec![0.0, 2.0, 3.0, -2.0],
                        pairs: vec![(0, 2, 8.0), (1, 3, 6.0)],
                    },
                    sigma: 0.1,
                },
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.rates.len() != self.classes || self.rates.iter().any(|r| r.len() != POI_DIM) {
            return Err(Error::Config(format!("rates must be {} × {POI_DIM}", self.classes)));
        }
        if self.rates.iter().flatten().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("POI rates must be finite and non-negative".into()));
        }
        if !(self.region_size_m > 0.0) {
            return Err(Error::Config("region size must be positive".into()));
        }
        for t in &self.tasks {
            let n = match &t.function {
                TaskFunction::Linear { coefs, .. }
                | TaskFunction::LogLinear { coefs, .. }
                | TaskFunction::Interaction { coefs, .. } => coefs.len(),
            };
            if n != self.classes || t.sigma < 0.0 {
                return Err(Error::Config(format!(
                    "task {} needs {} coefficients and sigma >= 0",
                    t.name, self.classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub cell_class: Vec<(u32, usize)>,
    /// Overlap-weighted class fractions per region.
    pub region_fractions: Vec<(u64, Vec<f64>)>,
    /// Noise added to each region's targets, per task.
    pub noise: Vec<(u64, Vec<f64>)>,
}

impl TruthManifest {
    /// Targets recomputed from the recorded fractions and noise.
    pub fn recompute_targets(&self) -> Targets {
        let mut rows = Vec::new();
        for ((rid, f), (_, noise)) in self.region_fractions.iter().zip(&self.noise) {
            for (u, task) in self.spec.tasks.iter().enumerate() {
                rows.push((*rid, u, task.function.eval(f) + noise[u]));
            }
        }
        Targets { rows }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(City, TruthManifest)> {
    spec.validate()?;
    let seeds = Seeds::new(seed);
    let mut cells = build_hex_grid(spec.bbox, spec.edge_m)?;
    let n = cells.len();

    let mut rng = seeds.stream("synth-field", &[]);
    let mut field: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..spec.classes).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for _ in 0..spec.smoothing_passes {
        let next: Vec<Vec<f64>> = cells
            .cells()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut acc = field[i].clone();
                for &nb in &c.neighbors {
                    let j = cells.position(nb).expect("neighbor exists");
                    for (a, v) in acc.iter_mut().zip(&field[j]) {
                        *a += v;
                    }
                }
                let k = 1.0 + c.neighbors.len() as f64;
                acc.into_iter().map(|v| v / k).collect()
            })
            .collect();
        field = next;
    }
    let class: Vec<usize> = field
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();

    let mut rng = seeds.stream("synth-poi", &[]);
    for (i, cell) in cells.cells_mut().iter_mut().enumerate() {
        for (k, slot) in cell.poi.iter_mut().enumerate() {
            let rate = spec.rates[class[i]][k];
            *slot = if rate > 0.0 {
                Poisson::new(rate)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng) as u32
            } else {
                0
            };
        }
    }

    let b = spec.bbox;
    let nx = (b.width() / spec.region_size_m).ceil() as usize;
    let ny = (b.height() / spec.region_size_m).ceil() as usize;
    let mut regions = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x0 = b.xmin + i as f64 * spec.region_size_m;
            let y0 = b.ymin + j as f64 * spec.region_size_m;
            let ring = geometry::rect(
                x0,
                y0,
                (x0 + spec.region_size_m).min(b.xmax),
                (y0 + spec.region_size_m).min(b.ymax),
            );
            regions.push(Region::new((j * nx + i) as u64, vec![ring])?);
        }
    }

    let mut rng = seeds.stream("synth-noise", &[]);
    let mut fractions = Vec::with_capacity(regions.len());
    let mut noise = Vec::with_capacity(regions.len());
    for r in &regions {
        let w = region_cell_overlap(r, &cells);
        let mut f = vec![0.0; spec.classes];
        let total: f64 = w.weights.iter().map(|x| x.1).sum();
        for &(id, om) in &w.weights {
            f[class[cells.position(id).expect("overlap cell exists")]] += om / total;
        }
        let eps: Vec<f64> = spec
            .tasks
            .iter()
            .map(|t| {
                if t.sigma > 0.0 {
                    Normal::new(0.0, t.sigma).expect("positive sigma").sample(&mut rng)
                } else {
                    0.0
                }
            })
            .collect();
        fractions.push((r.region_id, f));
        noise.push((r.region_id, eps));
    }
    let manifest = TruthManifest {
        seed,
        spec: spec.clone(),
        cell_class: cells.cells().iter().map(|c| c.id).zip(class).collect(),
        region_fractions: fractions,
        noise,
    };
    let targets = manifest.recompute_targets();
    Ok((
        City {
            cells,
            regions,
            targets,
        },
        manifest,
    ))
}

/// Generate and write `cells.csv`, `edges.csv`, `grid.json`, `regions.json`,
/// `targets.csv` and `truth-manifest.json` into `dir`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<(City, TruthManifest)> {
    let (city, manifest) = generate_synthetic(spec, seed)?;
    save_city(dir, &city, Some(spec.bbox))?;
    write_json(&dir.join("truth-manifest.json"), &manifest)?;
    Ok((city, manifest))
}
