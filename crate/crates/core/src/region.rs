//! Overlap-weighted aggregation of cell embeddings into region embeddings.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::OverlapWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbedding {
    pub region_id: u64,
    pub h: Vec<f32>,
}

/// Cell id → embedding lookup.
#[derive(Debug, Clone, Default)]
pub struct CellEmbeddings {
    dim: usize,
    map: HashMap<u32, Vec<f32>>,
}

impl CellEmbeddings {
    pub fn new(rows: Vec<(u32, Vec<f32>)>) -> Result<Self> {
        let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
        let mut map = HashMap::with_capacity(rows.len());
        for (id, x) in rows {
            if x.len() != dim {
                return Err(Error::Data(format!(
                    "cell {id} embedding has {} values, expected {dim}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("cell {id} embedding is not finite")));
            }
            if map.insert(id, x).is_some() {
                return Err(Error::Data(format!("duplicate embedding for cell {id}")));
            }
        }
        Ok(CellEmbeddings { dim, map })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&[f32]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    /// Rows sorted by cell id.
    pub fn sorted(&self) -> Vec<(u32, &[f32])> {
        let mut v: Vec<_> = self.map.iter().map(|(&k, x)| (k, x.as_slice())).collect();
        v.sort_by_key(|r| r.0);
        v
    }
}

/// `h = Σ ω · x_c` with no renormalisation of the weights.
pub fn aggregate(weights: &OverlapWeights, cells: &CellEmbeddings) -> Result<RegionEmbedding> {
    if weights.weights.is_empty() {
        return Err(Error::Data(format!(
            "region {} overlaps no grid cell",
            weights.region_id
        )));
    }
    let mut h = vec![0.0f64; cells.dim()];
    for &(id, w) in &weights.weights {
        let x = cells.get(id).ok_or_else(|| {
            Error::Data(format!(
                "region {} references cell {id} with no embedding",
                weights.region_id
            ))
        })?;
        for (a, &v) in h.iter_mut().zip(x) {
            *a += w * v as f64;
        }
    }
    Ok(RegionEmbedding {
        region_id: weights.region_id,
        h: h.into_iter().map(|v| v as f32).collect(),
    })
}
