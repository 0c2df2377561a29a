//! Cell graph and node2vec-style biased random walks.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellSet, POI_DIM};
use crate::numerics::{Real, Seeds, Tensor};

/// Undirected, unweighted adjacency over cell positions.
#[derive(Debug, Clone)]
pub struct CellGraph {
    ids: Vec<u32>,
    adj: Vec<Vec<usize>>,
}

impl CellGraph {
    pub fn from_cells(cells: &CellSet) -> Result<Self> {
        let ids: Vec<u32> = cells.cells().iter().map(|c| c.id).collect();
        let mut adj = Vec::with_capacity(ids.len());
        for c in cells.cells() {
            let mut row = Vec::with_capacity(c.neighbors.len());
            for &n in &c.neighbors {
                if n == c.id {
                    continue;
                }
                let pos = cells
                    .position(n)
                    .ok_or_else(|| Error::Data(format!("cell {} lists unknown neighbor {n}", c.id)))?;
                row.push(pos);
            }
            row.sort_unstable();
            row.dedup();
            adj.push(row);
        }
        Self::from_adjacency(ids, adj)
    }

    /// Build from explicit position-indexed adjacency; asymmetric input is an error.
    pub fn from_adjacency(ids: Vec<u32>, mut adj: Vec<Vec<usize>>) -> Result<Self> {
        if ids.len() != adj.len() {
            return Err(Error::Data(format!(
                "{} ids but {} adjacency rows",
                ids.len(),
                adj.len()
            )));
        }
        for (i, row) in adj.iter_mut().enumerate() {
            row.retain(|&j| j != i);
            row.sort_unstable();
            row.dedup();
        }
        for (i, row) in adj.iter().enumerate() {
            for &j in row {
                if j >= adj.len() || adj[j].binary_search(&i).is_err() {
                    return Err(Error::Data(format!(
                        "adjacency between cells {} and {j} is not symmetric",
                        ids[i]
                    )));
                }
            }
        }
        Ok(CellGraph { ids, adj })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, pos: usize) -> u32 {
        self.ids[pos]
    }

    pub fn neighbors(&self, pos: usize) -> &[usize] {
        &self.adj[pos]
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkParams {
    /// Independent walks per root.
    pub k: usize,
    /// Steps per walk, excluding the root.
    pub l: usize,
    /// Return parameter.
    pub p: f64,
    /// In-out parameter.
    pub q: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        WalkParams {
            k: 8,
            l: 4,
            p: 1.0,
            q: 0.1,
        }
    }
}

impl WalkParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 {
            return Err(Error::Config(format!(
                "walk count k and length l must be at least 1 (k={}, l={})",
                self.k, self.l
            )));
        }
        if !(self.p > 0.0 && self.q > 0.0) {
            return Err(Error::Config(format!(
                "walk bias parameters must be positive (p={}, q={})",
                self.p, self.q
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.k * self.l + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkSequence {
    pub root: u32,
    pub nodes: Vec<u32>,
}

/// One root's `k` walks concatenated after the root token.
///
/// Returns the sequence and whether the dead-end rule fired.
pub fn sample_walks<R: Rng + ?Sized>(
    graph: &CellGraph,
    root: usize,
    params: &WalkParams,
    rng: &mut R,
) -> Result<(WalkSequence, bool)> {
    params.validate()?;
    if root >= graph.len() {
        return Err(Error::Data(format!("walk root position {root} out of range")));
    }
    let root_id = graph.id(root);
    if graph.neighbors(root).is_empty() {
        return Ok((
            WalkSequence {
                root: root_id,
                nodes: vec![root_id; params.seq_len()],
            },
            true,
        ));
    }
    let mut nodes = Vec::with_capacity(params.seq_len());
    nodes.push(root_id);
    let mut weights = Vec::with_capacity(6);
    for _ in 0..params.k {
        let first = graph.neighbors(root);
        let mut prev = root;
        let mut cur = first[rng.random_range(0..first.len())];
        nodes.push(graph.id(cur));
        for _ in 1..params.l {
            let next = biased_step(graph, prev, cur, params, &mut weights, rng);
            prev = cur;
            cur = next;
            nodes.push(graph.id(cur));
        }
    }
    Ok((WalkSequence { root: root_id, nodes }, false))
}

/// Unnormalized node2vec weight of moving `prev → cur → next`.
pub fn transition_weight(graph: &CellGraph, prev: usize, next: usize, p: f64, q: f64) -> f64 {
    if next == prev {
        1.0 / p
    } else if graph.is_adjacent(prev, next) {
        1.0
    } else {
        1.0 / q
    }
}

fn biased_step<R: Rng + ?Sized>(
    graph: &CellGraph,
    prev: usize,
    cur: usize,
    params: &WalkParams,
    weights: &mut Vec<f64>,
    rng: &mut R,
) -> usize {
    let nbrs = graph.neighbors(cur);
    weights.clear();
    weights.extend(
        nbrs.iter()
            .map(|&n| transition_weight(graph, prev, n, params.p, params.q)),
    );
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return nbrs[i];
        }
        u -= w;
    }
    nbrs[nbrs.len() - 1]
}

/// Walks for every root of one city; each root draws from its own stream
/// keyed by `(city, root id, epoch)`.
pub fn walk_corpus(
    graph: &CellGraph,
    params: &WalkParams,
    seeds: &Seeds,
    city: u64,
    epoch: u64,
) -> Result<Vec<WalkSequence>> {
    let mut out = Vec::with_capacity(graph.len());
    let mut dead_ends = 0usize;
    for root in 0..graph.len() {
        let mut rng = seeds.stream("walks", &[city, graph.id(root) as u64, epoch]);
        let (seq, dead) = sample_walks(graph, root, params, &mut rng)?;
        dead_ends += dead as usize;
        out.push(seq);
    }
    if dead_ends > 0 {
        log::warn!("{dead_ends} isolated cells produced root-only walks");
    }
    Ok(out)
}

/// `(k·l+1) × 15` POI matrix, row `j` taken from `seq.nodes[j]`.
pub fn build_feature_sequence<T: Real>(seq: &WalkSequence, cells: &CellSet) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(seq.nodes.len() * POI_DIM);
    for &id in &seq.nodes {
        let cell = cells
            .get(id)
            .ok_or_else(|| Error::Data(format!("walk references unknown cell {id}")))?;
        data.extend(cell.poi.iter().map(|&c| T::lit(c as f64)));
    }
    Tensor::new(&[seq.nodes.len(), POI_DIM], data)
}

pub fn write_walks_jsonl(path: &Path, walks: &[WalkSequence]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for seq in walks {
        serde_json::to_writer(&mut w, seq)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_walks_jsonl(path: &Path) -> Result<Vec<WalkSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                file: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
