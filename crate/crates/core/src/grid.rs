//! Hexagonal tessellation, POI binning and region/cell overlap weights.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Point};

pub const POI_DIM: usize = 15;
pub const DEFAULT_EDGE_M: f64 = 150.0;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Planar rectangle in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox { xmin, ymin, xmax, ymax };
        if !(xmax > xmin && ymax > ymin) || ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("degenerate bounding box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn ring(&self) -> Vec<Point> {
        geometry::rect(self.xmin, self.ymin, self.xmax, self.ymax)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: u32,
    pub center: Point,
    pub polygon: [Point; 6],
    pub poi: [u32; POI_DIM],
    pub neighbors: Vec<u32>,
}

/// Pointy-top hexagon, vertices counter-clockwise from 30°.
pub fn hexagon(center: Point, edge: f64) -> [Point; 6] {
    let mut v = [[0.0; 2]; 6];
    for (i, p) in v.iter_mut().enumerate() {
        let a = (30.0 + 60.0 * i as f64).to_radians();
        *p = [center[0] + edge * a.cos(), center[1] + edge * a.sin()];
    }
    v
}

pub fn hexagon_area(edge: f64) -> f64 {
    1.5 * SQRT3 * edge * edge
}

/// A set of hexagonal cells plus a bucket index for spatial lookups.
#[derive(Debug, Clone)]
pub struct CellSet {
    edge_m: f64,
    cells: Vec<Cell>,
    by_id: HashMap<u32, usize>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl CellSet {
    /// Build from cells whose `polygon` is already populated.
    pub fn from_cells(edge_m: f64, mut cells: Vec<Cell>) -> Result<Self> {
        if edge_m <= 0.0 || !edge_m.is_finite() {
            return Err(Error::Config(format!("edge length must be positive, got {edge_m}")));
        }
        cells.sort_by_key(|c| c.id);
        let mut by_id = HashMap::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            if by_id.insert(c.id, i).is_some() {
                return Err(Error::Data(format!("duplicate cell id {}", c.id)));
            }
        }
        for c in &mut cells {
            c.neighbors.sort_unstable();
            c.neighbors.dedup();
        }
        let mut set = CellSet {
            edge_m,
            cells,
            by_id,
            buckets: HashMap::new(),
        };
        set.index();
        Ok(set)
    }

    /// Cells centred at `centers` with adjacency `edges` (undirected pairs).
    pub fn from_centers(edge_m: f64, centers: Vec<(u32, Point, [u32; POI_DIM])>, edges: &[(u32, u32)]) -> Result<Self> {
        let mut cells: Vec<Cell> = centers
            .into_iter()
            .map(|(id, center, poi)| Cell {
                id,
                center,
                polygon: hexagon(center, edge_m),
                poi,
                neighbors: Vec::new(),
            })
            .collect();
        let pos: HashMap<u32, usize> = cells.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        for &(a, b) in edges {
            let (Some(&ia), Some(&ib)) = (pos.get(&a), pos.get(&b)) else {
                return Err(Error::Data(format!("edge ({a}, {b}) references an unknown cell")));
            };
            if a == b {
                continue;
            }
            cells[ia].neighbors.push(b);
            cells[ib].neighbors.push(a);
        }
        Self::from_cells(edge_m, cells)
    }

    fn bucket_size(&self) -> f64 {
        2.0 * self.edge_m
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        let s = self.bucket_size();
        ((x / s).floor() as i64, (y / s).floor() as i64)
    }

    fn index(&mut self) {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in self.cells.iter().enumerate() {
            let b = geometry::bounds(&c.polygon);
            let (k0, k1) = (self.key(b[0], b[1]), self.key(b[2], b[3]));
            for kx in k0.0..=k1.0 {
                for ky in k0.1..=k1.1 {
                    buckets.entry((kx, ky)).or_default().push(i);
                }
            }
        }
        self.buckets = buckets;
    }

    pub fn edge_m(&self) -> f64 {
        self.edge_m
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells in ascending id order.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, id: u32) -> Option<&Cell> {
        self.by_id.get(&id).map(|&i| &self.cells[i])
    }

    /// Position of cell `id` in [`CellSet::cells`].
    pub fn position(&self, id: u32) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn cell_area(&self) -> f64 {
        hexagon_area(self.edge_m)
    }

    /// Cell positions whose bounding boxes may intersect `[xmin, ymin, xmax, ymax]`.
    pub fn candidates(&self, b: [f64; 4]) -> Vec<usize> {
        let (k0, k1) = (self.key(b[0], b[1]), self.key(b[2], b[3]));
        let mut out = Vec::new();
        for kx in k0.0..=k1.0 {
            for ky in k0.1..=k1.1 {
                if let Some(v) = self.buckets.get(&(kx, ky)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Lowest-id cell containing `p` (boundary inclusive).
    pub fn locate(&self, p: Point) -> Option<u32> {
        let tol = 1e-9 * self.edge_m;
        self.buckets
            .get(&self.key(p[0], p[1]))?
            .iter()
            .filter(|&&i| geometry::in_convex(&self.cells[i].polygon, p, tol))
            .map(|&i| self.cells[i].id)
            .min()
    }

    /// Undirected edge list with `a < b`.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for c in &self.cells {
            for &n in &c.neighbors {
                if c.id < n {
                    out.push((c.id, n));
                }
            }
        }
        out
    }

    pub fn cells_mut(&mut self) -> &mut [Cell] {
        &mut self.cells
    }
}

/// Pointy-top offset-row tessellation of `bbox` with ids assigned row-major.
///
/// Rows are spaced `1.5·edge` apart and columns `√3·edge`; odd rows are
/// shifted by half a column. Cells not intersecting the box are dropped.
pub fn build_hex_grid(bbox: BBox, edge_m: f64) -> Result<CellSet> {
    if edge_m <= 0.0 || !edge_m.is_finite() {
        return Err(Error::Config(format!("edge length must be positive, got {edge_m}")));
    }
    let w = SQRT3 * edge_m;
    if bbox.width() <= w && bbox.height() <= 2.0 * edge_m {
        let center = [0.5 * (bbox.xmin + bbox.xmax), 0.5 * (bbox.ymin + bbox.ymax)];
        return CellSet::from_cells(
            edge_m,
            vec![Cell {
                id: 0,
                center,
                polygon: hexagon(center, edge_m),
                poi: [0; POI_DIM],
                neighbors: Vec::new(),
            }],
        );
    }
    let nrows = (bbox.height() / (1.5 * edge_m)).ceil() as usize + 1;
    let ncols = (bbox.width() / w).ceil() as usize + 1;
    let ring = bbox.ring();
    let min_area = 1e-9 * hexagon_area(edge_m);

    let mut grid: Vec<Option<u32>> = vec![None; nrows * ncols];
    let mut cells = Vec::new();
    for r in 0..nrows {
        for c in 0..ncols {
            let shift = if r % 2 == 1 { 0.5 * w } else { 0.0 };
            let center = [bbox.xmin + c as f64 * w + shift, bbox.ymin + r as f64 * 1.5 * edge_m];
            let polygon = hexagon(center, edge_m);
            if geometry::area(&geometry::clip_convex(&ring, &polygon)) <= min_area {
                continue;
            }
            let id = cells.len() as u32;
            grid[r * ncols + c] = Some(id);
            cells.push(Cell {
                id,
                center,
                polygon,
                poi: [0; POI_DIM],
                neighbors: Vec::new(),
            });
        }
    }
    let at = |r: isize, c: isize| -> Option<u32> {
        if r < 0 || c < 0 || r as usize >= nrows || c as usize >= ncols {
            None
        } else {
            grid[r as usize * ncols + c as usize]
        }
    };
    for r in 0..nrows as isize {
        for c in 0..ncols as isize {
            let Some(id) = at(r, c) else { continue };
            let offsets: [(isize, isize); 6] = if r % 2 == 0 {
                [(0, -1), (0, 1), (-1, -1), (-1, 0), (1, -1), (1, 0)]
            } else {
                [(0, -1), (0, 1), (-1, 0), (-1, 1), (1, 0), (1, 1)]
            };
            let neigh: Vec<u32> = offsets.iter().filter_map(|&(dr, dc)| at(r + dr, c + dc)).collect();
            cells[id as usize].neighbors = neigh;
        }
    }
    CellSet::from_cells(edge_m, cells)
}

/// Point of interest with a category in `0..15`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssignReport {
    pub assigned: usize,
    pub dropped: usize,
}

/// Increment per-cell category counts; POIs outside every cell are tallied as dropped.
pub fn assign_pois(cells: &mut CellSet, pois: &[Poi]) -> Result<AssignReport> {
    if let Some(p) = pois.iter().find(|p| p.category >= POI_DIM) {
        return Err(Error::Data(format!(
            "POI category {} out of range 0..{POI_DIM}",
            p.category
        )));
    }
    let mut report = AssignReport::default();
    for p in pois {
        match cells.locate([p.x, p.y]) {
            Some(id) => {
                let i = cells.position(id).expect("located cell exists");
                cells.cells[i].poi[p.category] += 1;
                report.assigned += 1;
            }
            None => report.dropped += 1,
        }
    }
    if report.dropped > 0 {
        log::warn!("{} POIs fell outside the grid and were dropped", report.dropped);
    }
    Ok(report)
}

/// Region polygon (one or more counter-clockwise rings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: u64,
    pub parts: Vec<Vec<Point>>,
}

impl Region {
    /// Validates and orients every part counter-clockwise.
    pub fn new(region_id: u64, parts: Vec<Vec<Point>>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Data(format!("region {region_id} has no polygon")));
        }
        let mut out = Vec::with_capacity(parts.len());
        for mut ring in parts {
            if ring.len() > 1 && ring.first() == ring.last() {
                ring.pop();
            }
            if ring.len() < 3 {
                return Err(Error::Data(format!(
                    "region {region_id} has a ring with fewer than 3 vertices"
                )));
            }
            if geometry::self_intersects(&ring) {
                return Err(Error::Data(format!("region {region_id} is self-intersecting")));
            }
            let a = geometry::signed_area(&ring);
            if a.abs() <= 0.0 || !a.is_finite() {
                return Err(Error::Data(format!("region {region_id} has zero area")));
            }
            if a < 0.0 {
                ring.reverse();
            }
            out.push(ring);
        }
        Ok(Region { region_id, parts: out })
    }

    pub fn area(&self) -> f64 {
        self.parts.iter().map(|p| geometry::area(p)).sum()
    }

    pub fn bounds(&self) -> [f64; 4] {
        self.parts.iter().map(|p| geometry::bounds(p)).fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |a, b| [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])],
        )
    }
}

/// `(cell id, Area(region ∩ cell) / Area(cell))` for every overlapping cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapWeights {
    pub region_id: u64,
    pub weights: Vec<(u32, f64)>,
}

pub fn region_cell_overlap(region: &Region, cells: &CellSet) -> OverlapWeights {
    let cell_area = cells.cell_area();
    let b = region.bounds();
    let mut weights = Vec::new();
    for i in cells.candidates(b) {
        let cell = &cells.cells()[i];
        let cb = geometry::bounds(&cell.polygon);
        if cb[0] > b[2] || cb[2] < b[0] || cb[1] > b[3] || cb[3] < b[1] {
            continue;
        }
        let inter: f64 = region
            .parts
            .iter()
            .map(|ring| geometry::signed_area(&geometry::clip_convex(ring, &cell.polygon)).max(0.0))
            .sum();
        if inter < 1e-9 * cell_area {
            continue;
        }
        weights.push((cell.id, (inter / cell_area).clamp(0.0, 1.0)));
    }
    weights.sort_by_key(|w| w.0);
    OverlapWeights {
        region_id: region.region_id,
        weights,
    }
}
