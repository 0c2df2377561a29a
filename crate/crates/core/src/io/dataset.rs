//! City directories: cells, adjacency, regions and targets.
//!
//! A city directory holds either a pre-built grid (`cells.csv`, `edges.csv`,
//! `grid.json`) or raw points (`pois.csv` plus `grid.json` with the bounding
//! box), together with `regions.json` and an optional `targets.csv`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::grid::{assign_pois, build_hex_grid, BBox, CellSet, Poi, Region, DEFAULT_EDGE_M, POI_DIM};

/// The 15 POI category labels, in feature order.
pub const POI_CATEGORIES: [&str; POI_DIM] = [
    "education",
    "commercial_industrial",
    "accommodation",
    "culture_recreation",
    "healthcare",
    "entertainment",
    "worship",
    "food_drink",
    "parking",
    "transportation",
    "residential",
    "camping_outdoor",
    "sports",
    "financial",
    "other",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub edge_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

/// Long-format targets `(region, task, value)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub rows: Vec<(u64, usize, f64)>,
}

impl Targets {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn tasks(&self) -> usize {
        self.rows.iter().map(|r| r.1 + 1).max().unwrap_or(0)
    }

    /// `region → [value per task]`, missing entries as `None`.
    pub fn by_region(&self, tasks: usize) -> BTreeMap<u64, Vec<Option<f64>>> {
        let mut out: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
        for &(r, u, v) in &self.rows {
            if u < tasks {
                out.entry(r).or_insert_with(|| vec![None; tasks])[u] = Some(v);
            }
        }
        out
    }

    pub fn get(&self, region: u64, task: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == region && r.1 == task).map(|r| r.2)
    }
}

#[derive(Debug, Clone)]
pub struct City {
    pub cells: CellSet,
    pub regions: Vec<Region>,
    pub targets: Targets,
}

fn schema(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Schema {
        file: path.display().to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<std::fs::File>, want: &[String]) -> Result<()> {
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != want {
        return Err(schema(
            path,
            1,
            format!("expected header {}, found {}", want.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let raw = rec
        .get(i)
        .ok_or_else(|| schema(path, line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| schema(path, line, format!("cannot parse {name} value {raw:?}")))
}

fn records(path: &Path, rdr: &mut csv::Reader<std::fs::File>, width: usize) -> Result<Vec<csv::StringRecord>> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            schema(path, line, e.to_string())
        })?;
        if rec.len() != width {
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            return Err(schema(
                path,
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn cells_header() -> Vec<String> {
    let mut h = vec!["cell_id".to_string(), "cx".into(), "cy".into()];
    h.extend((0..POI_DIM).map(|i| format!("poi_{i}")));
    h
}

pub fn read_grid_meta(dir: &Path) -> Result<GridMeta> {
    let path = dir.join("grid.json");
    if !path.exists() {
        return Ok(GridMeta {
            edge_m: DEFAULT_EDGE_M,
            bbox: None,
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| schema(&path, e.line() as u64, e.to_string()))
}

pub fn read_cells(dir: &Path, edge_m: f64) -> Result<CellSet> {
    let path = dir.join("cells.csv");
    let mut rdr = open_csv(&path)?;
    check_header(&path, &mut rdr, &cells_header())?;
    let mut centers = Vec::new();
    for rec in records(&path, &mut rdr, 3 + POI_DIM)? {
        let id: u32 = field(&path, &rec, 0, "cell_id")?;
        let cx: f64 = field(&path, &rec, 1, "cx")?;
        let cy: f64 = field(&path, &rec, 2, "cy")?;
        let mut poi = [0u32; POI_DIM];
        for (k, slot) in poi.iter_mut().enumerate() {
            *slot = field(&path, &rec, 3 + k, &format!("poi_{k}"))?;
        }
        centers.push((id, [cx, cy], poi));
    }
    let epath = dir.join("edges.csv");
    let mut edges = Vec::new();
    if epath.exists() {
        let mut rdr = open_csv(&epath)?;
        check_header(&epath, &mut rdr, &["cell_a".into(), "cell_b".into()])?;
        for rec in records(&epath, &mut rdr, 2)? {
            edges.push((field(&epath, &rec, 0, "cell_a")?, field(&epath, &rec, 1, "cell_b")?));
        }
    } else {
        edges = geometric_edges(&centers, edge_m);
    }
    CellSet::from_centers(edge_m, centers, &edges)
}

/// Adjacency from centre spacing when no edge list is supplied.
fn geometric_edges(centers: &[(u32, Point, [u32; POI_DIM])], edge_m: f64) -> Vec<(u32, u32)> {
    let spacing = 3f64.sqrt() * edge_m;
    let key = |p: Point| ((p[0] / spacing).floor() as i64, (p[1] / spacing).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, c) in centers.iter().enumerate() {
        buckets.entry(key(c.1)).or_default().push(i);
    }
    let mut edges = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        let (kx, ky) = key(c.1);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &j in buckets.get(&(kx + dx, ky + dy)).into_iter().flatten() {
                    if j <= i {
                        continue;
                    }
                    let d = ((centers[j].1[0] - c.1[0]).powi(2) + (centers[j].1[1] - c.1[1]).powi(2)).sqrt();
                    if (d - spacing).abs() < 1e-3 * spacing {
                        edges.push((c.0, centers[j].0));
                    }
                }
            }
        }
    }
    edges
}

/// Raw label → category index, from `categories.json` (`{"label": "food_drink", ...}`)
/// merged over the canonical names and their indices.
pub fn read_category_mapping(dir: &Path) -> Result<HashMap<String, usize>> {
    let mut map: HashMap<String, usize> = HashMap::new();
    for (i, name) in POI_CATEGORIES.iter().enumerate() {
        map.insert(name.to_string(), i);
        map.insert(i.to_string(), i);
    }
    let path = dir.join("categories.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let user: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| schema(&path, e.line() as u64, e.to_string()))?;
        for (label, target) in user {
            let idx = *map
                .get(&target)
                .ok_or_else(|| schema(&path, 0, format!("label {label:?} maps to unknown category {target:?}")))?;
            map.insert(label, idx);
        }
    }
    Ok(map)
}

pub fn read_pois(dir: &Path) -> Result<Vec<Poi>> {
    let path = dir.join("pois.csv");
    let mapping = read_category_mapping(dir)?;
    let mut rdr = open_csv(&path)?;
    check_header(&path, &mut rdr, &["x".into(), "y".into(), "category".into()])?;
    let mut out = Vec::new();
    for rec in records(&path, &mut rdr, 3)? {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let label = &rec[2];
        let category = *mapping
            .get(label)
            .ok_or_else(|| schema(&path, line, format!("unmapped POI category {label:?}")))?;
        out.push(Poi {
            x: field(&path, &rec, 0, "x")?,
            y: field(&path, &rec, 1, "y")?,
            category,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionRecord {
    region_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polygon: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polygons: Option<Vec<Vec<Point>>>,
}

pub fn read_regions(dir: &Path) -> Result<Vec<Region>> {
    let path = dir.join("regions.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let recs: Vec<RegionRecord> =
        serde_json::from_str(&text).map_err(|e| schema(&path, e.line() as u64, e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    recs.into_iter()
        .map(|r| {
            if !seen.insert(r.region_id) {
                return Err(Error::Data(format!("duplicate region id {}", r.region_id)));
            }
            let parts = match (r.polygon, r.polygons) {
                (Some(p), None) => vec![p],
                (None, Some(ps)) => ps,
                _ => {
                    return Err(Error::Data(format!(
                        "region {} needs exactly one of polygon or polygons",
                        r.region_id
                    )))
                }
            };
            Region::new(r.region_id, parts)
        })
        .collect()
}

pub fn read_targets(dir: &Path) -> Result<Targets> {
    let path = dir.join("targets.csv");
    if !path.exists() {
        return Ok(Targets::default());
    }
    let mut rdr = open_csv(&path)?;
    check_header(&path, &mut rdr, &["region_id".into(), "task_id".into(), "value".into()])?;
    let mut rows = Vec::new();
    for rec in records(&path, &mut rdr, 3)? {
        let v: f64 = field(&path, &rec, 2, "value")?;
        if !v.is_finite() {
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            return Err(schema(&path, line, "target value is not finite"));
        }
        rows.push((
            field(&path, &rec, 0, "region_id")?,
            field(&path, &rec, 1, "task_id")?,
            v,
        ));
    }
    Ok(Targets { rows })
}

/// Load a city directory, building the grid from raw POIs when no `cells.csv` exists.
pub fn load_city(dir: &Path) -> Result<City> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact {
            path: dir.to_path_buf(),
            producer: "synth (or supply a city directory)".into(),
        });
    }
    let meta = read_grid_meta(dir)?;
    let cells = if dir.join("cells.csv").exists() {
        read_cells(dir, meta.edge_m)?
    } else if dir.join("pois.csv").exists() {
        let bbox = meta.bbox.ok_or_else(|| {
            Error::Data(format!(
                "{}: grid.json must give a bbox to grid raw POIs",
                dir.display()
            ))
        })?;
        let mut cells = build_hex_grid(bbox, meta.edge_m)?;
        assign_pois(&mut cells, &read_pois(dir)?)?;
        cells
    } else {
        return Err(Error::MissingArtifact {
            path: dir.join("cells.csv"),
            producer: "grid".into(),
        });
    };
    Ok(City {
        cells,
        regions: read_regions(dir)?,
        targets: read_targets(dir)?,
    })
}

pub fn write_cells(dir: &Path, cells: &CellSet, bbox: Option<BBox>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("cells.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(cells_header())?;
    for c in cells.cells() {
        let mut rec = vec![c.id.to_string(), c.center[0].to_string(), c.center[1].to_string()];
        rec.extend(c.poi.iter().map(u32::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("edges.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["cell_a", "cell_b"])?;
    for (a, b) in cells.edges() {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(
        &dir.join("grid.json"),
        &GridMeta {
            edge_m: cells.edge_m(),
            bbox,
        },
    )
}

pub fn write_regions(dir: &Path, regions: &[Region]) -> Result<()> {
    let recs: Vec<RegionRecord> = regions
        .iter()
        .map(|r| {
            if r.parts.len() == 1 {
                RegionRecord {
                    region_id: r.region_id,
                    polygon: Some(r.parts[0].clone()),
                    polygons: None,
                }
            } else {
                RegionRecord {
                    region_id: r.region_id,
                    polygon: None,
                    polygons: Some(r.parts.clone()),
                }
            }
        })
        .collect();
    write_json(&dir.join("regions.json"), &recs)
}

pub fn write_targets(dir: &Path, targets: &Targets) -> Result<()> {
    let path = dir.join("targets.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["region_id", "task_id", "value"])?;
    for &(r, u, v) in &targets.rows {
        w.write_record([r.to_string(), u.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn save_city(dir: &Path, city: &City, bbox: Option<BBox>) -> Result<()> {
    write_cells(dir, &city.cells, bbox)?;
    write_regions(dir, &city.regions)?;
    write_targets(dir, &city.targets)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: PathBuf::from(path),
            producer: producer.into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.line() as u64, e.to_string()))
}
