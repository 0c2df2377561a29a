//! CSV tables of embeddings, predictions and priors.

use std::path::Path;

use crate::diffusion::PredictionSet;
use crate::error::{Error, Result};

fn schema(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Schema {
        file: path.display().to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

/// `id,{prefix}_0,...` rows; values written with full f32 round-trip precision.
pub fn write_embeddings(path: &Path, id_col: &str, prefix: &str, rows: &[(u64, Vec<f32>)]) -> Result<()> {
    let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![id_col.to_string()];
    header.extend((0..dim).map(|i| format!("{prefix}_{i}")));
    w.write_record(&header)?;
    for (id, x) in rows {
        if x.len() != dim {
            return Err(Error::Data(format!("row {id} has {} values, expected {dim}", x.len())));
        }
        let mut rec = vec![id.to_string()];
        rec.extend(x.iter().map(f32::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path, id_col: &str, producer: &str) -> Result<Vec<(u64, Vec<f32>)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.into(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0) != Some(id_col) || header.len() < 2 {
        return Err(schema(
            path,
            1,
            format!("expected header starting with {id_col} and at least one value column"),
        ));
    }
    let dim = header.len() - 1;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != dim + 1 {
            return Err(schema(
                path,
                line,
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| schema(path, line, format!("cannot parse id {:?}", &rec[0])))?;
        let x = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| schema(path, line, format!("bad embedding value {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id, x));
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[PredictionSet]) -> Result<()> {
    let rounds = preds.iter().map(|p| p.samples.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["region_id".to_string(), "task_id".into(), "point".into()];
    header.extend((0..rounds).map(|i| format!("sample_{i}")));
    w.write_record(&header)?;
    for p in preds {
        let mut rec = vec![p.region_id.to_string(), p.task.to_string(), p.point.to_string()];
        rec.extend(p.samples.iter().map(f64::to_string));
        rec.resize(header.len(), String::new());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(region, task, point, samples)` rows.
pub type PredictionRow = (u64, usize, f64, Vec<f64>);

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: "predict".into(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| schema(path, line, format!("bad value in column {i}")))
        };
        let region = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| schema(path, line, "bad region_id"))?;
        let task = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| schema(path, line, "bad task_id"))?;
        let samples = (3..rec.len())
            .filter(|&i| !rec[i].is_empty())
            .map(parse)
            .collect::<Result<Vec<_>>>()?;
        out.push((region, task, parse(2)?, samples));
    }
    Ok(out)
}

pub fn write_priors(path: &Path, preds: &[PredictionSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["region_id", "task_id", "prior", "neighbors", "weights"])?;
    for p in preds {
        let join = |v: Vec<String>| v.join(";");
        w.write_record([
            p.region_id.to_string(),
            p.task.to_string(),
            p.prior.to_string(),
            join(p.neighbors.iter().map(u64::to_string).collect()),
            join(p.weights.iter().map(f64::to_string).collect()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
