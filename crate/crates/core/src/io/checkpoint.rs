//! Parameter checkpoints: a JSON manifest next to a little-endian f32 payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub component: String,
    pub arrays: Vec<ArrayEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(stem: &Path, component: &str, store: &ParamStore<f32>) -> Result<Manifest> {
    let (mpath, bpath) = paths(stem);
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut payload = Vec::with_capacity(store.num_scalars() * 4);
    let mut arrays = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        component: component.into(),
        arrays,
    };
    std::fs::write(&bpath, &payload).map_err(|e| Error::io(&bpath, e))?;
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Fills every array of `store` by name from the checkpoint at `stem`.
///
/// The checkpoint must list exactly the arrays of `store`, with matching shapes.
pub fn load_checkpoint(stem: &Path, component: &str, store: &mut ParamStore<f32>, producer: &str) -> Result<()> {
    let (mpath, bpath) = paths(stem);
    if !mpath.exists() || !bpath.exists() {
        return Err(Error::MissingArtifact {
            path: mpath,
            producer: producer.into(),
        });
    }
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (expected {CHECKPOINT_VERSION})",
            mpath.display(),
            manifest.version
        )));
    }
    if manifest.component != component {
        return Err(Error::Checkpoint(format!(
            "{}: holds component {:?}, expected {component:?}",
            mpath.display(),
            manifest.component
        )));
    }
    let payload = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut expected = 0usize;
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        if a.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "array {} has unsupported dtype {}",
                a.name, a.dtype
            )));
        }
        let bytes = a.shape.iter().product::<usize>() * 4;
        spans.push((a.offset, a.offset + bytes));
        expected += bytes;
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(Error::Checkpoint("array offsets overlap".into()));
    }
    if payload.len() != expected || spans.last().is_some_and(|s| s.1 > payload.len()) {
        return Err(Error::Checkpoint(format!(
            "{}: payload is {} bytes, manifest describes {expected}",
            bpath.display(),
            payload.len()
        )));
    }
    if manifest.arrays.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} arrays, model expects {}",
            manifest.arrays.len(),
            store.len()
        )));
    }
    for a in &manifest.arrays {
        let id = store
            .find(&a.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array {}", a.name)))?;
        let n: usize = a.shape.iter().product();
        let data = payload[a.offset..a.offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store
            .set(id, Tensor::new(&a.shape, data)?)
            .map_err(|_| Error::Checkpoint(format!("array {} has shape {:?}, model differs", a.name, a.shape)))?;
    }
    Ok(())
}
