//! File formats: city directories, CSV tables, checkpoints and synthetic cities.

pub mod checkpoint;
pub mod dataset;
pub mod synth;
pub mod tables;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_VERSION};
pub use dataset::{load_city, read_json, save_city, write_json, City, GridMeta, Targets, POI_CATEGORIES};
pub use synth::{generate_synthetic, write_synthetic, SyntheticSpec, SyntheticTask, TaskFunction, TruthManifest};
