//! Files and persistence for `catflow-core`: configs, datasets, checkpoints,
//! metric CSVs and pmf images. The `catflow` binary is built on these.

pub mod checkpoint;
pub mod dataset;
mod error;
pub mod report;

use std::path::Path;

pub use catflow_core as core;
pub use error::{Error, Result};

use catflow_core::train::TrainConfig;

/// Read a `key = value` config file over the defaults. Unreadable files keep
/// the OS error; malformed contents (including unknown keys) are usage errors.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(error::io_err(path))?;
    TrainConfig::from_text(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}
