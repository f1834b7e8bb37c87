use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, LayerTable};
use crate::recurrent::Combine;
use crate::series::Case;

pub const SEED_ENV: &str = "QUAKECAST_SEED";

/// Optional settings read from `--config FILE`. Flags override these and
/// these override built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub min_mag: Option<f64>,
    pub bbox: Option<[f64; 4]>,
    pub case: Option<Case>,
    pub window: Option<usize>,
    pub split: Option<f64>,
    pub architecture: Option<Architecture>,
    pub dropout: Option<f64>,
    pub combine: Option<Combine>,
    pub pool_stride: Option<usize>,
    pub layers: Option<LayerTable>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_start: Option<f64>,
    pub lr_end: Option<f64>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag, then file, then `QUAKECAST_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
