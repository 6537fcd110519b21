//! Optional TOML configuration. Every key mirrors a command-line flag;
//! flags win when both are given.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tmf_core::TmfError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub frame_length: Option<usize>,
    pub stride_af: Option<usize>,
    pub stride_nonaf: Option<usize>,
    pub norm: Option<String>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub scale: Option<String>,

    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
    pub validation_fraction: Option<f64>,
    pub test_fraction: Option<f64>,
    pub stratify: Option<bool>,

    pub head: Option<String>,
    pub extractor: Option<String>,
    pub features_dir: Option<PathBuf>,
    pub blocks: Option<Vec<usize>>,
    pub freeze: Option<bool>,
    pub seeds: Option<Vec<u64>>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub search_budget: Option<usize>,

    pub threshold: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, TmfError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TmfError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| TmfError::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag value, else config value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
