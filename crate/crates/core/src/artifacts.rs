//! Files written next to a training run: metrics, snapshot and manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::estimator::ModelParams;
use crate::graph::DATASET_FILES;
use crate::trainer::{EpochRecord, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_FILE: &str = "model.snapshot";
pub const MANIFEST_FILE: &str = "manifest.json";

const SNAPSHOT_FORMAT: &str = "lwgcn-snapshot";
const SNAPSHOT_VERSION: u32 = 1;

/// Content hash of a dataset directory.
///
/// Each file is hashed as a git blob (`"blob <len>\0" + bytes`, SHA-256);
/// the directory hash covers the `<name> <blob hash>` lines in a fixed order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut tree = Sha256::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", bytes.len()).as_bytes());
        blob.update(&bytes);
        tree.update(format!("{name} {}\n", hex::encode(blob.finalize())).as_bytes());
    }
    Ok(hex::encode(tree.finalize()))
}

/// Trained parameters with the settings needed to rebuild the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub params: ModelParams,
}

impl Snapshot {
    pub fn new(config: &TrainConfig, params: ModelParams, best_epoch: usize, best_val_acc: f64) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            config: config.clone(),
            feature_dim: params.gcn.input_dim(),
            num_classes: params.gcn.output_dim(),
            best_epoch,
            best_val_acc,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: Self = serde_json::from_str(&text)?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::Input(format!(
                "{}: unsupported snapshot {} v{}",
                path.display(),
                snap.format,
                snap.version
            )));
        }
        snap.params.gcn.validate()?;
        if snap.params.gcn.input_dim() != snap.feature_dim || snap.params.gcn.output_dim() != snap.num_classes {
            return Err(Error::Input(format!(
                "{}: shape metadata disagrees with the filters",
                path.display()
            )));
        }
        Ok(snap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub snapshot: PathBuf,
    pub manifest: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join(METRICS_FILE),
            snapshot: dir.join(SNAPSHOT_FILE),
            manifest: dir.join(MANIFEST_FILE),
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub seed: u64,
    pub outputs: OutputPaths,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends epoch rows to a metrics CSV, flushing after each one.
pub struct MetricsWriter {
    path: PathBuf,
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", record.csv_row())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
