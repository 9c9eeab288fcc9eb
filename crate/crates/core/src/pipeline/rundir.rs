//! Run directory layout.
//!
//! ```text
//! R/config        resolved RunConfig (TOML)
//! R/checkpoints/  parameter archives
//! R/metrics       `<episode> <L_l> <L_r> <L>` per training episode
//! R/loss_curve    `<iteration> <L_c>` per pretraining step
//! R/report        EvalReport (TOML)
//! R/predictions/  PLY exports
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory. An existing non-empty directory is an
    /// error unless `force`, in which case it is cleared.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        claim_dir(root, force)?;
        let run = Self {
            root: root.to_path_buf(),
        };
        for dir in [run.checkpoints(), run.predictions()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(run)
    }

    /// Opens an existing run.
    pub fn open(root: &Path) -> Result<Self> {
        let run = Self {
            root: root.to_path_buf(),
        };
        if !run.config().is_file() {
            return Err(Error::InvalidInput(format!("{} is not a run directory (no config)", root.display())));
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(name)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn loss_curve(&self) -> PathBuf {
        self.root.join("loss_curve")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
}

/// Creates `root` as an empty directory. An existing non-empty directory is an
/// error unless `force`, in which case it is cleared.
pub fn claim_dir(root: &Path, force: bool) -> Result<()> {
    if root.exists() {
        let occupied = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if occupied {
            if !force {
                return Err(Error::Exists(root.to_path_buf()));
            }
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

/// Checkpoint file names.
pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const HEAD_CKPT: &str = "head.ckpt";
pub const AUGMENTOR_CKPT: &str = "augmentor.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
