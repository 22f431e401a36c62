//! Step loops, checkpoints and logs for the autoencoder and diffusion stages.

mod autoencoder;
mod common;
mod config;
mod diffusion;

pub use autoencoder::{load_autoencoder, AutoencoderTrainer, AE_MAGIC};
pub use config::{Precision, Stage, TrainConfig, TrainLogRecord};
pub use diffusion::{
    compatibility_issues, load_diffusion, DiffusionBundle, DiffusionTrainer, LDM_MAGIC,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Appends log records to a JSON-Lines file.
pub struct JsonlLog {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: std::io::BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &TrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file
            .write_all(b"\n")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
