//! On-disk layout of a working directory and helpers for writing artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use kd_core::checkpoint::config_hash;
use kd_core::config::{ExperimentConfig, Method};
use kd_core::trainer::RunRecord;
use kd_core::CoreError;

use crate::error::{CliError, CliResult};

pub struct Work {
    pub root: PathBuf,
}

impl Work {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn augmented(&self) -> PathBuf {
        self.root.join("transfer").join("augmented")
    }

    pub fn sampled(&self) -> PathBuf {
        self.root.join("transfer").join("diffusion")
    }

    pub fn diffusion(&self) -> PathBuf {
        self.root.join("diffusion")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.diffusion().join("denoiser.ckpt")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher")
    }

    pub fn foundation(&self) -> PathBuf {
        self.teacher().join("foundation.ckpt")
    }

    pub fn adapted(&self) -> PathBuf {
        self.teacher().join("adapted.ckpt")
    }

    pub fn selected_rank(&self) -> PathBuf {
        self.teacher().join("selected_rank.txt")
    }

    pub fn students(&self) -> PathBuf {
        self.root.join("students")
    }

    /// Directory of one pretraining cell. Methods without a transfer set
    /// ignore `transfer_size`.
    pub fn cell(
        &self,
        method: Method,
        transfer_size: usize,
        distillation: &str,
        seed: u64,
    ) -> PathBuf {
        let name = match method {
            Method::Scratch | Method::ImagenetMae => method.as_str().to_string(),
            Method::TsKd => format!(
                "{}-t{transfer_size}-{}",
                method.as_str(),
                distillation.to_lowercase()
            ),
            _ => format!("{}-t{transfer_size}", method.as_str()),
        };
        self.students().join(name).join(format!("seed-{seed}"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub fn require(path: &Path, artifact: &str, command: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            artifact: format!("{artifact} ({})", path.display()),
            command,
        })
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CoreError::io(path, e).into())
}

/// Saves `record` into `dir` with the resolved experiment configuration
/// echoed under `"experiment"`. Wall-clock time goes to a separate
/// `timing.json` so the record itself is identical across reruns.
pub fn save_record(mut record: RunRecord, cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    let echo = serde_json::to_value(cfg).expect("config serialises");
    match record.config.as_object_mut() {
        Some(obj) => {
            obj.insert("experiment".into(), echo);
        }
        None => {
            record.config = serde_json::json!({ "stage": record.config, "experiment": echo });
        }
    }
    record.config_hash = config_hash(&record.config);
    let secs = std::mem::take(&mut record.wall_clock_secs);
    record.save(dir)?;
    write(
        &dir.join("timing.json"),
        serde_json::json!({ "wall_clock_secs": secs }).to_string(),
    )
}

/// Exclusive marker for a cell directory, removed on drop.
pub struct CellLock {
    path: PathBuf,
}

impl CellLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Other(format!(
                    "{} is in use by another run (delete {} if it is stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CoreError::io(&path, e).into()),
        }
    }
}

impl Drop for CellLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
