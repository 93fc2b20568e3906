//! Experiment configuration.
//!
//! Values resolve in three layers: built-in defaults, then a TOML file, then
//! command-line overrides. Every table in the file is optional; a table that
//! is present replaces only the keys it names, except schedule tables, which
//! must be given whole.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::diffusion::AugmentationSpec;
use crate::error::{CoreError, Result};
use crate::trainer::{DistillationConfig, MaeOptions, MocoOptions, OptimizerKind, Schedule};

/// How the student encoder is initialised before supervised fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Random initialisation.
    Scratch,
    /// Generic masked-autoencoder weights trained at another input size,
    /// loaded where names and shapes agree.
    ImagenetMae,
    Moco,
    Mae,
    /// Encoder-level distillation from the unadapted teacher.
    TaKd,
    /// Encoder and decoder distillation from the adapted teacher.
    TsKd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Scratch,
        Method::ImagenetMae,
        Method::Moco,
        Method::Mae,
        Method::TaKd,
        Method::TsKd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::ImagenetMae => "imagenet_mae",
            Method::Moco => "moco",
            Method::Mae => "mae",
            Method::TaKd => "ta_kd",
            Method::TsKd => "ts_kd",
        }
    }

    pub fn uses_transfer_set(self) -> bool {
        matches!(
            self,
            Method::Moco | Method::Mae | Method::TaKd | Method::TsKd
        )
    }

    pub fn needs_adapted_teacher(self) -> bool {
        self == Method::TsKd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                CoreError::Config(format!(
                    "unknown method `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Procedural data sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    /// Seed of the generated scenes, independent of the training seed.
    pub data_seed: u64,
    /// Target-task training pool; labels are drawn from it, and its images
    /// seed the transfer set.
    pub pool_size: usize,
    pub test_size: usize,
    /// Labelled pool images used to adapt the teacher.
    pub teacher_labels: usize,
    /// Broad multi-class corpus the teacher starts from.
    pub foundation_size: usize,
    /// Input size of the generic checkpoint used by `imagenet_mae`.
    pub generic_image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            data_seed: 7,
            pool_size: 200,
            test_size: 100,
            teacher_labels: 64,
            foundation_size: 400,
            generic_image_size: 32,
        }
    }
}

/// Transfer-set synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Share of the transfer set drawn from the diffusion model; the rest
    /// are affine augmentations of pool images.
    pub diffusion_fraction: f64,
    pub diffusion_steps: usize,
    pub denoiser_train_steps: usize,
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub shear_deg: (f64, f64),
    pub translate: (f64, f64),
}

impl Default for TransferConfig {
    fn default() -> Self {
        let a = AugmentationSpec::standard(0);
        Self {
            diffusion_fraction: 0.2,
            diffusion_steps: 50,
            denoiser_train_steps: 300,
            rotation_deg: a.rotation_deg,
            scale: a.scale,
            shear_deg: a.shear_deg,
            translate: a.translate,
        }
    }
}

impl TransferConfig {
    pub fn augmentation(&self, count: usize) -> AugmentationSpec {
        AugmentationSpec {
            rotation_deg: self.rotation_deg,
            scale: self.scale,
            shear_deg: self.shear_deg,
            translate: self.translate,
            count,
        }
    }

    /// (augmented, diffusion-sampled) counts for a transfer set of `size`.
    pub fn split(&self, size: usize) -> (usize, usize) {
        let diffusion = (size as f64 * self.diffusion_fraction).round() as usize;
        (size - diffusion.min(size), diffusion.min(size))
    }
}

/// One schedule per training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSet {
    /// Full-parameter training of the teacher on the broad corpus.
    pub foundation: Schedule,
    pub teacher_lora: Schedule,
    pub kd: Schedule,
    pub mae: Schedule,
    pub moco: Schedule,
    pub finetune: Schedule,
}

impl ScheduleSet {
    /// Published training recipes, unscaled.
    pub fn paper() -> Self {
        Self {
            foundation: Schedule::mae(),
            teacher_lora: Schedule::teacher_lora(),
            kd: Schedule::kd(),
            mae: Schedule::mae(),
            moco: Schedule::moco(),
            finetune: Schedule::finetune(),
        }
    }

    /// Recipes sized for one CPU and the 64x64 shapes task. Optimisers and
    /// weight decays follow the published recipes; epochs, batch sizes,
    /// warmups and learning rates are rescaled for the small data.
    pub fn desk() -> Self {
        let p = Self::paper();
        Self {
            foundation: Schedule {
                optimizer: OptimizerKind::Adamw,
                base_lr: 2e-3,
                weight_decay: 0.05,
                warmup_iters: 20,
                epochs: 15,
                batch_size: 8,
                ..p.foundation
            },
            teacher_lora: Schedule {
                warmup_iters: 16,
                epochs: 60,
                ..p.teacher_lora
            },
            kd: Schedule {
                base_lr: 1e-3,
                warmup_iters: 20,
                epochs: 20,
                batch_size: 16,
                ..p.kd
            },
            mae: Schedule {
                base_lr: 1e-3,
                warmup_iters: 20,
                epochs: 20,
                batch_size: 16,
                ..p.mae
            },
            moco: Schedule {
                base_lr: 1e-3,
                warmup_iters: 20,
                epochs: 20,
                batch_size: 16,
                ..p.moco
            },
            finetune: Schedule {
                base_lr: 1e-3,
                warmup_iters: 10,
                epochs: 60,
                ..p.finetune
            },
        }
    }

    fn all(&self) -> [(&'static str, &Schedule); 6] {
        [
            ("foundation", &self.foundation),
            ("teacher_lora", &self.teacher_lora),
            ("kd", &self.kd),
            ("mae", &self.mae),
            ("moco", &self.moco),
            ("finetune", &self.finetune),
        ]
    }
}

impl Default for ScheduleSet {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub label_budget: usize,
    pub transfer_size: usize,
    pub lora_rank: usize,
    /// Distillation variant for `ts_kd` (`TS-KD1` … `TS-KD8`).
    pub distillation: String,
    pub data: DataConfig,
    pub transfer: TransferConfig,
    pub schedules: ScheduleSet,
    pub moco: MocoOptions,
    pub mae: MaeOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            method: Method::TsKd,
            label_budget: 16,
            transfer_size: 300,
            lora_rank: 4,
            distillation: "TS-KD8".into(),
            data: DataConfig::default(),
            transfer: TransferConfig::default(),
            schedules: ScheduleSet::desk(),
            moco: MocoOptions::default(),
            mae: MaeOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn distillation_config(&self) -> Result<DistillationConfig> {
        DistillationConfig::by_name(&self.distillation)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in self.schedules.all() {
            s.validate()
                .map_err(|e| CoreError::Config(format!("schedule `{name}`: {e}")))?;
        }
        let d = &self.data;
        if d.image_size == 0 || !d.image_size.is_multiple_of(8) {
            return Err(CoreError::Config(format!(
                "image size {} must be a positive multiple of 8",
                d.image_size
            )));
        }
        if self.label_budget == 0 || self.label_budget > d.pool_size {
            return Err(CoreError::Config(format!(
                "label budget {} outside 1..={} (pool size)",
                self.label_budget, d.pool_size
            )));
        }
        if d.teacher_labels == 0 || d.teacher_labels > d.pool_size {
            return Err(CoreError::Config(format!(
                "teacher labels {} outside 1..={} (pool size)",
                d.teacher_labels, d.pool_size
            )));
        }
        if d.test_size == 0 {
            return Err(CoreError::Config("test set must be nonempty".into()));
        }
        if self.method.uses_transfer_set() && self.transfer_size == 0 {
            return Err(CoreError::Config(format!(
                "method {} needs a transfer set",
                self.method
            )));
        }
        if self.method.needs_adapted_teacher() && self.lora_rank == 0 {
            return Err(CoreError::Config("lora rank must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.transfer.diffusion_fraction) {
            return Err(CoreError::Config(format!(
                "diffusion fraction {} outside [0, 1]",
                self.transfer.diffusion_fraction
            )));
        }
        self.transfer.augmentation(1).validate()?;
        if self.moco.temperature <= 0.0 || !(0.0..=1.0).contains(&self.moco.momentum) {
            return Err(CoreError::Config(
                "moco needs temperature > 0 and momentum in [0, 1]".into(),
            ));
        }
        if !(self.mae.mask_ratio > 0.0 && self.mae.mask_ratio < 1.0) {
            return Err(CoreError::Config(format!(
                "mask ratio {} must lie in (0, 1)",
                self.mae.mask_ratio
            )));
        }
        if self.method == Method::TsKd {
            self.distillation_config()?;
        }
        Ok(())
    }
}
