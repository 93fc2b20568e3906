use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::{DecoderLossKind, MaskMode};

/// Loss wiring for one distillation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub name: String,
    /// `None` disables logit distillation.
    pub decoder_loss: Option<DecoderLossKind>,
    pub mask_mode: MaskMode,
    pub use_hidden: bool,
    pub w_decoder: f64,
    pub w_hidden: f64,
}

impl DistillationConfig {
    /// Encoder-only distillation from the unadapted teacher.
    pub fn ta_kd() -> Self {
        Self {
            name: "TA-KD".into(),
            decoder_loss: None,
            mask_mode: MaskMode::Interpolated,
            use_hidden: true,
            w_decoder: 0.0,
            w_hidden: 1.0,
        }
    }

    /// The eight task-specific variants, `index ∈ 1..=8`.
    pub fn ts_kd(index: usize) -> Result<Self> {
        use DecoderLossKind::{CrossEntropy, Mse};
        use MaskMode::{DropLastChannel, Interpolated, Uninterpolated};
        let (kind, mode, use_hidden, w_decoder, w_hidden) = match index {
            1 => (Mse, DropLastChannel, true, 0.2, 1.0),
            2 => (Mse, Interpolated, true, 0.1, 1.0),
            3 => (Mse, Uninterpolated, true, 0.001, 1.0),
            4 => (CrossEntropy, Interpolated, true, 1.0, 1.0),
            5 => (CrossEntropy, Interpolated, true, 1.0, 0.1),
            6 => (Mse, Interpolated, false, 0.1, 0.0),
            7 => (Mse, Interpolated, true, 0.1, 0.1),
            8 => (Mse, Interpolated, true, 0.2, 0.1),
            _ => {
                return Err(CoreError::Config(format!(
                    "no distillation variant TS-KD{index}"
                )))
            }
        };
        Ok(Self {
            name: format!("TS-KD{index}"),
            decoder_loss: Some(kind),
            mask_mode: mode,
            use_hidden,
            w_decoder,
            w_hidden,
        })
    }

    pub fn all_ts_kd() -> Vec<Self> {
        (1..=8).map(|i| Self::ts_kd(i).unwrap()).collect()
    }

    /// Looks up `TA-KD` or `TS-KD1` … `TS-KD8` (case-insensitive).
    pub fn by_name(name: &str) -> Result<Self> {
        let upper = name.trim().to_ascii_uppercase();
        if upper == "TA-KD" {
            return Ok(Self::ta_kd());
        }
        upper
            .strip_prefix("TS-KD")
            .and_then(|n| n.parse().ok())
            .map_or_else(
                || {
                    Err(CoreError::Config(format!(
                        "unknown distillation config `{name}`"
                    )))
                },
                Self::ts_kd,
            )
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_decoder < 0.0 || self.w_hidden < 0.0 {
            return Err(CoreError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        if !self.use_hidden && self.decoder_loss.is_none() {
            return Err(CoreError::Config(format!("{} has no loss term", self.name)));
        }
        if self.name == "TA-KD"
            && (self.decoder_loss.is_some() || !self.use_hidden || self.w_hidden != 1.0)
        {
            return Err(CoreError::Config(
                "TA-KD distils hidden states only, with weight 1".into(),
            ));
        }
        if self.name == "TS-KD6" && self.use_hidden {
            return Err(CoreError::Config("TS-KD6 has no hidden-state term".into()));
        }
        Ok(())
    }

    /// Effective hidden-state weight (zero when the term is disabled).
    pub fn hidden_weight(&self) -> f64 {
        if self.use_hidden {
            self.w_hidden
        } else {
            0.0
        }
    }

    /// Effective decoder weight (zero when the term is disabled).
    pub fn decoder_weight(&self) -> f64 {
        if self.decoder_loss.is_some() {
            self.w_decoder
        } else {
            0.0
        }
    }
}
