use kd_autograd::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use super::layers::{self, Init};
use super::resample::{resize_var, Resample};
use super::vit::{self, EncodeOptions, EncoderOutput, ViTEncoderConfig};
use super::{Resolution, SegLogits};
use crate::checkpoint::{config_hash, CheckpointBundle, CheckpointMeta};
use crate::data::Image;
use crate::error::{CoreError, Result};
use crate::lora;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub encoder: ViTEncoderConfig,
    /// Target classes; the decoder emits one extra auxiliary channel.
    pub classes: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_channels: usize,
}

impl TeacherConfig {
    /// Desk-scale default: twice the student width, 6 blocks.
    pub fn desk(classes: usize) -> Self {
        Self {
            encoder: ViTEncoderConfig {
                image_size: 64,
                patch_size: 8,
                channels: 1,
                embed_dim: 64,
                depth: 6,
                heads: 4,
                mlp_ratio: 2.0,
            },
            classes,
            decoder_dim: 32,
            decoder_heads: 2,
            decoder_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !self.encoder.image_size.is_multiple_of(4) {
            return Err(CoreError::Config(format!(
                "teacher image size {} is not divisible by 4",
                self.encoder.image_size
            )));
        }
        if self.classes < 2 || self.decoder_channels == 0 {
            return Err(CoreError::Config(
                "teacher needs ≥2 classes and a nonzero decoder width".into(),
            ));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(CoreError::Config(format!(
                "decoder width {} is not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        Ok(())
    }

    /// Side length of the low-resolution logits.
    pub fn low_size(&self) -> usize {
        self.encoder.image_size / 4
    }
}

/// Graph handles from one teacher pass.
#[derive(Debug, Clone, Copy)]
pub struct TeacherVars {
    pub tokens: Var,
    /// `(S/4)^2 x (C+1)` logits including the auxiliary last channel.
    pub raw_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub config: TeacherConfig,
    pub params: ParamStore,
    /// Set once the teacher has been adapted to the target task.
    pub fine_tuned: bool,
}

impl Teacher {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, "teacher-init");
        let mut init = Init {
            store: &mut params,
            rng: &mut r,
        };
        vit::init_encoder(&mut init, "encoder", &config.encoder)?;
        let dd = config.decoder_dim;
        let cc = config.decoder_channels;
        init.linear("decoder.input", config.encoder.embed_dim, dd)?;
        init.block("decoder.block", dd, 2 * dd)?;
        init.layer_norm("decoder.norm", dd)?;
        init.linear("decoder.reduce", dd, cc)?;
        init.conv3x3("decoder.conv", cc, cc)?;
        init.linear("decoder.head", cc, config.classes + 1)?;
        Ok(Self {
            config,
            params,
            fine_tuned: false,
        })
    }

    /// Replaces the output layer with a freshly initialised one for
    /// `classes` target classes. The new layer is trainable.
    pub fn reset_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(CoreError::Config("teacher needs ≥2 classes".into()));
        }
        self.params.remove("decoder.head.weight");
        self.params.remove("decoder.head.bias");
        let mut r = rng::stream(seed, "teacher-head-init");
        let mut init = Init {
            store: &mut self.params,
            rng: &mut r,
        };
        init.linear("decoder.head", self.config.decoder_channels, classes + 1)?;
        self.config.classes = classes;
        self.fine_tuned = false;
        Ok(())
    }

    pub fn encode(&self, g: &Graph, image: &Image) -> Result<Var> {
        self.config.encoder.check_image(image)?;
        let patches = g.constant(vit::patchify(image, self.config.encoder.patch_size));
        vit::encode(
            g,
            &self.params,
            "encoder",
            &self.config.encoder,
            patches,
            EncodeOptions::default(),
        )
    }

    /// Mask decoder on an `N x d_T` token grid.
    pub fn decode(&self, g: &Graph, tokens: Var) -> Result<Var> {
        let p = &self.params;
        let grid = self.config.encoder.grid();
        let x = layers::linear(g, p, tokens, "decoder.input")?;
        let x = layers::block(g, p, x, "decoder.block", self.config.decoder_heads)?;
        let x = layers::layer_norm(g, p, x, "decoder.norm")?;
        let x = layers::linear(g, p, x, "decoder.reduce")?;
        let up = 2 * grid;
        let x = resize_var(g, x, (grid, grid), (up, up), Resample::Bilinear);
        let x = g.relu(layers::conv3x3(g, p, x, "decoder.conv", up, up)?);
        let low = self.config.low_size();
        let x = resize_var(g, x, (up, up), (low, low), Resample::Bilinear);
        layers::linear(g, p, x, "decoder.head")
    }

    pub fn forward(&self, g: &Graph, image: &Image) -> Result<TeacherVars> {
        let tokens = self.encode(g, image)?;
        let raw_logits = self.decode(g, tokens)?;
        Ok(TeacherVars { tokens, raw_logits })
    }

    /// The `C` class channels of the raw logits.
    pub fn class_logits(&self, g: &Graph, raw: Var) -> Var {
        g.slice_cols(raw, 0, self.config.classes)
    }

    /// Inference pass: hidden states and the `C+1`-channel low-resolution
    /// logits. Use [`SegLogits`] helpers or [`Teacher::predict`] for the
    /// class channels only.
    pub fn predict_raw(&self, image: &Image) -> Result<(EncoderOutput, SegLogits)> {
        let g = Graph::new();
        let v = self.forward(&g, image)?;
        let grid = self.config.encoder.grid();
        let low = self.config.low_size();
        Ok((
            EncoderOutput {
                tokens: (*g.value(v.tokens)).clone(),
                grid_h: grid,
                grid_w: grid,
            },
            SegLogits {
                logits: (*g.value(v.raw_logits)).clone(),
                height: low,
                width: low,
                resolution: Resolution::Low,
            },
        ))
    }

    /// Inference pass returning hidden states and `C`-channel low logits.
    pub fn predict(&self, image: &Image) -> Result<(EncoderOutput, SegLogits)> {
        let (enc, raw) = self.predict_raw(image)?;
        Ok((enc, drop_last_channel(&raw)))
    }
}

/// Removes the final channel of a logit map.
pub fn drop_last_channel(l: &SegLogits) -> SegLogits {
    let c = l.classes();
    let data = l
        .logits
        .data()
        .chunks(c)
        .flat_map(|row| row[..c - 1].iter().copied())
        .collect();
    SegLogits {
        logits: kd_autograd::Tensor::matrix(l.height * l.width, c - 1, data).unwrap(),
        ..l.clone()
    }
}

impl Teacher {
    pub const KIND: &'static str = "teacher";

    pub fn to_bundle(&self, step: u64) -> CheckpointBundle {
        let mut meta = CheckpointMeta {
            model_kind: Self::KIND.into(),
            step,
            config_hash: config_hash(&self.config),
            ..Default::default()
        };
        meta.attrs.insert(
            "config".into(),
            serde_json::to_string(&self.config).expect("config serialises"),
        );
        meta.attrs
            .insert("fine_tuned".into(), self.fine_tuned.to_string());
        CheckpointBundle::from_store(&self.params, meta)
    }

    /// Restores a teacher; adapter tensors, if present, come back trainable
    /// over a frozen base.
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        if bundle.meta.model_kind != Self::KIND {
            return Err(CoreError::Format(format!(
                "expected a teacher checkpoint, found `{}`",
                bundle.meta.model_kind
            )));
        }
        let attr = |k: &str| {
            bundle
                .meta
                .attrs
                .get(k)
                .ok_or_else(|| CoreError::Format(format!("checkpoint lacks `{k}`")))
        };
        let config: TeacherConfig = serde_json::from_str(attr("config")?)
            .map_err(|e| CoreError::Format(format!("model config: {e}")))?;
        config.validate()?;
        let fine_tuned = attr("fine_tuned")? == "true";
        let mut params = bundle.to_store()?;
        let expected = Teacher::new(config.clone(), 0)?;
        for p in expected.params.iter() {
            match params.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                _ => {
                    return Err(CoreError::Format(format!(
                        "checkpoint tensor `{}` missing or misshapen",
                        p.name
                    )))
                }
            }
        }
        if lora::has_adapters(&params) {
            lora::freeze_base(&mut params);
        }
        Ok(Self {
            config,
            params,
            fine_tuned,
        })
    }
}
