use kd_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, CheckpointBundle, CheckpointMeta};
use crate::data::Image;
use crate::error::{CoreError, Result};
use crate::models::layers::{self, Init};
use crate::models::vit::{self, EncodeOptions, ViTEncoderConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn desk(image_size: usize) -> Self {
        Self {
            image_size,
            channels: 1,
            patch_size: 4,
            dim: 48,
            depth: 3,
            heads: 3,
            mlp_ratio: 2.0,
            time_dim: 32,
        }
    }

    pub fn encoder(&self) -> ViTEncoderConfig {
        ViTEncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "time embedding width {} must be even",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of the timestep: `[sin(t w_k), cos(t w_k)]` with
/// geometric frequencies `w_k = 10000^(-k / (dim/2))`.
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        v.push((t as f64 * w).sin());
    }
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        v.push((t as f64 * w).cos());
    }
    Tensor::matrix(1, dim, v).unwrap()
}

/// Anything that predicts the noise in `x_t` (model space, see
/// [`to_model_space`]).
pub trait NoisePredictor {
    fn image_shape(&self) -> (usize, usize, usize);
    fn predict_noise(&self, x_t: &Image, t: usize) -> Result<Image>;
}

/// Maps [0,1] pixels to [-1,1].
pub fn to_model_space(img: &Image) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = 2.0 * *v - 1.0;
    }
    out
}

/// Maps [-1,1] back to [0,1], clipping.
pub fn from_model_space(img: &Image) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = ((*v + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    out
}

/// Patch transformer predicting per-pixel noise, conditioned on the
/// timestep through a vector added to every token.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, "denoiser-init");
        let mut init = Init {
            store: &mut params,
            rng: &mut r,
        };
        let enc = config.encoder();
        vit::init_encoder(&mut init, "encoder", &enc)?;
        init.linear("time.fc1", config.time_dim, config.dim)?;
        init.linear("time.fc2", config.dim, config.dim)?;
        init.linear("out", config.dim, enc.patch_dim())?;
        Ok(Self { config, params })
    }

    /// `N x patch_dim` noise prediction.
    pub fn forward(&self, g: &Graph, x_t: &Image, t: usize) -> Result<Var> {
        let enc = self.config.encoder();
        enc.check_image(x_t)?;
        let p = &self.params;
        let tf = g.constant(timestep_features(t, self.config.time_dim));
        let te = g.gelu(layers::linear(g, p, tf, "time.fc1")?);
        let te = layers::linear(g, p, te, "time.fc2")?;
        let patches = g.constant(vit::patchify(x_t, self.config.patch_size));
        let h = vit::encode(
            g,
            p,
            "encoder",
            &enc,
            patches,
            EncodeOptions {
                keep: None,
                condition: Some(te),
            },
        )?;
        layers::linear(g, p, h, "out")
    }
}

impl Denoiser {
    pub const KIND: &'static str = "denoiser";

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
        CheckpointBundle::from_store(&self.params, meta)
    }

    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        if bundle.meta.model_kind != Self::KIND {
            return Err(CoreError::Format(format!(
                "expected a denoiser checkpoint, found `{}`",
                bundle.meta.model_kind
            )));
        }
        let text = bundle
            .meta
            .attrs
            .get("config")
            .ok_or_else(|| CoreError::Format("checkpoint lacks a model config".into()))?;
        let config: DenoiserConfig = serde_json::from_str(text)
            .map_err(|e| CoreError::Format(format!("model config: {e}")))?;
        let expected = Denoiser::new(config.clone(), 0)?;
        let params = bundle.to_store()?;
        for p in expected.params.iter() {
            if params.get(&p.name).map(|t| t.shape()) != Some(p.value.shape()) {
                return Err(CoreError::Format(format!(
                    "checkpoint tensor `{}` missing or misshapen",
                    p.name
                )));
            }
        }
        Ok(Self { config, params })
    }
}

impl NoisePredictor for Denoiser {
    fn image_shape(&self) -> (usize, usize, usize) {
        (
            self.config.image_size,
            self.config.image_size,
            self.config.channels,
        )
    }

    fn predict_noise(&self, x_t: &Image, t: usize) -> Result<Image> {
        let g = Graph::new();
        let out = self.forward(&g, x_t, t)?;
        let s = self.config.image_size;
        Ok(vit::unpatchify(
            &g.value(out),
            s,
            s,
            self.config.channels,
            self.config.patch_size,
        ))
    }
}
