//! Plain ViT encoder: patch embedding, learned positions, pre-norm blocks.

use kd_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{self, Init};
use crate::data::Image;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl ViTEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.mlp_ratio <= 0.0 {
            return bad("channels and mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if (image.height, image.width, image.channels)
            != (self.image_size, self.image_size, self.channels)
        {
            return Err(CoreError::Config(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                image.height,
                image.width,
                image.channels,
                self.image_size,
                self.image_size,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Final-layer hidden states on the token grid, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl EncoderOutput {
    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Splits an image into row-major patches, each flattened as (py, px, c).
pub fn patchify(image: &Image, patch: usize) -> Tensor {
    let (gh, gw) = (image.height / patch, image.width / patch);
    let c = image.channels;
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for by in 0..gh {
        for bx in 0..gw {
            for py in 0..patch {
                let y = by * patch + py;
                let start = (y * image.width + bx * patch) * c;
                out.extend_from_slice(&image.data[start..start + patch * c]);
            }
        }
    }
    Tensor::matrix(gh * gw, dim, out).unwrap()
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Image {
    let gw = width / patch;
    let mut img = Image::zeros(height, width, channels);
    for (i, row) in patches.data().chunks(patch * patch * channels).enumerate() {
        let (by, bx) = (i / gw, i % gw);
        for py in 0..patch {
            let y = by * patch + py;
            let start = (y * width + bx * patch) * channels;
            img.data[start..start + patch * channels]
                .copy_from_slice(&row[py * patch * channels..(py + 1) * patch * channels]);
        }
    }
    img
}

pub fn init_encoder(init: &mut Init, prefix: &str, cfg: &ViTEncoderConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    init.linear(&format!("{prefix}.patch_embed"), cfg.patch_dim(), d)?;
    init.tensor(&format!("{prefix}.pos_embed"), &[cfg.tokens(), d], 0.02)?;
    for i in 0..cfg.depth {
        init.block(&format!("{prefix}.blocks.{i}"), d, cfg.mlp_dim())?;
    }
    init.layer_norm(&format!("{prefix}.norm"), d)
}

/// Optional extras for an encoder pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions<'a> {
    /// Visible token subset (sorted indices); all tokens when `None`.
    pub keep: Option<&'a [usize]>,
    /// `1 x d` row added to every token after the position embedding.
    pub condition: Option<Var>,
}

/// Runs the encoder on `N x patch_dim` patches and returns the `n x d`
/// final hidden states, `n` being the number of kept tokens.
pub fn encode(
    g: &Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &ViTEncoderConfig,
    patches: Var,
    opts: EncodeOptions,
) -> Result<Var> {
    let shape = g.shape(patches);
    if shape != [cfg.tokens(), cfg.patch_dim()] {
        return Err(CoreError::Config(format!(
            "encoder {prefix} expects {}x{} patches, got {shape:?}",
            cfg.tokens(),
            cfg.patch_dim()
        )));
    }
    let pos = g.param(store, store.require(&format!("{prefix}.pos_embed"))?);
    let (patches, pos) = match opts.keep {
        Some(idx) => (g.gather_rows(patches, idx), g.gather_rows(pos, idx)),
        None => (patches, pos),
    };
    let mut x = layers::linear(g, store, patches, &format!("{prefix}.patch_embed"))?;
    x = g.add(x, pos);
    if let Some(c) = opts.condition {
        x = g.add_row(x, c);
    }
    for i in 0..cfg.depth {
        x = layers::block(g, store, x, &format!("{prefix}.blocks.{i}"), cfg.heads)?;
    }
    layers::layer_norm(g, store, x, &format!("{prefix}.norm"))
}
