use kd_autograd::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use super::layers::{self, Init};
use super::resample::{resize_var, Resample};
use super::vit::{self, EncodeOptions, EncoderOutput, ViTEncoderConfig};
use super::{Resolution, SegLogits};
use crate::checkpoint::{config_hash, CheckpointBundle, CheckpointMeta};
use crate::data::Image;
use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub encoder: ViTEncoderConfig,
    pub classes: usize,
    /// Channel width inside the pyramid head.
    pub head_channels: usize,
}

impl StudentConfig {
    /// Desk-scale default: 64x64 grayscale, patch 8, width 32, depth 4.
    pub fn desk(classes: usize) -> Self {
        Self {
            encoder: ViTEncoderConfig {
                image_size: 64,
                patch_size: 8,
                channels: 1,
                embed_dim: 32,
                depth: 4,
                heads: 2,
                mlp_ratio: 2.0,
            },
            classes,
            head_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes < 2 || self.head_channels == 0 {
            return Err(CoreError::Config(
                "student needs ≥2 classes and a nonzero head width".into(),
            ));
        }
        if self.encoder.grid() < 2 {
            return Err(CoreError::Config(
                "pyramid head needs a token grid of at least 2x2".into(),
            ));
        }
        Ok(())
    }

    /// Side lengths of the pyramid levels, coarse to fine: G/2, G, 2G.
    pub fn pyramid(&self) -> [usize; 3] {
        let g = self.encoder.grid();
        [(g / 2).max(1), g, 2 * g]
    }

    /// Resolution of the refinement level; equals 2G when no refinement runs.
    pub fn refine_size(&self) -> usize {
        let s = self.encoder.image_size;
        let g2 = 2 * self.encoder.grid();
        s.min(g2.max(s / 2))
    }
}

/// Graph handles from one student pass.
#[derive(Debug, Clone, Copy)]
pub struct StudentVars {
    /// `N x d` final hidden states.
    pub tokens: Var,
    /// `(S*S) x C` full-resolution logits.
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub config: StudentConfig,
    pub params: ParamStore,
}

impl Student {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, "student-init");
        let mut init = Init {
            store: &mut params,
            rng: &mut r,
        };
        vit::init_encoder(&mut init, "encoder", &config.encoder)?;
        let (d, c) = (config.encoder.embed_dim, config.head_channels);
        init.linear("head.lateral", d, c)?;
        for k in 0..3 {
            init.conv3x3(&format!("head.smooth{k}"), c, c)?;
        }
        if config.refine_size() > 2 * config.encoder.grid() {
            init.conv3x3("head.refine", c, c)?;
        }
        init.linear("head.cls", c, config.classes)?;
        Ok(Self { config, params })
    }

    pub fn encode(&self, g: &Graph, image: &Image, opts: EncodeOptions) -> Result<Var> {
        self.config.encoder.check_image(image)?;
        let patches = g.constant(vit::patchify(image, self.config.encoder.patch_size));
        vit::encode(
            g,
            &self.params,
            "encoder",
            &self.config.encoder,
            patches,
            opts,
        )
    }

    /// Pyramid head on an `N x d` token grid.
    pub fn head(&self, g: &Graph, tokens: Var) -> Result<Var> {
        let p = &self.params;
        let [lo, mid, hi] = self.config.pyramid();
        let lateral = layers::linear(g, p, tokens, "head.lateral")?;
        let p_lo = resize_var(g, lateral, (mid, mid), (lo, lo), Resample::Area);
        let p_hi = resize_var(g, lateral, (mid, mid), (hi, hi), Resample::Bilinear);

        let f_lo = g.relu(layers::conv3x3(g, p, p_lo, "head.smooth0", lo, lo)?);
        let up = resize_var(g, f_lo, (lo, lo), (mid, mid), Resample::Bilinear);
        let f_mid = g.relu(layers::conv3x3(
            g,
            p,
            g.add(lateral, up),
            "head.smooth1",
            mid,
            mid,
        )?);
        let up = resize_var(g, f_mid, (mid, mid), (hi, hi), Resample::Bilinear);
        let mut f = g.relu(layers::conv3x3(
            g,
            p,
            g.add(p_hi, up),
            "head.smooth2",
            hi,
            hi,
        )?);
        let mut res = hi;

        let fine = self.config.refine_size();
        if fine > hi {
            let up = resize_var(g, f, (hi, hi), (fine, fine), Resample::Bilinear);
            f = g.relu(layers::conv3x3(g, p, up, "head.refine", fine, fine)?);
            res = fine;
        }
        let logits = layers::linear(g, p, f, "head.cls")?;
        let s = self.config.encoder.image_size;
        Ok(resize_var(
            g,
            logits,
            (res, res),
            (s, s),
            Resample::Bilinear,
        ))
    }

    pub fn forward(&self, g: &Graph, image: &Image) -> Result<StudentVars> {
        let tokens = self.encode(g, image, EncodeOptions::default())?;
        let logits = self.head(g, tokens)?;
        Ok(StudentVars { tokens, logits })
    }

    /// Inference pass returning plain tensors.
    pub fn predict(&self, image: &Image) -> Result<(EncoderOutput, SegLogits)> {
        let g = Graph::new();
        let v = self.forward(&g, image)?;
        let grid = self.config.encoder.grid();
        let s = self.config.encoder.image_size;
        Ok((
            EncoderOutput {
                tokens: (*g.value(v.tokens)).clone(),
                grid_h: grid,
                grid_w: grid,
            },
            SegLogits {
                logits: (*g.value(v.logits)).clone(),
                height: s,
                width: s,
                resolution: Resolution::Full,
            },
        ))
    }
}

impl Student {
    pub const KIND: &'static str = "student";

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
                "expected a student checkpoint, found `{}`",
                bundle.meta.model_kind
            )));
        }
        let config: StudentConfig = serde_json::from_str(
            bundle
                .meta
                .attrs
                .get("config")
                .ok_or_else(|| CoreError::Format("checkpoint lacks a model config".into()))?,
        )
        .map_err(|e| CoreError::Format(format!("model config: {e}")))?;
        config.validate()?;
        let params = bundle.to_store()?;
        let expected = Student::new(config.clone(), 0)?;
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
        Ok(Self { config, params })
    }
}
