//! Transfer-set synthesis: geometric augmentation and a small denoising
//! diffusion model trained on the augmented images.
//!
//! The diffusion model works on pixels mapped to [-1,1], predicts the added
//! noise, and samples ancestrally with reverse variance `beta_t`.

mod augment;
mod denoiser;
mod schedule;

use kd_autograd::{Adam, Graph};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Provenance, TransferSet};
use crate::error::{CoreError, Result};
use crate::metrics::psnr_mse;
use crate::models::vit;
use crate::rng;

pub use augment::{augment_base_set, rotate, warp, Affine, AugmentationSpec};
pub use denoiser::{
    from_model_space, timestep_features, to_model_space, Denoiser, DenoiserConfig, NoisePredictor,
};
pub use schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl DenoiserTraining {
    pub fn desk(steps: usize) -> Self {
        Self {
            steps,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

/// Trains a fresh denoiser on noise prediction and returns it with the
/// per-step loss.
pub fn train_denoiser(
    images: &[Image],
    cfg: &DenoiserConfig,
    sched: &DiffusionSchedule,
    training: &DenoiserTraining,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    if images.is_empty() {
        return Err(CoreError::Dataset(
            "no images to train the denoiser on".into(),
        ));
    }
    if training.batch_size == 0 || training.lr <= 0.0 {
        return Err(CoreError::Config(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut model = Denoiser::new(cfg.clone(), seed)?;
    let data: Vec<Image> = images.iter().map(to_model_space).collect();
    let mut r = rng::stream(seed, "denoiser-train");
    let mut opt = Adam::adamw(training.weight_decay);
    let mut losses = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let g = Graph::new();
        let mut terms = Vec::with_capacity(training.batch_size);
        for _ in 0..training.batch_size {
            let x0 = &data[r.random_range(0..data.len())];
            let t = r.random_range(1..=sched.steps());
            let eps = rng::normal_vec(&mut r, x0.data.len(), 1.0);
            let xt = Image::new(
                x0.height,
                x0.width,
                x0.channels,
                sched.q_sample(&x0.data, t, &eps)?,
            )?;
            let eps_img = Image::new(x0.height, x0.width, x0.channels, eps)?;
            let target = g.constant(vit::patchify(&eps_img, cfg.patch_size));
            let pred = model.forward(&g, &xt, t)?;
            terms.push(g.mean(g.square(g.sub(pred, target))));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t);
        }
        let loss = g.scale(loss, 1.0 / training.batch_size as f64);
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(CoreError::Numerical(format!(
                "denoiser loss became {value} at step {step}"
            )));
        }
        let mut grads = g.backward(loss);
        grads.clip_global_norm(1.0);
        opt.step(&mut model.params, &grads, training.lr);
        losses.push(value);
    }
    Ok((model, losses))
}

/// Ancestral sampling from pure noise down to step 0; image `i` uses its own
/// stream derived from `seed` so counts can change without reshuffling.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    count: usize,
    seed: u64,
) -> Result<TransferSet> {
    let (h, w, c) = model.image_shape();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, &format!("diffusion-sample-{i}"));
        let mut x = Image::new(h, w, c, rng::normal_vec(&mut r, h * w * c, 1.0))?;
        for t in (1..=sched.steps()).rev() {
            let eps = model.predict_noise(&x, t)?;
            let mut mean = sched.posterior_mean(&x.data, t, &eps.data);
            if t > 1 {
                let s = sched.sigma(t);
                for v in mean.iter_mut() {
                    *v += s * rng::normal(&mut r);
                }
            }
            x = Image::new(h, w, c, mean)?;
        }
        if !x.is_finite() {
            return Err(CoreError::Numerical(format!("sample {i} is not finite")));
        }
        out.push(from_model_space(&x));
    }
    TransferSet::new(out, Provenance::DiffusionSampled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferQuality {
    pub mean_psnr: f64,
    pub mean_mse: f64,
    /// Index of the nearest reference for each generated image.
    pub matches: Vec<usize>,
}

/// Scores each generated image against its nearest reference by MSE.
pub fn evaluate_transfer(generated: &[Image], reference: &[Image]) -> Result<TransferQuality> {
    if generated.is_empty() || reference.is_empty() {
        return Err(CoreError::Dataset(
            "transfer evaluation needs nonempty sets".into(),
        ));
    }
    let mut matches = Vec::with_capacity(generated.len());
    let (mut psnr, mut mse) = (0.0, 0.0);
    for g in generated {
        let mut best: Option<(usize, crate::metrics::PsnrMse)> = None;
        for (j, r) in reference.iter().enumerate() {
            let q = psnr_mse(g, r, 255.0)?;
            if best.as_ref().is_none_or(|(_, b)| q.mse < b.mse) {
                best = Some((j, q));
            }
        }
        let (j, q) = best.unwrap();
        matches.push(j);
        psnr += q.psnr_db;
        mse += q.mse;
    }
    let n = generated.len() as f64;
    Ok(TransferQuality {
        mean_psnr: psnr / n,
        mean_mse: mse / n,
        matches,
    })
}
