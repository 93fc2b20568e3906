//! Self-supervised baselines: momentum contrast and masked autoencoding.

use kd_autograd::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{mean_of, Loop, RunRecord, Schedule};
use crate::data::{Image, TransferSet};
use crate::diffusion::{warp, Affine};
use crate::error::{CoreError, Result};
use crate::losses::{mae_loss, moco_loss, momentum_update, MaeLossScope};
use crate::models::layers::{self, Init};
use crate::models::vit::{self, EncodeOptions};
use crate::models::Student;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoOptions {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for MocoOptions {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            momentum: 0.99,
            queue_size: 256,
            hidden_dim: 64,
            out_dim: 32,
        }
    }
}

/// Two independently augmented views: random zoom-crop, horizontal flip and
/// brightness/contrast jitter.
pub fn two_views(image: &Image, rng: &mut Rng) -> (Image, Image) {
    (augment_view(image, rng), augment_view(image, rng))
}

fn augment_view(image: &Image, rng: &mut Rng) -> Image {
    let (h, w, _) = image.shape();
    let zoom = rng.random_range(1.0..1.5);
    let slack_y = (h as f64 - 1.0) * (zoom - 1.0) / 2.0;
    let slack_x = (w as f64 - 1.0) * (zoom - 1.0) / 2.0;
    let t = (
        rng.random_range(-slack_y..=slack_y),
        rng.random_range(-slack_x..=slack_x),
    );
    let mut out = warp(image, &Affine::new(0.0, zoom, 0.0, t));
    let flip = rng.random_bool(0.5);
    let contrast = rng.random_range(0.8..1.2);
    let brightness = rng.random_range(-0.1..0.1);
    let src = out.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            for c in 0..src.shape().2 {
                let v = (src.get(y, sx, c) - 0.5) * contrast + 0.5 + brightness;
                out.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn mlp(g: &Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let h = g.relu(layers::linear(g, store, x, &format!("{name}.fc1"))?);
    layers::linear(g, store, h, &format!("{name}.fc2"))
}

fn pooled(g: &Graph, student: &Student, image: &Image) -> Result<Var> {
    let tokens = student.encode(g, image, EncodeOptions::default())?;
    let n = g.shape(tokens)[0];
    Ok(g.scale(g.sum_rows(tokens), 1.0 / n as f64))
}

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = rng::normal_vec(rng, d, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Contrastive pretraining of the student encoder against a momentum key
/// encoder with a FIFO queue of negatives. The projection and prediction
/// heads are dropped afterwards; only `encoder.*` changes in `student`.
pub fn pretrain_moco(
    student: &mut Student,
    transfer: &TransferSet,
    sched: &Schedule,
    opts: &MocoOptions,
    seed: u64,
) -> Result<RunRecord> {
    if opts.queue_size < sched.batch_size {
        return Err(CoreError::Config(format!(
            "queue size {} is smaller than the batch size {}",
            opts.queue_size, sched.batch_size
        )));
    }
    if !(0.0..=1.0).contains(&opts.momentum) {
        return Err(CoreError::Config(format!(
            "momentum {} is outside [0, 1]",
            opts.momentum
        )));
    }
    let d = student.config.encoder.embed_dim;
    let mut heads = ParamStore::new();
    {
        let mut r = rng::stream(seed, "moco-heads");
        let mut init = Init {
            store: &mut heads,
            rng: &mut r,
        };
        init.linear("moco.proj.fc1", d, opts.hidden_dim)?;
        init.linear("moco.proj.fc2", opts.hidden_dim, opts.out_dim)?;
        init.linear("moco.pred.fc1", opts.out_dim, opts.hidden_dim)?;
        init.linear("moco.pred.fc2", opts.hidden_dim, opts.out_dim)?;
    }
    let mut key = student.clone();
    key.params.set_all_trainable(false);
    let mut key_head = ParamStore::new();
    for p in heads.iter().filter(|p| p.name.starts_with("moco.proj.")) {
        key_head.insert(p.name.clone(), p.value.clone(), false)?;
    }
    let head_flags: Vec<bool> = student.params.iter().map(|p| p.trainable).collect();
    student.params.set_trainable_prefix("head.", false);

    let mut queue = unit_rows(
        &mut rng::stream(seed, "moco-queue"),
        opts.queue_size,
        opts.out_dim,
    );
    let mut cursor = 0;
    let mut views_rng = rng::stream(seed, "moco-views");
    let mut record = RunRecord::new(
        "moco",
        serde_json::json!({ "schedule": sched, "moco": opts, "transfer_size": transfer.len() }),
        seed,
    );
    let mut lp = Loop::new(sched, transfer.len(), 2)?;
    let result = (|| -> Result<()> {
        for epoch in 0..sched.epochs {
            for batch in Loop::order(transfer.len(), seed, "moco", epoch).chunks(sched.batch_size) {
                let views: Vec<(Image, Image)> = batch
                    .iter()
                    .map(|&i| two_views(&transfer.images[i], &mut views_rng))
                    .collect();
                let kg = Graph::new();
                let mut keys = Vec::with_capacity(batch.len());
                for (_, v2) in &views {
                    let z = mlp(&kg, &key_head, pooled(&kg, &key, v2)?, "moco.proj")?;
                    keys.push(kg.normalize_rows(z));
                }
                let keys = kg.value(kg.concat_rows(&keys));

                let g = Graph::new();
                let mut qs = Vec::with_capacity(batch.len());
                for (v1, _) in &views {
                    let z = mlp(&g, &heads, pooled(&g, student, v1)?, "moco.proj")?;
                    qs.push(mlp(&g, &heads, z, "moco.pred")?);
                }
                let q = if qs.len() == 1 {
                    qs[0]
                } else {
                    g.concat_rows(&qs)
                };
                let k = g.constant((*keys).clone());
                let negatives = g.constant(Tensor::from_rows(&queue)?);
                let loss = moco_loss(&g, q, k, negatives, opts.temperature)?;
                let value = lp.step(&g, loss, &mut [&mut student.params, &mut heads])?;
                record.loss_curve.push(value);

                momentum_update(&mut key.params, &student.params, opts.momentum)?;
                momentum_update(&mut key_head, &heads, opts.momentum)?;
                for r in 0..keys.rows() {
                    queue[cursor] = keys.row(r).to_vec();
                    cursor = (cursor + 1) % queue.len();
                }
            }
        }
        Ok(())
    })();
    for (i, t) in head_flags.into_iter().enumerate() {
        student.params.set_trainable(i, t);
    }
    result?;
    record.wall_clock_secs = lp.elapsed();
    record.notes.insert(
        "uniform_baseline".into(),
        format!("{}", ((opts.queue_size + 1) as f64).ln()),
    );
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeOptions {
    pub mask_ratio: f64,
    pub loss_scope: MaeLossScope,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl Default for MaeOptions {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            loss_scope: MaeLossScope::MaskedOnly,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 2,
        }
    }
}

/// Random split of `n` patches into sorted (visible, masked) index lists.
/// Fails unless both lists are nonempty.
pub fn mae_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CoreError::Config(format!(
            "mask ratio {ratio} must lie in (0, 1)"
        )));
    }
    let masked_count = (n as f64 * ratio).round() as usize;
    if masked_count == 0 || masked_count >= n {
        return Err(CoreError::Config(format!(
            "mask ratio {ratio} over {n} patches leaves an empty visible or masked set"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut masked = idx[..masked_count].to_vec();
    let mut keep = idx[masked_count..].to_vec();
    masked.sort_unstable();
    keep.sort_unstable();
    Ok((keep, masked))
}

/// Masked-autoencoder pretraining: the student encoder sees only visible
/// patches and a small transformer decoder reconstructs the hidden ones.
/// The decoder is discarded afterwards.
pub fn pretrain_mae(
    student: &mut Student,
    transfer: &TransferSet,
    sched: &Schedule,
    opts: &MaeOptions,
    seed: u64,
) -> Result<RunRecord> {
    let cfg = student.config.encoder.clone();
    let n = cfg.tokens();
    // validate the ratio up front
    mae_mask(n, opts.mask_ratio, &mut rng::stream(seed, "mae-check"))?;
    let dd = opts.decoder_dim;
    if !dd.is_multiple_of(opts.decoder_heads) {
        return Err(CoreError::Config(
            "decoder width must divide by its head count".into(),
        ));
    }
    let mut dec = ParamStore::new();
    {
        let mut r = rng::stream(seed, "mae-decoder");
        let mut init = Init {
            store: &mut dec,
            rng: &mut r,
        };
        init.linear("mae.embed", cfg.embed_dim, dd)?;
        init.tensor("mae.mask_token", &[1, dd], 0.02)?;
        init.tensor("mae.pos", &[n, dd], 0.02)?;
        for i in 0..opts.decoder_depth {
            init.block(&format!("mae.blocks.{i}"), dd, 2 * dd)?;
        }
        init.layer_norm("mae.norm", dd)?;
        init.linear("mae.pred", dd, cfg.patch_dim())?;
    }
    let head_flags: Vec<bool> = student.params.iter().map(|p| p.trainable).collect();
    student.params.set_trainable_prefix("head.", false);
    let mut mask_rng = rng::stream(seed, "mae-mask");
    let mut record = RunRecord::new(
        "mae",
        serde_json::json!({ "schedule": sched, "mae": opts, "transfer_size": transfer.len() }),
        seed,
    );
    let mut lp = Loop::new(sched, transfer.len(), 2)?;
    let result = (|| -> Result<()> {
        for epoch in 0..sched.epochs {
            for batch in Loop::order(transfer.len(), seed, "mae", epoch).chunks(sched.batch_size) {
                let g = Graph::new();
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let img = &transfer.images[i];
                    let (keep, masked) = mae_mask(n, opts.mask_ratio, &mut mask_rng)?;
                    let visible = student.encode(
                        &g,
                        img,
                        EncodeOptions {
                            keep: Some(&keep),
                            condition: None,
                        },
                    )?;
                    let x = layers::linear(&g, &dec, visible, "mae.embed")?;
                    let token = g.param(&dec, dec.require("mae.mask_token")?);
                    let filler = g.repeat_rows(token, masked.len());
                    let seq = g.concat_rows(&[x, filler]);
                    // position of each patch inside `keep ++ masked`
                    let mut inverse = vec![0; n];
                    for (slot, &p) in keep.iter().chain(masked.iter()).enumerate() {
                        inverse[p] = slot;
                    }
                    let seq = g.gather_rows(seq, &inverse);
                    let mut h = g.add(seq, g.param(&dec, dec.require("mae.pos")?));
                    for b in 0..opts.decoder_depth {
                        h = layers::block(
                            &g,
                            &dec,
                            h,
                            &format!("mae.blocks.{b}"),
                            opts.decoder_heads,
                        )?;
                    }
                    let h = layers::layer_norm(&g, &dec, h, "mae.norm")?;
                    let recon = layers::linear(&g, &dec, h, "mae.pred")?;
                    let original = g.constant(vit::patchify(img, cfg.patch_size));
                    losses.push(mae_loss(&g, original, recon, &masked, opts.loss_scope)?);
                }
                let loss = mean_of(&g, &losses);
                record
                    .loss_curve
                    .push(lp.step(&g, loss, &mut [&mut student.params, &mut dec])?);
            }
        }
        Ok(())
    })();
    for (i, t) in head_flags.into_iter().enumerate() {
        student.params.set_trainable(i, t);
    }
    result?;
    record.wall_clock_secs = lp.elapsed();
    Ok(record)
}
