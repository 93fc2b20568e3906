//! Training objectives, built from differentiable graph operations.
//!
//! Logit maps are `(h*w) x C` pixel-major matrices, token grids are
//! `N x d`, as produced by [`crate::models`].

use kd_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{CoreError, Result};
use crate::models::resample::{resize_var, Resample};
use crate::rng;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedLossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for SupervisedLossWeights {
    fn default() -> Self {
        Self { ce: 0.2, dice: 0.8 }
    }
}

/// One-hot `(h*w) x C` encoding of a mask.
pub fn one_hot(mask: &Mask, classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[mask.data.len(), classes]);
    for (i, &v) in mask.data.iter().enumerate() {
        if v as usize >= classes {
            return Err(CoreError::Shape(format!(
                "mask value {v} is outside {classes} classes"
            )));
        }
        t.data_mut()[i * classes + v as usize] = 1.0;
    }
    Ok(t)
}

/// `w.ce * CE + w.dice * (1 - mean_c soft Dice_c)`, soft Dice averaged over
/// all classes including background.
pub fn ce_dice_loss(g: &Graph, logits: Var, mask: &Mask, w: SupervisedLossWeights) -> Result<Var> {
    let shape = g.shape(logits);
    let pixels = mask.height * mask.width;
    if shape.len() != 2 || shape[0] != pixels {
        return Err(CoreError::Shape(format!(
            "logits {shape:?} do not cover a {}x{} mask",
            mask.height, mask.width
        )));
    }
    let classes = shape[1];
    if classes < 2 {
        return Err(CoreError::Shape("need at least two classes".into()));
    }
    let target = one_hot(mask, classes)?;
    let gsum = Tensor::matrix(1, classes, {
        let mut s = vec![0.0; classes];
        for &v in &mask.data {
            s[v as usize] += 1.0;
        }
        s
    })
    .unwrap();
    let target = g.constant(target);

    let ce = g.scale(
        g.sum(g.mul(g.log_softmax_rows(logits), target)),
        -1.0 / pixels as f64,
    );

    let p = g.softmax_rows(logits);
    let inter = g.sum_rows(g.mul(p, target));
    let num = g.add_scalar(g.scale(inter, 2.0), DICE_EPS);
    let den = g.add_scalar(g.add(g.sum_rows(p), g.constant(gsum)), DICE_EPS);
    let dice_loss = g.add_scalar(g.scale(g.mean(g.div(num, den)), -1.0), 1.0);

    Ok(g.add(g.scale(ce, w.ce), g.scale(dice_loss, w.dice)))
}

/// Trainable student-to-teacher width map for hidden-state distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenProjection {
    pub params: ParamStore,
}

impl HiddenProjection {
    pub const WEIGHT: &'static str = "proj.weight";

    /// `None` when the widths already agree.
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Result<Option<Self>> {
        if student_dim == teacher_dim {
            return Ok(None);
        }
        let mut r = rng::stream(seed, "hidden-projection");
        let std = (2.0 / (student_dim + teacher_dim) as f64).sqrt();
        let w = Tensor::matrix(
            student_dim,
            teacher_dim,
            rng::normal_vec(&mut r, student_dim * teacher_dim, std),
        )
        .unwrap();
        let mut params = ParamStore::new();
        params.insert(Self::WEIGHT, w, true)?;
        Ok(Some(Self { params }))
    }

    pub fn apply(&self, g: &Graph, h: Var) -> Var {
        let w = g.param(&self.params, self.params.id(Self::WEIGHT).unwrap());
        g.matmul(h, w)
    }
}

/// Mean squared error between (projected) student and teacher hidden states.
pub fn encoder_kd_loss(
    g: &Graph,
    h_student: Var,
    h_teacher: Var,
    proj: Option<&HiddenProjection>,
) -> Result<Var> {
    let (ss, st) = (g.shape(h_student), g.shape(h_teacher));
    if ss[0] != st[0] {
        return Err(CoreError::Shape(format!(
            "token grids differ: student {} tokens, teacher {}",
            ss[0], st[0]
        )));
    }
    let hs = match proj {
        Some(p) => {
            let w = p.params.get(HiddenProjection::WEIGHT).unwrap();
            if w.rows() != ss[1] {
                return Err(CoreError::Shape(format!(
                    "projection expects width {}, student has {}",
                    w.rows(),
                    ss[1]
                )));
            }
            p.apply(g, h_student)
        }
        None => h_student,
    };
    let w = g.shape(hs)[1];
    if w != st[1] {
        return Err(CoreError::Shape(format!(
            "hidden widths differ: student {w}, teacher {} (a projection is required)",
            st[1]
        )));
    }
    Ok(g.mean(g.square(g.sub(hs, h_teacher))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderLossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Teacher logits bilinearly resized to the student resolution.
    Interpolated,
    /// Student logits area-pooled to the teacher resolution.
    Uninterpolated,
    /// Teacher's last channel removed, then compared as `Uninterpolated`.
    DropLastChannel,
}

/// Logit distillation between `y_student` (`hs x ws`) and `y_teacher`
/// (`ht x wt`).
pub fn decoder_kd_loss(
    g: &Graph,
    y_student: Var,
    student_hw: (usize, usize),
    y_teacher: Var,
    teacher_hw: (usize, usize),
    kind: DecoderLossKind,
    mode: MaskMode,
) -> Result<Var> {
    let (ss, st) = (g.shape(y_student), g.shape(y_teacher));
    if ss[0] != student_hw.0 * student_hw.1 || st[0] != teacher_hw.0 * teacher_hw.1 {
        return Err(CoreError::Shape(
            "logit maps do not match their stated sizes".into(),
        ));
    }
    let c = ss[1];
    let expected_teacher = if mode == MaskMode::DropLastChannel {
        c + 1
    } else {
        c
    };
    if st[1] != expected_teacher {
        return Err(CoreError::Shape(format!(
            "teacher has {} channels, expected {expected_teacher} for {c} student classes",
            st[1]
        )));
    }
    let (ys, yt) = match mode {
        MaskMode::Interpolated => (
            y_student,
            resize_var(g, y_teacher, teacher_hw, student_hw, Resample::Bilinear),
        ),
        MaskMode::Uninterpolated => (
            resize_var(g, y_student, student_hw, teacher_hw, Resample::Area),
            y_teacher,
        ),
        MaskMode::DropLastChannel => (
            resize_var(g, y_student, student_hw, teacher_hw, Resample::Area),
            g.slice_cols(y_teacher, 0, c),
        ),
    };
    Ok(match kind {
        DecoderLossKind::Mse => g.mean(g.square(g.sub(ys, yt))),
        DecoderLossKind::CrossEntropy => {
            let pixels = g.shape(ys)[0] as f64;
            let soft = g.softmax_rows(yt);
            g.scale(g.sum(g.mul(soft, g.log_softmax_rows(ys))), -1.0 / pixels)
        }
    })
}

/// Values of one distillation objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDLossTerms {
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    pub weighted_total: f64,
    pub w_hidden: f64,
    pub w_decoder: f64,
    pub decoder_loss_kind: Option<DecoderLossKind>,
}

/// `w_hidden * encoder + w_decoder * decoder`; absent or zero-weight terms
/// are left out of the graph.
pub fn combine_kd(
    g: &Graph,
    encoder: Option<Var>,
    decoder: Option<Var>,
    w_hidden: f64,
    w_decoder: f64,
    decoder_loss_kind: Option<DecoderLossKind>,
) -> (Var, KDLossTerms) {
    let mut parts = Vec::new();
    if let Some(e) = encoder.filter(|_| w_hidden != 0.0) {
        parts.push(g.scale(e, w_hidden));
    }
    if let Some(d) = decoder.filter(|_| w_decoder != 0.0) {
        parts.push(g.scale(d, w_decoder));
    }
    let total = match parts.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        1 => parts[0],
        _ => g.add(parts[0], parts[1]),
    };
    let encoder_loss = encoder.map_or(0.0, |v| g.scalar_value(v));
    let decoder_loss = decoder.map_or(0.0, |v| g.scalar_value(v));
    let terms = KDLossTerms {
        encoder_loss,
        decoder_loss,
        weighted_total: g.scalar_value(total),
        w_hidden,
        w_decoder,
        decoder_loss_kind,
    };
    (total, terms)
}

/// InfoNCE with the positive key at index 0 of the logits:
/// `-log(exp(q.k+/tau) / sum_i exp(q.k_i/tau))`, averaged over queries.
/// Queries and keys are L2-normalised here; `negatives` must already be.
pub fn moco_loss(g: &Graph, queries: Var, positives: Var, negatives: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(CoreError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (sq, sk, sn) = (g.shape(queries), g.shape(positives), g.shape(negatives));
    if sq != sk || sn[1] != sq[1] {
        return Err(CoreError::Shape(format!(
            "queries {sq:?}, positives {sk:?}, negatives {sn:?} do not conform"
        )));
    }
    for v in [queries, positives, negatives] {
        let t = g.value(v);
        if t.data()
            .chunks(t.cols())
            .any(|r| r.iter().all(|&x| x == 0.0))
        {
            return Err(CoreError::Numerical("zero-norm embedding".into()));
        }
    }
    let q = g.normalize_rows(queries);
    let k = g.normalize_rows(positives);
    let pos = g.sum_cols(g.mul(q, k));
    let neg = g.matmul_nt(q, negatives);
    let logits = g.scale(g.concat_cols(&[pos, neg]), 1.0 / tau);
    let ls = g.log_softmax_rows(logits);
    Ok(g.scale(g.mean(g.slice_cols(ls, 0, 1)), -1.0))
}

/// `key := m * key + (1 - m) * query` for every key parameter, matched by
/// name.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CoreError::Config(format!("momentum {m} is outside [0, 1]")));
    }
    let names: Vec<String> = key.names().map(str::to_string).collect();
    for name in &names {
        let q = query
            .get(name)
            .ok_or_else(|| CoreError::Shape(format!("query encoder lacks `{name}`")))?;
        let id = key.id(name).unwrap();
        let k = key.value_mut(id);
        if k.shape() != q.shape() {
            return Err(CoreError::Shape(format!(
                "`{name}`: key {:?} vs query {:?}",
                k.shape(),
                q.shape()
            )));
        }
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeLossScope {
    #[default]
    MaskedOnly,
    All,
}

/// Reconstruction MSE over `N x P` patch matrices: pixel mean per patch,
/// then mean over the hidden patches (or over all patches).
pub fn mae_loss(
    g: &Graph,
    original: Var,
    reconstruction: Var,
    masked: &[usize],
    scope: MaeLossScope,
) -> Result<Var> {
    let (so, sr) = (g.shape(original), g.shape(reconstruction));
    if so != sr {
        return Err(CoreError::Shape(format!(
            "original {so:?} vs reconstruction {sr:?}"
        )));
    }
    if masked.is_empty() {
        return Err(CoreError::Config("no masked patches".into()));
    }
    if let Some(&i) = masked.iter().find(|&&i| i >= so[0]) {
        return Err(CoreError::Shape(format!(
            "masked index {i} ≥ {} patches",
            so[0]
        )));
    }
    let diff = g.sub(reconstruction, original);
    let diff = match scope {
        MaeLossScope::MaskedOnly => g.gather_rows(diff, masked),
        MaeLossScope::All => diff,
    };
    Ok(g.mean(g.square(diff)))
}
