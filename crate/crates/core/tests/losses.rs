//! Loss functions: closed-form oracles and gradient checks.

mod common;

use common::{apply_linear, gradcheck, linear_store, random_mask, random_tensor};
use kd_autograd::{Graph, ParamStore, Tensor};
use kd_core::losses::*;
use kd_core::rng;

const TOL: f64 = 1e-4;
const COORDS: usize = 50;

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn ce_dice_matches_pixel_loop() {
    let mut r = rng::stream(1, "ce-dice");
    let mask = random_mask(&mut r, 3, 4, 3);
    let logits = random_tensor(&mut r, &[12, 3], 1.0);
    let g = Graph::new();
    let v = g.constant(logits.clone());
    let got = g.scalar_value(ce_dice_loss(&g, v, &mask, SupervisedLossWeights::default()).unwrap());

    let mut ce = 0.0;
    let (mut inter, mut psum, mut gsum) = ([0.0; 3], [0.0; 3], [0.0; 3]);
    for p in 0..12 {
        let s = softmax(logits.row(p));
        let t = mask.data[p] as usize;
        ce -= s[t].ln();
        for c in 0..3 {
            psum[c] += s[c];
        }
        inter[t] += s[t];
        gsum[t] += 1.0;
    }
    ce /= 12.0;
    let dice: f64 = (0..3)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (psum[c] + gsum[c] + DICE_EPS))
        .sum::<f64>()
        / 3.0;
    let expected = 0.2 * ce + 0.8 * (1.0 - dice);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn ce_dice_is_small_for_confident_correct_logits() {
    let mut r = rng::stream(2, "ce-dice");
    let mask = random_mask(&mut r, 4, 4, 2);
    let data: Vec<f64> = mask
        .data
        .iter()
        .flat_map(|&v| if v == 0 { [30.0, -30.0] } else { [-30.0, 30.0] })
        .collect();
    let g = Graph::new();
    let l = ce_dice_loss(
        &g,
        g.constant(Tensor::new(vec![16, 2], data).unwrap()),
        &mask,
        Default::default(),
    )
    .unwrap();
    assert!(g.scalar_value(l) < 1e-9);
}

#[test]
fn ce_dice_gradients() {
    let mut r = rng::stream(3, "ce-dice-grad");
    let x = random_tensor(&mut r, &[20, 6], 1.0);
    let store = linear_store(&mut r, 6, 3);
    let mask = random_mask(&mut r, 4, 5, 3);
    let err = gradcheck(&store, COORDS, 3, |g, s| {
        let logits = apply_linear(g, s, g.constant(x.clone()));
        ce_dice_loss(g, logits, &mask, SupervisedLossWeights::default()).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn encoder_kd_oracle_and_gradients() {
    let mut r = rng::stream(4, "enc-kd");
    let hs = random_tensor(&mut r, &[5, 4], 1.0);
    let ht = random_tensor(&mut r, &[5, 6], 1.0);
    let proj = HiddenProjection::new(4, 6, 9).unwrap().unwrap();
    let g = Graph::new();
    let l = encoder_kd_loss(
        &g,
        g.constant(hs.clone()),
        g.constant(ht.clone()),
        Some(&proj),
    )
    .unwrap();
    let w = proj.params.get(HiddenProjection::WEIGHT).unwrap();
    let p = hs.matmul(w).unwrap();
    let expected = p.zip_map(&ht, |a, b| (a - b).powi(2)).sum() / 30.0;
    assert!((g.scalar_value(l) - expected).abs() < 1e-12);

    // matched widths, no projection: identical states give zero
    let g = Graph::new();
    let l = encoder_kd_loss(&g, g.constant(ht.clone()), g.constant(ht.clone()), None).unwrap();
    assert_eq!(g.scalar_value(l), 0.0);

    // grid mismatch is an error
    let g = Graph::new();
    let bad = g.constant(Tensor::zeros(&[4, 6]));
    assert!(encoder_kd_loss(&g, bad, g.constant(ht.clone()), None).is_err());

    let x = random_tensor(&mut r, &[5, 3], 1.0);
    let mut store = linear_store(&mut r, 3, 4);
    store
        .insert(
            "proj",
            proj.params.get(HiddenProjection::WEIGHT).unwrap().clone(),
            true,
        )
        .unwrap();
    let err = gradcheck(&store, COORDS, 4, |g, s| {
        let h = apply_linear(g, s, g.constant(x.clone()));
        let h = g.matmul(h, g.param(s, s.id("proj").unwrap()));
        encoder_kd_loss(g, h, g.constant(ht.clone()), None).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

fn decoder_case(kind: DecoderLossKind, mode: MaskMode, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "dec-kd");
    let x = random_tensor(&mut r, &[16, 4], 1.0);
    let store = linear_store(&mut r, 4, 3);
    let teacher_channels = if mode == MaskMode::DropLastChannel {
        4
    } else {
        3
    };
    let yt = random_tensor(&mut r, &[4, teacher_channels], 1.0);
    gradcheck(&store, COORDS, seed, |g, s| {
        let ys = apply_linear(g, s, g.constant(x.clone()));
        decoder_kd_loss(g, ys, (4, 4), g.constant(yt.clone()), (2, 2), kind, mode).unwrap()
    })
}

#[test]
fn decoder_kd_gradients_all_kinds_and_modes() {
    let mut seed = 10;
    for kind in [DecoderLossKind::Mse, DecoderLossKind::CrossEntropy] {
        for mode in [
            MaskMode::Interpolated,
            MaskMode::Uninterpolated,
            MaskMode::DropLastChannel,
        ] {
            let err = decoder_case(kind, mode, seed);
            assert!(err < TOL, "{kind:?} {mode:?}: relative error {err}");
            seed += 1;
        }
    }
}

#[test]
fn decoder_kd_oracles() {
    let mut r = rng::stream(5, "dec-oracle");
    let ys = random_tensor(&mut r, &[4, 3], 1.0);
    let yt = random_tensor(&mut r, &[4, 3], 1.0);
    // same size: interpolation is the identity
    let g = Graph::new();
    let l = decoder_kd_loss(
        &g,
        g.constant(ys.clone()),
        (2, 2),
        g.constant(yt.clone()),
        (2, 2),
        DecoderLossKind::Mse,
        MaskMode::Interpolated,
    )
    .unwrap();
    let mse = ys.zip_map(&yt, |a, b| (a - b).powi(2)).sum() / 12.0;
    assert!((g.scalar_value(l) - mse).abs() < 1e-12);

    let g = Graph::new();
    let l = decoder_kd_loss(
        &g,
        g.constant(ys.clone()),
        (2, 2),
        g.constant(yt.clone()),
        (2, 2),
        DecoderLossKind::CrossEntropy,
        MaskMode::Interpolated,
    )
    .unwrap();
    let mut ce = 0.0;
    for p in 0..4 {
        let (q, s) = (softmax(yt.row(p)), softmax(ys.row(p)));
        ce -= q.iter().zip(&s).map(|(a, b)| a * b.ln()).sum::<f64>();
    }
    assert!((g.scalar_value(l) - ce / 4.0).abs() < 1e-12);

    // the auxiliary channel is ignored
    let mut with_aux = Vec::new();
    for p in 0..4 {
        with_aux.extend_from_slice(yt.row(p));
        with_aux.push(1e6);
    }
    let g = Graph::new();
    let l = decoder_kd_loss(
        &g,
        g.constant(ys.clone()),
        (2, 2),
        g.constant(Tensor::new(vec![4, 4], with_aux).unwrap()),
        (2, 2),
        DecoderLossKind::Mse,
        MaskMode::DropLastChannel,
    )
    .unwrap();
    assert!((g.scalar_value(l) - mse).abs() < 1e-12);
}

#[test]
fn combine_kd_weights_and_skips_zero_terms() {
    let g = Graph::new();
    let e = g.constant(Tensor::scalar(2.0));
    let d = g.constant(Tensor::scalar(3.0));
    let (total, t) = combine_kd(&g, Some(e), Some(d), 0.1, 0.2, Some(DecoderLossKind::Mse));
    assert!((g.scalar_value(total) - 0.8).abs() < 1e-12);
    assert_eq!((t.w_hidden, t.w_decoder), (0.1, 0.2));
    let (total, t) = combine_kd(&g, Some(e), Some(d), 1.0, 0.0, None);
    assert_eq!(g.scalar_value(total), 2.0);
    assert_eq!(t.weighted_total, 2.0);
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn moco_loss_oracle_and_gradients() {
    let mut r = rng::stream(6, "moco");
    let q = random_tensor(&mut r, &[3, 4], 1.0);
    let k = random_tensor(&mut r, &[3, 4], 1.0);
    let negs: Vec<Vec<f64>> = (0..5)
        .map(|_| normalize(&rng::normal_vec(&mut r, 4, 1.0)))
        .collect();
    let n = Tensor::from_rows(&negs).unwrap();
    let tau = 0.2;
    let g = Graph::new();
    let l = moco_loss(
        &g,
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(n.clone()),
        tau,
    )
    .unwrap();
    let mut expected = 0.0;
    for i in 0..3 {
        let qi = normalize(q.row(i));
        let ki = normalize(k.row(i));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
        let pos = dot(&qi, &ki);
        let logits: Vec<f64> = std::iter::once(pos)
            .chain(negs.iter().map(|nv| dot(&qi, nv)))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        expected += lse - pos;
    }
    expected /= 3.0;
    assert!(
        (g.scalar_value(l) - expected).abs() < 1e-10,
        "{} vs {expected}",
        g.scalar_value(l)
    );

    // identical query/positive and orthogonal negatives is better than uniform
    assert!(expected.is_finite());

    let x = random_tensor(&mut r, &[3, 5], 1.0);
    let store = linear_store(&mut r, 5, 4);
    let err = gradcheck(&store, COORDS, 6, |g, s| {
        let qv = apply_linear(g, s, g.constant(x.clone()));
        moco_loss(g, qv, g.constant(k.clone()), g.constant(n.clone()), tau).unwrap()
    });
    assert!(err < TOL, "relative error {err}");

    let g = Graph::new();
    assert!(moco_loss(
        &g,
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(n.clone()),
        0.0
    )
    .is_err());
    let zero = g.constant(Tensor::zeros(&[3, 4]));
    assert!(moco_loss(&g, zero, g.constant(k), g.constant(n), tau).is_err());
}

#[test]
fn momentum_update_is_an_ema() {
    let mut key = ParamStore::new();
    key.insert("w", Tensor::full(&[2], 1.0), false).unwrap();
    let mut query = ParamStore::new();
    query.insert("w", Tensor::full(&[2], 3.0), true).unwrap();
    momentum_update(&mut key, &query, 0.75).unwrap();
    assert_eq!(key.get("w").unwrap().data(), &[1.5, 1.5]);
    momentum_update(&mut key, &query, 1.0).unwrap();
    assert_eq!(key.get("w").unwrap().data(), &[1.5, 1.5]);
    assert!(momentum_update(&mut key, &query, 1.5).is_err());
}

#[test]
fn mae_loss_oracle_and_gradients() {
    let mut r = rng::stream(7, "mae");
    let orig = random_tensor(&mut r, &[6, 4], 1.0);
    let recon = random_tensor(&mut r, &[6, 4], 1.0);
    let masked = [1, 4, 5];
    let g = Graph::new();
    let l = mae_loss(
        &g,
        g.constant(orig.clone()),
        g.constant(recon.clone()),
        &masked,
        MaeLossScope::MaskedOnly,
    )
    .unwrap();
    let expected: f64 = masked
        .iter()
        .map(|&i| {
            orig.row(i)
                .iter()
                .zip(recon.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / 4.0
        })
        .sum::<f64>()
        / 3.0;
    assert!((g.scalar_value(l) - expected).abs() < 1e-12);
    let all = mae_loss(
        &g,
        g.constant(orig.clone()),
        g.constant(recon.clone()),
        &masked,
        MaeLossScope::All,
    )
    .unwrap();
    let expected_all = orig.zip_map(&recon, |a, b| (a - b).powi(2)).sum() / 24.0;
    assert!((g.scalar_value(all) - expected_all).abs() < 1e-12);
    assert!(mae_loss(
        &g,
        g.constant(orig.clone()),
        g.constant(recon.clone()),
        &[],
        MaeLossScope::MaskedOnly
    )
    .is_err());

    let x = random_tensor(&mut r, &[6, 3], 1.0);
    let store = linear_store(&mut r, 3, 4);
    let err = gradcheck(&store, COORDS, 7, |g, s| {
        let rec = apply_linear(g, s, g.constant(x.clone()));
        mae_loss(
            g,
            g.constant(orig.clone()),
            rec,
            &masked,
            MaeLossScope::MaskedOnly,
        )
        .unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}
