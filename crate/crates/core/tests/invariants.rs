//! Property tests for metrics, schedules, diffusion and masking.

use kd_autograd::{ParamStore, Tensor};
use kd_core::data::Mask;
use kd_core::diffusion::DiffusionSchedule;
use kd_core::losses::momentum_update;
use kd_core::metrics::*;
use kd_core::rng;
use kd_core::trainer::{mae_mask, Decay, OptimizerKind, Schedule};
use proptest::prelude::*;

fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n * n)
}

fn label_strategy(n: usize, classes: u8) -> impl Strategy<Value = Mask> {
    prop::collection::vec(0..classes, n * n).prop_map(move |d| Mask::new(n, n, d).unwrap())
}

proptest! {
    #[test]
    fn dice_and_iou_bounded_and_symmetric(a in mask_strategy(8), b in mask_strategy(8)) {
        let ab = BinaryMaskPair::new(8, 8, a.clone(), b.clone()).unwrap();
        let ba = BinaryMaskPair::new(8, 8, b, a.clone()).unwrap();
        let d = dice(&ab);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&ba));
        prop_assert!(iou(&ab) <= d + 1e-15);
        let same = BinaryMaskPair::new(8, 8, a.clone(), a).unwrap();
        prop_assert_eq!(dice(&same), 1.0);
    }

    #[test]
    fn hd95_symmetric_and_zero_on_identity(a in mask_strategy(8), b in mask_strategy(8)) {
        let ab = BinaryMaskPair::new(8, 8, a.clone(), b.clone()).unwrap();
        let ba = BinaryMaskPair::new(8, 8, b, a.clone()).unwrap();
        let (x, y) = (hd95(&ab, Hd95Mode::Pooled), hd95(&ba, Hd95Mode::Pooled));
        prop_assert_eq!(x.is_some(), y.is_some());
        if let (Some(x), Some(y)) = (x, y) {
            prop_assert!(x >= 0.0);
            prop_assert!((x - y).abs() < 1e-12);
        }
        if a.iter().any(|&v| v) {
            let same = BinaryMaskPair::new(8, 8, a.clone(), a).unwrap();
            prop_assert_eq!(hd95(&same, Hd95Mode::Pooled), Some(0.0));
        }
    }

    #[test]
    fn miou_bounded(p in label_strategy(6, 4), r in label_strategy(6, 4)) {
        let v = miou(&p, &r, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(miou(&p, &p, 4).unwrap(), 1.0);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-3f64..1e4, b in 1e-3f64..1e4) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a, 255.0) > psnr_from_mse(b, 255.0));
    }

    #[test]
    fn lr_follows_warmup_then_cosine(
        warmup in 0usize..50,
        total in 60usize..500,
        base in 1e-5f64..1e-2,
        ks in prop::collection::vec(0usize..500, 10),
    ) {
        let s = Schedule {
            optimizer: OptimizerKind::Adamw,
            base_lr: base,
            weight_decay: 0.05,
            warmup_iters: warmup,
            epochs: 1,
            batch_size: 1,
            decay: Decay::Cosine,
        };
        for k in ks.into_iter().map(|k| k % total) {
            let expected = if k < warmup {
                base * (k + 1) as f64 / warmup as f64
            } else {
                let t = (k - warmup) as f64 / (total - warmup) as f64;
                base * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            };
            let got = s.lr_at(k, total);
            prop_assert!((got - expected).abs() <= 1e-15 * base.max(1.0), "k {k}: {got} vs {expected}");
            prop_assert!(got >= 0.0 && got <= base * (1.0 + 1e-12));
        }
    }

    #[test]
    fn diffusion_marginals(steps in 2usize..200, x0 in -1.0f64..1.0, e in -3.0f64..3.0) {
        let s = DiffusionSchedule::standard(steps).unwrap();
        for t in 1..steps {
            prop_assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        let t = steps / 2 + 1;
        let ab = s.alpha_bar(t);
        let x = s.q_sample(&[x0], t, &[e]).unwrap()[0];
        prop_assert!((x - (ab.sqrt() * x0 + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
    }

    #[test]
    fn mae_mask_partitions_tokens(n in 20usize..200, ratio in 0.1f64..0.9, seed in any::<u64>()) {
        let (keep, masked) = mae_mask(n, ratio, &mut rng::stream(seed, "prop")).unwrap();
        prop_assert!(!keep.is_empty() && !masked.is_empty());
        prop_assert_eq!(keep.len() + masked.len(), n);
        let mut all: Vec<usize> = keep.iter().chain(&masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let again = mae_mask(n, ratio, &mut rng::stream(seed, "prop")).unwrap();
        prop_assert_eq!((keep, masked), again);
    }

    #[test]
    fn momentum_update_blends_and_one_freezes_keys(m in 0.0f64..=1.0, k in -5.0f64..5.0, q in -5.0f64..5.0) {
        let store = |v: f64| {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::full(&[2, 2], v), true).unwrap();
            s
        };
        let mut key = store(k);
        momentum_update(&mut key, &store(q), m).unwrap();
        let got = key.get("w").unwrap().data()[0];
        prop_assert!((got - (m * k + (1.0 - m) * q)).abs() < 1e-12);
        let mut key = store(k);
        momentum_update(&mut key, &store(q), 1.0).unwrap();
        prop_assert_eq!(key.get("w").unwrap().data()[0], k);
    }
}
