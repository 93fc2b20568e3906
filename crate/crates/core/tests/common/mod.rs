//! Helpers shared by the integration tests.
#![allow(dead_code)]

use kd_autograd::{Graph, ParamStore, Tensor, Var};
use kd_core::data::Mask;
use kd_core::rng;
use rand::Rng as _;

/// Worst relative error between analytic gradients and central differences
/// at `coords` random parameter coordinates.
pub fn gradcheck(
    store: &ParamStore,
    coords: usize,
    seed: u64,
    f: impl Fn(&Graph, &ParamStore) -> Var,
) -> f64 {
    let g = Graph::new();
    let out = f(&g, store);
    let grads = g.backward(out);
    let mut r = rng::stream(seed, "gradcheck");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let id = r.random_range(0..store.len());
        let n = store.value(id).len();
        let i = r.random_range(0..n);
        let analytic = grads.param(store, id).map_or(0.0, |t| t.data()[i]);
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.value_mut(id).data_mut()[i] += delta;
            let g = Graph::new();
            let o = f(&g, &s);
            g.scalar_value(o)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let scale = analytic.abs().max(fd.abs());
        let err = if scale < 1e-7 {
            (analytic - fd).abs()
        } else {
            (analytic - fd).abs() / scale
        };
        worst = worst.max(err);
    }
    worst
}

pub fn random_tensor(r: &mut rng::Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(r, n, std)).unwrap()
}

pub fn random_mask(r: &mut rng::Rng, h: usize, w: usize, classes: u8) -> Mask {
    Mask::new(
        h,
        w,
        (0..h * w).map(|_| r.random_range(0..classes)).collect(),
    )
    .unwrap()
}

/// Parameter store for a linear micro model `x W + b`.
pub fn linear_store(r: &mut rng::Rng, input: usize, output: usize) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", random_tensor(r, &[input, output], 0.5), true)
        .unwrap();
    s.insert("b", random_tensor(r, &[1, output], 0.1), true)
        .unwrap();
    s
}

pub fn apply_linear(g: &Graph, s: &ParamStore, x: Var) -> Var {
    let w = g.param(s, s.id("w").unwrap());
    let b = g.param(s, s.id("b").unwrap());
    g.add_row(g.matmul(x, w), b)
}
