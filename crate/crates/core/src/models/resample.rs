//! Separable spatial resampling maps.
//!
//! Feature maps are `(h*w) x c` matrices in row-major pixel order. A resize
//! is the pair of 1-D maps `ry` (`h2 x h`) and `rx` (`w2 x w`).

use std::rc::Rc;

use kd_autograd::{Graph, Tensor, Var};

/// Bilinear interpolation with half-pixel centres and edge clamping.
pub fn bilinear_matrix(out: usize, input: usize) -> Tensor {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let w = src - i0 as f64;
        m[o * input + i0] += 1.0 - w;
        m[o * input + i1] += w;
    }
    Tensor::matrix(out, input, m).unwrap()
}

/// Area averaging: each output cell is the overlap-weighted mean of the
/// input cells it covers.
pub fn area_matrix(out: usize, input: usize) -> Tensor {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let lo = o as f64 * scale;
        let hi = (o + 1) as f64 * scale;
        let mut i = lo.floor() as usize;
        while (i as f64) < hi && i < input {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            m[o * input + i] = overlap / scale;
            i += 1;
        }
    }
    Tensor::matrix(out, input, m).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Area,
}

fn maps(kind: Resample, h: usize, w: usize, h2: usize, w2: usize) -> (Rc<Tensor>, Rc<Tensor>) {
    let f = match kind {
        Resample::Bilinear => bilinear_matrix,
        Resample::Area => area_matrix,
    };
    (Rc::new(f(h2, h)), Rc::new(f(w2, w)))
}

/// Differentiable resize of a `(h*w) x c` map to `(h2*w2) x c`.
pub fn resize_var(
    g: &Graph,
    x: Var,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
    kind: Resample,
) -> Var {
    if (h, w) == (h2, w2) {
        return x;
    }
    let (ry, rx) = maps(kind, h, w, h2, w2);
    g.resize(x, h, w, ry, rx)
}

/// Resize of a plain `(h*w) x c` tensor.
pub fn resize_tensor(
    x: &Tensor,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
    kind: Resample,
) -> Tensor {
    if (h, w) == (h2, w2) {
        return x.clone();
    }
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = resize_var(&g, v, (h, w), (h2, w2), kind);
    (*g.value(out)).clone()
}
