//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar output with respect to every parameter and gradient-tracking
//! input that contributed to it. Nodes that depend only on constants are not
//! differentiated.
//!
//! Shape mismatches between operands are programming errors and panic with
//! the offending shapes, in the same way slice indexing does.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        store: u64,
        id: usize,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    RepeatRows {
        x: Var,
    },
    Resize {
        x: Var,
        h: usize,
        w: usize,
        ry: Rc<Tensor>,
        rx: Rc<Tensor>,
    },
    Conv3x3 {
        x: Var,
        weight: Var,
        h: usize,
        w: usize,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Recording tape. Operations take `&self`, so nested expressions such as
/// `g.add(g.matmul(x, w), b)` compose without borrow juggling.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<(u64, usize), Var>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: BTreeMap<(u64, usize), Tensor>,
    inputs: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter, `None` if it did not take part in the graph
    /// or was frozen.
    pub fn param(&self, store: &ParamStore, id: usize) -> Option<&Tensor> {
        self.params.get(&(store.uid(), id))
    }

    /// Gradient of a tracked input created by [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all parameter gradients so that their joint L2 norm is at
    /// most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.values_mut() {
                g.scale_assign(s);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Gathers the 3x3 neighbourhoods of an `(h*w) x c` map into an
/// `(h*w) x 9c` matrix (zero padding, order ky, kx, channel).
fn im2col(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut cols = vec![0.0; h * w * 9 * c];
    for i in 0..h {
        for j in 0..w {
            let dst = &mut cols[(i * w + j) * 9 * c..(i * w + j + 1) * 9 * c];
            for ky in 0..3 {
                let y = i as isize + ky as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = j as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = (y as usize * w + xx as usize) * c;
                    let o = (ky * 3 + kx) * c;
                    dst[o..o + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut x = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let src = &cols[(i * w + j) * 9 * c..(i * w + j + 1) * 9 * c];
            for ky in 0..3 {
                let y = i as isize + ky as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = j as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let dst = (y as usize * w + xx as usize) * c;
                    let o = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        x[dst + ch] += src[o + ch];
                    }
                }
            }
        }
    }
    x
}

/// Applies separable linear maps `ry` (h2 x h) and `rx` (w2 x w) to every
/// channel of an `(h*w) x c` map.
fn resize_forward(x: &[f64], h: usize, w: usize, c: usize, ry: &Tensor, rx: &Tensor) -> Vec<f64> {
    let (h2, w2) = (ry.rows(), rx.rows());
    let mut tmp = vec![0.0; h * w2 * c];
    for i in 0..h {
        gemm(
            w2,
            w,
            c,
            rx.data(),
            false,
            &x[i * w * c..(i + 1) * w * c],
            false,
            &mut tmp[i * w2 * c..(i + 1) * w2 * c],
            0.0,
        );
    }
    let mut out = vec![0.0; h2 * w2 * c];
    gemm(h2, h, w2 * c, ry.data(), false, &tmp, false, &mut out, 0.0);
    out
}

fn resize_backward(g: &[f64], h: usize, w: usize, c: usize, ry: &Tensor, rx: &Tensor) -> Vec<f64> {
    let (h2, w2) = (ry.rows(), rx.rows());
    let mut gtmp = vec![0.0; h * w2 * c];
    gemm(h, h2, w2 * c, ry.data(), true, g, false, &mut gtmp, 0.0);
    let mut gx = vec![0.0; h * w * c];
    for i in 0..h {
        gemm(
            w,
            w2,
            c,
            rx.data(),
            true,
            &gtmp[i * w2 * c..(i + 1) * w2 * c],
            false,
            &mut gx[i * w * c..(i + 1) * w * c],
            0.0,
        );
    }
    gx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.val(v).item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Constant leaf; never differentiated.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Gradient-tracking leaf, readable through [`Gradients::input`].
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls within one graph
    /// return the same node. Frozen parameters are treated as constants.
    pub fn param(&self, store: &ParamStore, id: usize) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            store.is_trainable(id),
        );
        self.params.borrow_mut().insert(key, v);
        v
    }

    fn binary_same(&self, a: Var, b: Var, name: &str) -> (Rc<Tensor>, Rc<Tensor>, bool) {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let tr = self.tracked(a) || self.tracked(b);
        (ta, tb, tr)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let out = ta.matmul(&tb).unwrap_or_else(|e| panic!("matmul: {e}"));
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), tr)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        assert_eq!(
            k,
            tb.cols(),
            "matmul_nt: {:?} x {:?}ᵀ",
            ta.shape(),
            tb.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, 0.0);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMulNT(a, b), tr)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (ta, tb, tr) = self.binary_same(a, b, "add");
        self.push(ta.zip_map(&tb, |x, y| x + y), Op::Add(a, b), tr)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (ta, tb, tr) = self.binary_same(a, b, "sub");
        self.push(ta.zip_map(&tb, |x, y| x - y), Op::Sub(a, b), tr)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (ta, tb, tr) = self.binary_same(a, b, "mul");
        self.push(ta.zip_map(&tb, |x, y| x * y), Op::Mul(a, b), tr)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (ta, tb, tr) = self.binary_same(a, b, "div");
        self.push(ta.zip_map(&tb, |x, y| x / y), Op::Div(a, b), tr)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        assert_eq!(tb.len(), n, "add_row: {:?} + {:?}", ta.shape(), tb.shape());
        let mut out = (*ta).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::AddRow(a, b), tr)
    }

    /// Multiplies every row of an `m x n` matrix elementwise by a length-`n`
    /// vector.
    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        assert_eq!(tb.len(), n, "mul_row: {:?} * {:?}", ta.shape(), tb.shape());
        let mut out = (*ta).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x *= y;
            }
        }
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MulRow(a, b), tr)
    }

    /// Multiplies row `i` of an `m x n` matrix by `b[i]` (`b` is `m x 1`).
    pub fn mul_col(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        assert_eq!(
            tb.len(),
            ta.rows(),
            "mul_col: {:?} * {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = (*ta).clone();
        for (row, &s) in out.data_mut().chunks_mut(n).zip(tb.data()) {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MulCol(a, b), tr)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let ta = self.val(a);
        self.push(ta.map(|x| x * s), Op::Scale(a, s), self.tracked(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let ta = self.val(a);
        self.push(ta.map(|x| x + s), Op::AddScalar(a), self.tracked(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(ta.map(|x| x.max(0.0)), Op::Relu(a), self.tracked(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(ta.map(gelu), Op::Gelu(a), self.tracked(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(ta.map(f64::exp), Op::Exp(a), self.tracked(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(ta.map(f64::ln), Op::Ln(a), self.tracked(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(ta.map(|x| x * x), Op::Square(a), self.tracked(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(softmax_rows(&ta), Op::SoftmaxRows(a), self.tracked(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(
            log_softmax_rows(&ta),
            Op::LogSoftmaxRows(a),
            self.tracked(a),
        )
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (length n).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let n = tx.cols();
        assert_eq!(tg.len(), n, "layer_norm gamma");
        assert_eq!(tb.len(), n, "layer_norm beta");
        let rows = tx.rows();
        let mut xhat = (*tx).clone();
        let mut rstd = Vec::with_capacity(rows);
        for row in xhat.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((v, g), b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *v = *v * g + b;
            }
        }
        let tr = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tr,
        )
    }

    /// Scales each row to unit L2 norm. Rows must be nonzero.
    pub fn normalize_rows(&self, x: Var) -> Var {
        let tx = self.val(x);
        let n = tx.cols();
        let mut out = (*tx).clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "normalize_rows: zero-norm row");
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(out, Op::NormalizeRows { x, norms }, self.tracked(x))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.val(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            Tensor::matrix(r, len, out).unwrap(),
            Op::SliceCols { x, start },
            self.tracked(x),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let r = vals[0].rows();
        assert!(
            vals.iter().all(|v| v.rows() == r),
            "concat_cols: row mismatch"
        );
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::matrix(r, total, out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            tr,
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let c = vals[0].cols();
        assert!(
            vals.iter().all(|v| v.cols() == c),
            "concat_rows: col mismatch"
        );
        let mut out = Vec::new();
        let mut r = 0;
        for v in &vals {
            out.extend_from_slice(v.data());
            r += v.rows();
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            tr,
        )
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let tx = self.val(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        self.push(
            Tensor::matrix(idx.len(), c, out).unwrap(),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            self.tracked(x),
        )
    }

    /// Tiles a single-row tensor (any shape with `n` elements) into `k x n`.
    pub fn repeat_rows(&self, x: Var, k: usize) -> Var {
        let tx = self.val(x);
        let n = tx.len();
        let mut out = Vec::with_capacity(k * n);
        for _ in 0..k {
            out.extend_from_slice(tx.data());
        }
        self.push(
            Tensor::matrix(k, n, out).unwrap(),
            Op::RepeatRows { x },
            self.tracked(x),
        )
    }

    /// Spatial resampling of an `(h*w) x c` map by the separable linear maps
    /// `ry` (`h2 x h`) and `rx` (`w2 x w`). Returns an `(h2*w2) x c` map.
    pub fn resize(&self, x: Var, h: usize, w: usize, ry: Rc<Tensor>, rx: Rc<Tensor>) -> Var {
        let tx = self.val(x);
        assert_eq!(tx.rows(), h * w, "resize: {:?} is not {h}x{w}", tx.shape());
        assert_eq!(ry.cols(), h, "resize: row map");
        assert_eq!(rx.cols(), w, "resize: col map");
        let c = tx.cols();
        let out = resize_forward(tx.data(), h, w, c, &ry, &rx);
        let shape = vec![ry.rows() * rx.rows(), c];
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::Resize { x, h, w, ry, rx },
            self.tracked(x),
        )
    }

    /// Same-padded 3x3 convolution of an `(h*w) x cin` map with a
    /// `9*cin x cout` kernel matrix.
    pub fn conv3x3(&self, x: Var, weight: Var, h: usize, w: usize) -> Var {
        let (tx, tw) = (self.val(x), self.val(weight));
        let c = tx.cols();
        assert_eq!(tx.rows(), h * w, "conv3x3: {:?} is not {h}x{w}", tx.shape());
        assert_eq!(
            tw.rows(),
            9 * c,
            "conv3x3: kernel {:?} for {c} channels",
            tw.shape()
        );
        let cout = tw.cols();
        let cols = im2col(tx.data(), h, w, c);
        let mut out = vec![0.0; h * w * cout];
        gemm(
            h * w,
            9 * c,
            cout,
            &cols,
            false,
            tw.data(),
            false,
            &mut out,
            0.0,
        );
        let tr = self.tracked(x) || self.tracked(weight);
        self.push(
            Tensor::matrix(h * w, cout, out).unwrap(),
            Op::Conv3x3 { x, weight, h, w },
            tr,
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(Tensor::scalar(ta.sum()), Op::Sum(a), self.tracked(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.len().max(1) as f64;
        self.push(Tensor::scalar(ta.sum() / n), Op::Mean(a), self.tracked(a))
    }

    /// Column sums: `m x n` → `1 x n`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(
            Tensor::matrix(1, n, out).unwrap(),
            Op::SumRows(a),
            self.tracked(a),
        )
    }

    /// Row sums: `m x n` → `m x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let out: Vec<f64> = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        let m = out.len();
        self.push(
            Tensor::matrix(m, 1, out).unwrap(),
            Op::SumCols(a),
            self.tracked(a),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let ta = self.val(a);
        self.push(ta.transpose(), Op::Transpose(a), self.tracked(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let ta = (*self.val(a)).clone();
        let out = ta
            .reshape(shape.to_vec())
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(out, Op::Reshape(a), self.tracked(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            let v = |var: Var| &nodes[var.0].value;
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(idx, g);
                }
                Op::Param { store, id } => {
                    out.params.insert((*store, *id), g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if nodes[a.0].tracked {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                        acc(
                            &mut grads,
                            &nodes,
                            *a,
                            Tensor::new(ta.shape().to_vec(), ga).unwrap(),
                        );
                    }
                    if nodes[b.0].tracked {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                        acc(
                            &mut grads,
                            &nodes,
                            *b,
                            Tensor::new(tb.shape().to_vec(), gb).unwrap(),
                        );
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if nodes[a.0].tracked {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), false, &mut ga, 0.0);
                        acc(
                            &mut grads,
                            &nodes,
                            *a,
                            Tensor::new(ta.shape().to_vec(), ga).unwrap(),
                        );
                    }
                    if nodes[b.0].tracked {
                        let mut gb = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, ta.data(), false, &mut gb, 0.0);
                        acc(
                            &mut grads,
                            &nodes,
                            *b,
                            Tensor::new(tb.shape().to_vec(), gb).unwrap(),
                        );
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *b, g.clone());
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *b, g.map(|x| -x));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, g.zip_map(tb, |x, y| x * y));
                    }
                    if nodes[b.0].tracked {
                        acc(&mut grads, &nodes, *b, g.zip_map(ta, |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let tb = v(*b);
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, g.zip_map(tb, |x, y| x / y));
                    }
                    if nodes[b.0].tracked {
                        // d(a/b)/db = -y/b
                        let t = y.zip_map(tb, |q, d| -q / d);
                        acc(&mut grads, &nodes, *b, g.zip_map(&t, |x, s| x * s));
                    }
                }
                Op::AddRow(a, b) => {
                    if nodes[b.0].tracked {
                        let n = g.cols();
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (o, x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                        acc(
                            &mut grads,
                            &nodes,
                            *b,
                            Tensor::new(v(*b).shape().to_vec(), gb).unwrap(),
                        );
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::MulRow(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let n = g.cols();
                    if nodes[b.0].tracked {
                        let mut gb = vec![0.0; n];
                        for (grow, arow) in g.data().chunks(n).zip(ta.data().chunks(n)) {
                            for ((o, x), y) in gb.iter_mut().zip(grow).zip(arow) {
                                *o += x * y;
                            }
                        }
                        acc(
                            &mut grads,
                            &nodes,
                            *b,
                            Tensor::new(tb.shape().to_vec(), gb).unwrap(),
                        );
                    }
                    if nodes[a.0].tracked {
                        let mut ga = g.clone();
                        for row in ga.data_mut().chunks_mut(n) {
                            for (x, s) in row.iter_mut().zip(tb.data()) {
                                *x *= s;
                            }
                        }
                        acc(&mut grads, &nodes, *a, ga);
                    }
                }
                Op::MulCol(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let n = g.cols();
                    if nodes[b.0].tracked {
                        let gb: Vec<f64> = g
                            .data()
                            .chunks(n)
                            .zip(ta.data().chunks(n))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                            .collect();
                        acc(
                            &mut grads,
                            &nodes,
                            *b,
                            Tensor::new(tb.shape().to_vec(), gb).unwrap(),
                        );
                    }
                    if nodes[a.0].tracked {
                        let mut ga = g.clone();
                        for (row, &s) in ga.data_mut().chunks_mut(n).zip(tb.data()) {
                            for x in row.iter_mut() {
                                *x *= s;
                            }
                        }
                        acc(&mut grads, &nodes, *a, ga);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, &nodes, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => acc(&mut grads, &nodes, *a, g),
                Op::Relu(a) => {
                    let ta = v(*a);
                    acc(
                        &mut grads,
                        &nodes,
                        *a,
                        g.zip_map(ta, |x, z| if z > 0.0 { x } else { 0.0 }),
                    );
                }
                Op::Gelu(a) => {
                    let ta = v(*a);
                    acc(
                        &mut grads,
                        &nodes,
                        *a,
                        g.zip_map(ta, |x, z| x * gelu_grad(z)),
                    );
                }
                Op::Exp(a) => acc(&mut grads, &nodes, *a, g.zip_map(y, |x, e| x * e)),
                Op::Ln(a) => {
                    let ta = v(*a);
                    acc(&mut grads, &nodes, *a, g.zip_map(ta, |x, z| x / z));
                }
                Op::Square(a) => {
                    let ta = v(*a);
                    acc(&mut grads, &nodes, *a, g.zip_map(ta, |x, z| 2.0 * x * z));
                }
                Op::SoftmaxRows(a) => {
                    let n = y.cols();
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, p)| x * p).sum();
                        for (x, p) in grow.iter_mut().zip(yrow) {
                            *x = p * (*x - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let n = y.cols();
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let s: f64 = grow.iter().sum();
                        for (x, l) in grow.iter_mut().zip(yrow) {
                            *x -= l.exp() * s;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let tg = v(*gamma);
                    let n = g.cols();
                    if nodes[gamma.0].tracked || nodes[beta.0].tracked {
                        let mut gg = vec![0.0; n];
                        let mut gb = vec![0.0; n];
                        for (grow, hrow) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                            for j in 0..n {
                                gg[j] += grow[j] * hrow[j];
                                gb[j] += grow[j];
                            }
                        }
                        acc(
                            &mut grads,
                            &nodes,
                            *gamma,
                            Tensor::new(tg.shape().to_vec(), gg).unwrap(),
                        );
                        acc(
                            &mut grads,
                            &nodes,
                            *beta,
                            Tensor::new(v(*beta).shape().to_vec(), gb).unwrap(),
                        );
                    }
                    if nodes[x.0].tracked {
                        let mut gx = vec![0.0; g.len()];
                        let nf = n as f64;
                        for (r, ((grow, hrow), orow)) in g
                            .data()
                            .chunks(n)
                            .zip(xhat.data().chunks(n))
                            .zip(gx.chunks_mut(n))
                            .enumerate()
                        {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let gh = grow[j] * tg.data()[j];
                                m1 += gh;
                                m2 += gh * hrow[j];
                            }
                            m1 /= nf;
                            m2 /= nf;
                            for j in 0..n {
                                let gh = grow[j] * tg.data()[j];
                                orow[j] = rstd[r] * (gh - m1 - hrow[j] * m2);
                            }
                        }
                        acc(
                            &mut grads,
                            &nodes,
                            *x,
                            Tensor::new(v(*x).shape().to_vec(), gx).unwrap(),
                        );
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let n = y.cols();
                    let mut gx = g.clone();
                    for ((grow, yrow), &nrm) in gx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(y.data().chunks(n))
                        .zip(norms)
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (a, b) in grow.iter_mut().zip(yrow) {
                            *a = (*a - b * dot) / nrm;
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let tx = v(*x);
                    let (c, len) = (tx.cols(), g.cols());
                    let mut gx = Tensor::zeros(tx.shape());
                    for (orow, grow) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                        orow[*start..*start + len].copy_from_slice(grow);
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let tp = v(p);
                        let c = tp.cols();
                        if nodes[p.0].tracked {
                            let mut gp = Vec::with_capacity(tp.len());
                            for grow in g.data().chunks(total) {
                                gp.extend_from_slice(&grow[off..off + c]);
                            }
                            acc(
                                &mut grads,
                                &nodes,
                                p,
                                Tensor::new(tp.shape().to_vec(), gp).unwrap(),
                            );
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let tp = v(p);
                        let n = tp.len();
                        if nodes[p.0].tracked {
                            let gp = g.data()[off..off + n].to_vec();
                            acc(
                                &mut grads,
                                &nodes,
                                p,
                                Tensor::new(tp.shape().to_vec(), gp).unwrap(),
                            );
                        }
                        off += n;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let tx = v(*x);
                    let c = tx.cols();
                    let mut gx = Tensor::zeros(tx.shape());
                    for (k, &i) in idx.iter().enumerate() {
                        let grow = g.row(k);
                        let orow = &mut gx.data_mut()[i * c..(i + 1) * c];
                        for (o, x) in orow.iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::RepeatRows { x } => {
                    let tx = v(*x);
                    let n = tx.len();
                    let mut gx = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, x) in gx.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    acc(
                        &mut grads,
                        &nodes,
                        *x,
                        Tensor::new(tx.shape().to_vec(), gx).unwrap(),
                    );
                }
                Op::Resize { x, h, w, ry, rx } => {
                    let c = g.cols();
                    let gx = resize_backward(g.data(), *h, *w, c, ry, rx);
                    acc(
                        &mut grads,
                        &nodes,
                        *x,
                        Tensor::new(v(*x).shape().to_vec(), gx).unwrap(),
                    );
                }
                Op::Conv3x3 { x, weight, h, w } => {
                    let (tx, tw) = (v(*x), v(*weight));
                    let c = tx.cols();
                    let cout = tw.cols();
                    let hw = h * w;
                    if nodes[weight.0].tracked {
                        let cols = im2col(tx.data(), *h, *w, c);
                        let mut gw = vec![0.0; 9 * c * cout];
                        gemm(9 * c, hw, cout, &cols, true, g.data(), false, &mut gw, 0.0);
                        acc(
                            &mut grads,
                            &nodes,
                            *weight,
                            Tensor::new(tw.shape().to_vec(), gw).unwrap(),
                        );
                    }
                    if nodes[x.0].tracked {
                        let mut gcols = vec![0.0; hw * 9 * c];
                        gemm(
                            hw,
                            cout,
                            9 * c,
                            g.data(),
                            false,
                            tw.data(),
                            true,
                            &mut gcols,
                            0.0,
                        );
                        let gx = col2im(&gcols, *h, *w, c);
                        acc(
                            &mut grads,
                            &nodes,
                            *x,
                            Tensor::new(tx.shape().to_vec(), gx).unwrap(),
                        );
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    acc(&mut grads, &nodes, *a, Tensor::full(v(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let ta = v(*a);
                    let s = g.item() / ta.len().max(1) as f64;
                    acc(&mut grads, &nodes, *a, Tensor::full(ta.shape(), s));
                }
                Op::SumRows(a) => {
                    let ta = v(*a);
                    let n = ta.cols();
                    let mut ga = Tensor::zeros(ta.shape());
                    for row in ga.data_mut().chunks_mut(n) {
                        row.copy_from_slice(g.data());
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumCols(a) => {
                    let ta = v(*a);
                    let n = ta.cols();
                    let mut ga = Tensor::zeros(ta.shape());
                    for (row, &s) in ga.data_mut().chunks_mut(n).zip(g.data()) {
                        row.fill(s);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, g.transpose()),
                Op::Reshape(a) => {
                    let shape = v(*a).shape().to_vec();
                    acc(&mut grads, &nodes, *a, g.reshape(shape).unwrap());
                }
            }
        }
        out
    }
}
