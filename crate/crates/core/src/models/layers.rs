//! Parameter-store backed building blocks shared by every network.
//!
//! Linear weights are stored as `in x out` so that `y = x W + b` for a
//! row-per-token input. A linear layer picks up a low-rank update when the
//! store holds `lora/<name>.weight/A` and `.../B`.

use kd_autograd::{Graph, ParamStore, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::lora;
use crate::rng::Rng;

pub fn linear(g: &Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w_name = format!("{name}.weight");
    let w = g.param(store, store.require(&w_name)?);
    let mut y = g.matmul(x, w);
    let (a_name, b_name) = lora::adapter_names(&w_name);
    if let (Some(a), Some(b)) = (store.id(&a_name), store.id(&b_name)) {
        let xa = g.matmul(x, g.param(store, a));
        y = g.add(y, g.matmul(xa, g.param(store, b)));
    }
    if let Some(b) = store.id(&format!("{name}.bias")) {
        y = g.add_row(y, g.param(store, b));
    }
    Ok(y)
}

pub fn layer_norm(g: &Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(store, store.require(&format!("{name}.weight"))?);
    let beta = g.param(store, store.require(&format!("{name}.bias"))?);
    Ok(g.layer_norm(x, gamma, beta, 1e-6))
}

/// Multi-head self-attention over the rows of `x` with separate q, k, v
/// projections (`{name}.q`, `{name}.k`, `{name}.v`) and output `{name}.proj`.
pub fn attention(g: &Graph, store: &ParamStore, x: Var, name: &str, heads: usize) -> Result<Var> {
    let q = linear(g, store, x, &format!("{name}.q"))?;
    let k = linear(g, store, x, &format!("{name}.k"))?;
    let v = linear(g, store, x, &format!("{name}.v"))?;
    let d = g.shape(q)[1];
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd);
        let kh = g.slice_cols(k, h * hd, hd);
        let vh = g.slice_cols(v, h * hd, hd);
        let att = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), scale));
        outs.push(g.matmul(att, vh));
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    linear(g, store, cat, &format!("{name}.proj"))
}

/// Pre-norm transformer block.
pub fn block(g: &Graph, store: &ParamStore, x: Var, name: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(g, store, x, &format!("{name}.norm1"))?;
    let x = g.add(x, attention(g, store, h, &format!("{name}.attn"), heads)?);
    let h = layer_norm(g, store, x, &format!("{name}.norm2"))?;
    let h = g.gelu(linear(g, store, h, &format!("{name}.mlp.fc1"))?);
    let h = linear(g, store, h, &format!("{name}.mlp.fc2"))?;
    Ok(g.add(x, h))
}

/// Seeded parameter initialiser.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            self.normal(shape, std)
        };
        self.store.insert(name, t, true)?;
        Ok(())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value), true)?;
        Ok(())
    }

    /// Glorot-normal weight `in x out` plus zero bias.
    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        let std = (2.0 / (input + output) as f64).sqrt();
        self.tensor(&format!("{name}.weight"), &[input, output], std)?;
        self.tensor(&format!("{name}.bias"), &[1, output], 0.0)
    }

    /// He-normal 3x3 kernel `9*cin x cout` plus zero bias.
    pub fn conv3x3(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        self.tensor(&format!("{name}.weight"), &[9 * cin, cout], std)?;
        self.tensor(&format!("{name}.bias"), &[1, cout], 0.0)
    }

    pub fn layer_norm(&mut self, name: &str, n: usize) -> Result<()> {
        self.constant(&format!("{name}.weight"), &[1, n], 1.0)?;
        self.constant(&format!("{name}.bias"), &[1, n], 0.0)
    }

    pub fn block(&mut self, name: &str, d: usize, mlp: usize) -> Result<()> {
        self.layer_norm(&format!("{name}.norm1"), d)?;
        for p in ["q", "k", "v", "proj"] {
            self.linear(&format!("{name}.attn.{p}"), d, d)?;
        }
        self.layer_norm(&format!("{name}.norm2"), d)?;
        self.linear(&format!("{name}.mlp.fc1"), d, mlp)?;
        self.linear(&format!("{name}.mlp.fc2"), mlp, d)
    }
}

pub fn conv3x3(
    g: &Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    h: usize,
    w: usize,
) -> Result<Var> {
    let k = g.param(store, store.require(&format!("{name}.weight"))?);
    let b = g.param(store, store.require(&format!("{name}.bias"))?);
    Ok(g.add_row(g.conv3x3(x, k, h, w), b))
}
