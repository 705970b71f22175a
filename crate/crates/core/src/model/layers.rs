//! Pre-norm transformer building blocks over row-stacked token batches.
//!
//! Activations are `[B·n, D]` matrices; attention reshapes them to
//! `[B·heads, n, D/heads]` internally.

use rand::Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weight `[d_in, d_out]`, zero bias.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(vec![d_in, d_out], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let h = ctx.tape.matmul(x, w)?;
        Ok(ctx.tape.add(h, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        Ok(ctx.tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    /// Self-attention within each of `batch` sequences of equal length.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, batch: usize) -> Result<Var> {
        let [rows, d] = *ctx.tape.shape(x) else {
            unreachable!("attention input is [rows, d]")
        };
        let n = rows / batch;
        let (h, dh) = (self.heads, d / self.heads);
        let split = |ctx: &mut Ctx<'_, T>, lin: &Linear, axes: &[usize], tail: [usize; 2]| -> Result<Var> {
            let y = lin.forward(ctx, x)?;
            let y = ctx.tape.reshape(y, &[batch, n, h, dh])?;
            let y = ctx.tape.permute(y, axes)?;
            Ok(ctx.tape.reshape(y, &[batch * h, tail[0], tail[1]])?)
        };
        let q = split(ctx, &self.q, &[0, 2, 1, 3], [n, dh])?;
        let kt = split(ctx, &self.k, &[0, 2, 3, 1], [dh, n])?;
        let v = split(ctx, &self.v, &[0, 2, 1, 3], [n, dh])?;
        let scores = ctx.tape.matmul(q, kt)?;
        let scores = ctx.tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let attn = ctx.tape.softmax(scores, 2)?;
        let y = ctx.tape.matmul(attn, v)?;
        let y = ctx.tape.reshape(y, &[batch, h, n, dh])?;
        let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
        let y = ctx.tape.reshape(y, &[rows, d])?;
        self.out.forward(ctx, y)
    }
}

/// Two linear layers with GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * mlp_ratio, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, batch: usize) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h, batch)?;
        let x = ctx.tape.add(x, h)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        Ok(ctx.tape.add(x, h)?)
    }

    /// Output projections of both residual branches.
    pub fn residual_outputs(&self) -> [&Linear; 2] {
        [&self.attn.out, &self.mlp.fc2]
    }
}

pub fn run_blocks<T: Scalar>(blocks: &[Block], ctx: &mut Ctx<'_, T>, mut x: Var, batch: usize) -> Result<Var> {
    for b in blocks {
        x = b.forward(ctx, x, batch)?;
    }
    Ok(x)
}
