use rand::Rng;

use super::params::{dense, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &Graph, s: &ParamStore, x: Var) -> Result<Var> {
        g.layer_norm(x, s.var(g, self.gamma), s.var(g, self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Self {
            w: store.add(format!("{name}.w"), dense(rng, fan_in, fan_out, gain)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let y = g.matmul(x, s.var(g, self.w))?;
        g.add_row(y, s.var(g, self.b))
    }
}

/// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    heads: usize,
    dim: usize,
    norm_attn: Norm,
    qkv: Linear,
    out: Linear,
    norm_ff: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize, ff_mult: usize) -> Self {
        Self {
            heads,
            dim: d,
            norm_attn: Norm::init(store, &format!("{name}.ln_attn"), d),
            qkv: Linear::init(store, rng, &format!("{name}.qkv"), d, 3 * d, 1.0),
            out: Linear::init(store, rng, &format!("{name}.attn_out"), d, d, 0.5),
            norm_ff: Norm::init(store, &format!("{name}.ln_ff"), d),
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), d, ff_mult * d, 1.0),
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), ff_mult * d, d, 0.5),
        }
    }

    pub fn attention(&self, g: &Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let d = self.dim;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(g, s, x)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * hd, hd)?;
            let k = g.slice_cols(qkv, d + h * hd, hd)?;
            let v = g.slice_cols(qkv, 2 * d + h * hd, hd)?;
            let kt = g.transpose(k)?;
            let scores = g.scale(g.matmul(q, kt)?, scale);
            let att = g.softmax(scores)?;
            outs.push(g.matmul(att, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.out.forward(g, s, cat)
    }

    pub fn forward(&self, g: &Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm_attn.forward(g, s, x)?;
        let a = self.attention(g, s, h)?;
        let x = g.add(x, a)?;
        let h = self.norm_ff.forward(g, s, x)?;
        let f = self.ff1.forward(g, s, h)?;
        let f = self.ff2.forward(g, s, g.gelu(f))?;
        g.add(x, f)
    }
}

/// Two-layer MLP output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    l1: Linear,
    l2: Linear,
}

impl Head {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, out: usize) -> Self {
        Self {
            l1: Linear::init(store, rng, &format!("{name}.l1"), d, d, 1.0),
            l2: Linear::init(store, rng, &format!("{name}.l2"), d, out, 0.5),
        }
    }

    pub fn forward(&self, g: &Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = g.gelu(self.l1.forward(g, s, x)?);
        self.l2.forward(g, s, h)
    }
}
