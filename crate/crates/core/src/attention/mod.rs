//! Self-attention, cross-scale token attention, the feed-forward network and
//! the transformer block that chains them.

mod block;
mod csta;
mod ffn;

pub use block::{AttentionLayer, AttentionMix, TransformerBlock, TransformerBlockConfig};
pub use csta::{CrossScalePair, Csta, CstaConfig};
pub use ffn::{Ffn, MlpBlock};

use crate::error::{ActError, Result};
use crate::flops;
use crate::nn::{Binding, Builder, Linear};
use crate::tensor::Var;
use crate::tokenization::TokenGrid;

/// Default head count for every attention in the network.
pub const DEFAULT_HEADS: usize = 8;

fn split_heads(x: &Var, heads: usize) -> Result<Var> {
    let [n, w] = *x.shape() else {
        return Err(ActError::dim("split_heads", x.shape(), &[heads]));
    };
    if heads == 0 || w % heads != 0 {
        return Err(ActError::Config(format!(
            "{heads} heads do not divide width {w}"
        )));
    }
    x.reshape(&[n, heads, w / heads])?.permute(&[1, 0, 2])
}

fn merge_heads(x: &Var) -> Result<Var> {
    let [h, n, dh] = *x.shape() else {
        return Err(ActError::dim("merge_heads", x.shape(), &[]));
    };
    x.permute(&[1, 0, 2])?.reshape(&[n, h * dh])
}

/// Row-stochastic attention weights `softmax(q k^T / sqrt(d_head))`, one
/// `[n_q, n_k]` matrix per head: `[heads, n_q, n_k]`.
pub fn attention_weights(q: &Var, k: &Var, heads: usize) -> Result<Var> {
    if q.shape().len() != 2 || k.shape().len() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(ActError::dim("attention", q.shape(), k.shape()));
    }
    let (nq, nk, w) = (q.shape()[0], k.shape()[0], q.shape()[1]);
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let d_head = (w / heads) as f64;
    let scores = qh.matmul(&kh.transpose_last2()?)?;
    flops::note(flops::ATTN_AFFINITY, (nq * nk * w) as u64);
    scores.scale(1.0 / d_head.sqrt())?.softmax_last()
}

/// Multi-head scaled dot-product attention without projections:
/// `q: [n_q, w]`, `k, v: [n_k, w]` -> `[n_q, w]`.
pub fn attend(q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
    if k.shape() != v.shape() {
        return Err(ActError::dim("attention", k.shape(), v.shape()));
    }
    let weights = attention_weights(q, k, heads)?;
    merge_heads(&weights.matmul(&split_heads(v, heads)?)?)
}

/// Query, key and value projections of one token stream.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Qkv {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Qkv {
            q: Linear::new(&mut b, "q", width, width)?,
            k: Linear::new(&mut b, "k", width, width)?,
            v: Linear::new(&mut b, "v", width, width)?,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.q.forward(p, x)?,
            self.k.forward(p, x)?,
            self.v.forward(p, x)?,
        ))
    }

    pub fn param_count(width: usize) -> usize {
        3 * Linear::param_count(width, width)
    }
}

/// Standard multi-head self-attention over one token grid.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub qkv: Qkv,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ActError::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let mut b = b.sub(name);
        Ok(Mhsa {
            qkv: Qkv::new(&mut b, "qkv", dim)?,
            out: Linear::new(&mut b, "out", dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, p: &Binding, grid: &TokenGrid) -> Result<TokenGrid> {
        let x = &grid.tokens;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        flops::note(flops::ATTN_MIXING, (n * d * d) as u64);
        let (q, k, v) = self.qkv.forward(p, x)?;
        let mixed = attend(&q, &k, &v, self.heads)?;
        grid.with_tokens(self.out.forward(p, &mixed)?)
    }

    pub fn param_count(dim: usize) -> usize {
        Qkv::param_count(dim) + Linear::param_count(dim, dim)
    }
}
