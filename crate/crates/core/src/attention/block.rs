use serde::{Deserialize, Serialize};

use super::{Csta, CstaConfig, Ffn, Mhsa};
use crate::error::Result;
use crate::nn::{Binding, Builder, LayerNorm};
use crate::tokenization::TokenGrid;

/// Which attention fills the two attention slots of a transformer block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMix {
    /// Self-attention, then cross-scale token attention.
    #[default]
    MhsaCsta,
    MhsaOnly,
    CstaOnly,
}

#[derive(Clone, Debug)]
pub struct TransformerBlockConfig {
    pub channels: usize,
    pub ffn_ratio: usize,
    pub heads: usize,
    pub mix: AttentionMix,
    pub csta: CstaConfig,
    pub ln_eps: f64,
}

impl TransformerBlockConfig {
    pub fn dim(&self) -> usize {
        self.channels * self.csta.token * self.csta.token
    }
}

#[derive(Clone, Debug)]
pub enum AttentionLayer {
    Mhsa(Mhsa),
    Csta(Csta),
}

impl AttentionLayer {
    fn new(b: &mut Builder<'_>, name: &str, use_csta: bool, cfg: &TransformerBlockConfig) -> Result<Self> {
        Ok(if use_csta {
            AttentionLayer::Csta(Csta::new(b, name, cfg.channels, &cfg.csta)?)
        } else {
            AttentionLayer::Mhsa(Mhsa::new(b, name, cfg.dim(), cfg.heads)?)
        })
    }

    pub fn forward(&self, p: &Binding, grid: &TokenGrid) -> Result<TokenGrid> {
        match self {
            AttentionLayer::Mhsa(m) => m.forward(p, grid),
            AttentionLayer::Csta(c) => c.forward(p, grid),
        }
    }
}

/// Pre-norm residual block: two (attention, FFN) stages.
///
/// `x += A1(LN(x)); x += FFN1(LN(x)); x += A2(LN(x)); x += FFN2(LN(x))`
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub stages: [(LayerNorm, AttentionLayer, LayerNorm, Ffn); 2],
}

impl TransformerBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &TransformerBlockConfig) -> Result<Self> {
        let mut b = b.sub(name);
        let d = cfg.dim();
        let (first_csta, second_csta) = match cfg.mix {
            AttentionMix::MhsaCsta => (false, true),
            AttentionMix::MhsaOnly => (false, false),
            AttentionMix::CstaOnly => (true, true),
        };
        let mut stage = |i: usize, csta: bool| -> Result<_> {
            Ok((
                LayerNorm::new(&mut b, &format!("norm{}", 2 * i + 1), d, cfg.ln_eps)?,
                AttentionLayer::new(&mut b, &format!("attn{}", i + 1), csta, cfg)?,
                LayerNorm::new(&mut b, &format!("norm{}", 2 * i + 2), d, cfg.ln_eps)?,
                Ffn::new(&mut b, &format!("ffn{}", i + 1), d, cfg.ffn_ratio)?,
            ))
        };
        let s1 = stage(0, first_csta)?;
        let s2 = stage(1, second_csta)?;
        Ok(TransformerBlock { stages: [s1, s2] })
    }

    pub fn forward(&self, p: &Binding, grid: &TokenGrid) -> Result<TokenGrid> {
        let mut x = grid.clone();
        for (norm_a, attn, norm_f, ffn) in &self.stages {
            let normed = x.with_tokens(norm_a.forward(p, &x.tokens)?)?;
            let attended = attn.forward(p, &normed)?;
            x = x.with_tokens(x.tokens.add(&attended.tokens)?)?;
            let fed = ffn.forward(p, &norm_f.forward(p, &x.tokens)?)?;
            x = x.with_tokens(x.tokens.add(&fed)?)?;
        }
        Ok(x)
    }

    pub fn param_count(cfg: &TransformerBlockConfig) -> usize {
        let d = cfg.dim();
        let mhsa = Mhsa::param_count(d);
        let csta = Csta::param_count(cfg.channels, &cfg.csta);
        let attn = match cfg.mix {
            AttentionMix::MhsaCsta => mhsa + csta,
            AttentionMix::MhsaOnly => 2 * mhsa,
            AttentionMix::CstaOnly => 2 * csta,
        };
        4 * 2 * d + attn + 2 * Ffn::param_count(d, cfg.ffn_ratio)
    }
}
