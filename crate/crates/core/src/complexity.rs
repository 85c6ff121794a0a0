//! Closed-form parameter and multiply-accumulate accounting.
//!
//! One MAC counts as one FLOP. Convolutions, linear layers and the two
//! attention matrix products are counted; bias adds, activations,
//! normalizations, softmax, pooling and rearrangements are not. Every count
//! here must agree exactly with the runtime parameter enumeration and with a
//! counting-mode forward pass.

use std::fmt::Write as _;

use crate::attention::{AttentionMix, Csta, Mhsa, TransformerBlock, TransformerBlockConfig};
use crate::cnn::CnnBlock;
use crate::error::{ActError, Result};
use crate::fusion::{FusionBlock, FusionDirection, FusionMode};
use crate::model::{ModelConfig, TailKind};
use crate::nn::Conv2d;
use crate::tokenization::token_count;

/// Attention-core cost of self-attention over `n` tokens and of cross-scale
/// attention between `n` and `n_large` tokens, all of width `d`:
/// `(n^2 d + n d^2, n n' d + (n + n') d^2)`.
pub fn attention_cost(n: u64, n_large: u64, d: u64) -> (u64, u64) {
    (n * n * d + n * d * d, n * n_large * d + (n + n_large) * d * d)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    /// MACs at the report's canvas; `None` for parameter-only reports.
    pub macs: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    /// Input canvas `(h, w)` the MAC counts refer to.
    pub canvas: Option<[usize; 2]>,
    pub components: Vec<ComponentCost>,
    /// Summed attention-core terms of every self-attention layer.
    pub attention_mhsa: Option<u64>,
    /// Summed attention-core terms of every cross-scale attention layer.
    pub attention_csta: Option<u64>,
}

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn total_macs(&self) -> Option<u64> {
        self.components.iter().map(|c| c.macs).sum()
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<u64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out = String::from("component,params,macs\n");
        for c in &self.components {
            let _ = writeln!(out, "{},{},{}", c.name, c.params, opt(c.macs));
        }
        let _ = writeln!(out, "total,{},{}", self.total_params(), opt(self.total_macs()));
        let _ = writeln!(out, "attention_core.mhsa,,{}", opt(self.attention_mhsa));
        let _ = writeln!(out, "attention_core.csta,,{}", opt(self.attention_csta));
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.components.iter().map(|c| c.name.len()).max().unwrap_or(5).max(20);
        let macs = |v: Option<u64>| v.map_or_else(|| "-".into(), |v| format!("{:.3}G", v as f64 / 1e9));
        let mut out = String::new();
        if let Some([h, w]) = self.canvas {
            let _ = writeln!(out, "input canvas {h}x{w}");
        }
        let _ = writeln!(out, "{:<width$} {:>14} {:>12}", "component", "params", "MACs");
        for c in &self.components {
            let _ = writeln!(out, "{:<width$} {:>14} {:>12}", c.name, c.params, macs(c.macs));
        }
        let _ = writeln!(
            out,
            "{:<width$} {:>14} {:>12}",
            "total",
            format!("{} ({:.2}M)", self.total_params(), self.total_params() as f64 / 1e6),
            macs(self.total_macs())
        );
        if self.attention_mhsa.is_some() {
            let _ = writeln!(out, "{:<width$} {:>14} {:>12}", "attention core MHSA", "", macs(self.attention_mhsa));
            let _ = writeln!(out, "{:<width$} {:>14} {:>12}", "attention core CSTA", "", macs(self.attention_csta));
        }
        out
    }
}

fn conv_macs(ci: usize, co: usize, k: usize, hw: usize) -> u64 {
    (co * ci * k * k * hw) as u64
}

fn linear_macs(rows: usize, i: usize, o: usize) -> u64 {
    (rows * i * o) as u64
}

/// Token counts of the small grid and of each large grid.
struct Tokens {
    n: usize,
    large: Vec<usize>,
}

fn mhsa_macs(n: usize, d: usize) -> u64 {
    3 * linear_macs(n, d, d) + 2 * (n * n * d) as u64 + linear_macs(n, d, d)
}

fn csta_macs(cfg: &TransformerBlockConfig, tok: &Tokens) -> u64 {
    let c = &cfg.csta;
    let pc = cfg.channels / c.pieces();
    let w = pc * c.token * c.token;
    let n = tok.n;
    let pairs: u64 = c
        .pairs()
        .iter()
        .zip(&tok.large)
        .map(|(&(large, _), &nl)| {
            let ld = pc * large * large;
            linear_macs(nl, ld, w)
                + 3 * linear_macs(n, w, w)
                + 3 * linear_macs(nl, w, w)
                + 4 * (n * nl * w) as u64
                + linear_macs(nl, w, ld)
        })
        .sum();
    pairs + linear_macs(n, cfg.dim(), cfg.dim())
}

fn csta_core(cfg: &TransformerBlockConfig, tok: &Tokens) -> u64 {
    let c = &cfg.csta;
    let d = cfg.dim() as u64;
    let w = (cfg.channels / c.pieces() * c.token * c.token) as u64;
    let n = tok.n as u64;
    n * d * d + tok.large.iter().map(|&nl| nl as u64 * d * d + 2 * n * nl as u64 * w).sum::<u64>()
}

fn slots(mix: AttentionMix) -> [bool; 2] {
    match mix {
        AttentionMix::MhsaCsta => [false, true],
        AttentionMix::MhsaOnly => [false, false],
        AttentionMix::CstaOnly => [true, true],
    }
}

fn fusion_macs(cfg: &ModelConfig, mode: FusionMode, last: bool, hw: usize, n: usize) -> u64 {
    let c = cfg.channels;
    let width = mode.width(c);
    let d = cfg.dim();
    let stack = if mode.direction == FusionDirection::None {
        0
    } else {
        cfg.fusion_residual_blocks as u64 * 2 * conv_macs(width, width, 1, hw)
    };
    let reduce = if width != c { conv_macs(width, c, 1, hw) } else { 0 };
    let mlp = 2 * linear_macs(n, d, cfg.ffn_ratio * d);
    let conv3 = conv_macs(c, c, 3, hw);
    stack
        + if last {
            conv_macs(width, c, 3, hw)
        } else {
            match mode.direction {
                FusionDirection::Bidirectional => mlp + conv3,
                FusionDirection::TToC => reduce + conv3,
                FusionDirection::CToT => reduce + mlp,
                FusionDirection::None => 0,
            }
        }
}

fn tail_factors(cfg: &ModelConfig) -> Vec<usize> {
    match (cfg.tail, cfg.scale) {
        (TailKind::Restoration, _) => vec![],
        (TailKind::PixelShuffle, 4) => vec![2, 2],
        (TailKind::PixelShuffle, s) => vec![s],
    }
}

fn build(cfg: &ModelConfig, canvas: Option<[usize; 2]>) -> Result<ComplexityReport> {
    cfg.validate()?;
    let c = cfg.channels;
    let tcfg = cfg.transformer();
    let d = cfg.dim();
    let geometry = canvas.map(|[h, w]| {
        let n = token_count(h, w, cfg.token, cfg.token);
        let large = tcfg.csta.pairs().iter().map(|&(t, s)| token_count(h, w, t, s)).collect();
        (h * w, Tokens { n, large })
    });
    let macs = |f: &dyn Fn(usize, &Tokens) -> u64| geometry.as_ref().map(|(hw, tok)| f(*hw, tok));
    let mut components = Vec::new();
    let mut push = |name: String, params: usize, m: Option<u64>| {
        components.push(ComponentCost { name, params: params as u64, macs: m })
    };

    push(
        "head".into(),
        Conv2d::param_count(3, c, 3) + 4 * Conv2d::param_count(c, c, 3),
        macs(&|hw, _| conv_macs(3, c, 3, hw) + 4 * conv_macs(c, c, 3, hw)),
    );
    if cfg.use_positional_embedding {
        push("body.pos_embed".into(), cfg.pe_tokens() * d, macs(&|_, _| 0));
    }
    let mut mhsa_core = 0u64;
    let mut csta_core_total = 0u64;
    for i in 0..cfg.blocks {
        let last = i + 1 == cfg.blocks;
        push(
            format!("body.stage{i}.transformer"),
            TransformerBlock::param_count(&tcfg),
            macs(&|_, tok| {
                slots(cfg.attention)
                    .iter()
                    .map(|&csta| {
                        let attn = if csta { csta_macs(&tcfg, tok) } else { mhsa_macs(tok.n, d) };
                        attn + 2 * linear_macs(tok.n, d, cfg.ffn_ratio * d)
                    })
                    .sum()
            }),
        );
        if let Some((_, tok)) = &geometry {
            for csta in slots(cfg.attention) {
                if csta {
                    csta_core_total += csta_core(&tcfg, tok);
                } else {
                    mhsa_core += attention_cost(tok.n as u64, 0, d as u64).0;
                }
            }
        }
        push(
            format!("body.stage{i}.cnn"),
            CnnBlock::param_count(c, cfg.rcabs_per_block, cfg.ca_reduction),
            macs(&|hw, _| {
                let squeezed = c / cfg.ca_reduction;
                let rcab = 2 * conv_macs(c, c, 3, hw) + 2 * conv_macs(c, squeezed, 1, 1);
                cfg.rcabs_per_block as u64 * rcab + conv_macs(c, c, 3, hw)
            }),
        );
        if last || cfg.fusion.direction != FusionDirection::None {
            push(
                format!("body.stage{i}.fusion"),
                FusionBlock::param_count(c, cfg.token, cfg.ffn_ratio, cfg.fusion_residual_blocks, cfg.fusion, last),
                macs(&|hw, tok| fusion_macs(cfg, cfg.fusion, last, hw, tok.n)),
            );
        }
    }
    let factors = tail_factors(cfg);
    push(
        "tail".into(),
        factors.iter().map(|&s| Conv2d::param_count(c, c * s * s, 3)).sum::<usize>() + Conv2d::param_count(c, 3, 3),
        macs(&|hw, _| {
            let mut area = hw;
            let mut total = 0;
            for &s in &factors {
                total += conv_macs(c, c * s * s, 3, area);
                area *= s * s;
            }
            total + conv_macs(c, 3, 3, area)
        }),
    );
    Ok(ComplexityReport {
        canvas,
        components,
        attention_mhsa: canvas.map(|_| mhsa_core),
        attention_csta: canvas.map(|_| csta_core_total),
    })
}

/// Parameter counts per component.
pub fn count_params(cfg: &ModelConfig) -> Result<ComplexityReport> {
    build(cfg, None)
}

/// Parameter and MAC counts for an `h x w` input canvas. The canvas must be
/// one the network accepts without padding.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<ComplexityReport> {
    let t = cfg.large_token();
    if height < t || width < t || height % cfg.token != 0 || width % cfg.token != 0 {
        return Err(ActError::Geometry(format!(
            "{height}x{width} is not a legal canvas for token sizes {} and {t}",
            cfg.token
        )));
    }
    cfg.csta().validate_canvas(height, width)?;
    build(cfg, Some([height, width]))
}

/// Extra parameters of the positional embedding, `n * d`.
pub fn positional_params(cfg: &ModelConfig) -> u64 {
    (cfg.pe_tokens() * cfg.dim()) as u64
}

/// Parameters of one cross-scale attention layer minus one self-attention layer.
pub fn csta_minus_mhsa(cfg: &ModelConfig) -> i64 {
    Csta::param_count(cfg.channels, &cfg.csta()) as i64 - Mhsa::param_count(cfg.dim()) as i64
}
