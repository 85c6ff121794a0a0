//! Cross-scale token attention.
//!
//! The input tokens are split along their channel axis into `2 * P` equal
//! pieces, where `P` is the number of large scales. Piece `2j` is kept at the
//! small token size; piece `2j + 1` is folded back to its canvas and
//! re-extracted as larger, overlapping tokens. Each (small, large) pair then
//! runs two attentions that swap key/value sources: large queries attend to
//! small keys/values and small queries attend to large keys/values. The large
//! side is narrowed before attention and widened after it, folded back and
//! re-tokenized at the small size, and every piece is concatenated and passed
//! through a final `d x d` projection.
//!
//! Two scales `[t, t']` give one pair over half-width pieces. Three scales
//! `[t, t', t'']` give two pairs over quarter-width pieces. A single scale
//! `[t]` gives one pair whose large side uses the small token size itself.

use serde::{Deserialize, Serialize};

use super::{attend, Qkv};
use crate::error::{ActError, Result};
use crate::flops;
use crate::nn::{Binding, Builder, Linear};
use crate::tokenization::{retokenize_overlap, token_count, tokenize, TokenGeometry, TokenGrid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CstaConfig {
    /// Small token size `t`.
    pub token: usize,
    /// Token sizes, smallest first; the first entry equals `token`.
    pub scales: Vec<usize>,
    /// Stride `s'` for every large scale.
    pub stride: usize,
    pub heads: usize,
}

impl CstaConfig {
    pub fn two_scale(token: usize, large: usize, stride: usize, heads: usize) -> Self {
        CstaConfig {
            token,
            scales: vec![token, large],
            stride,
            heads,
        }
    }

    /// `(large token size, stride)` for each cross-attention pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        if self.scales.len() == 1 {
            vec![(self.token, self.token)]
        } else {
            self.scales[1..].iter().map(|&s| (s, self.stride)).collect()
        }
    }

    /// Number of channel pieces the input is split into.
    pub fn pieces(&self) -> usize {
        2 * self.pairs().len()
    }

    /// Checks everything that does not depend on the canvas size.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scales.is_empty() || self.scales.len() > 3 {
            return Err(ActError::Config(format!(
                "CSTA needs 1 to 3 token scales, got {:?}",
                self.scales
            )));
        }
        if self.scales[0] != self.token || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ActError::Config(format!(
                "CSTA scales {:?} must start at token size {} and strictly increase",
                self.scales, self.token
            )));
        }
        if self.stride == 0 {
            return Err(ActError::Config("CSTA stride must be positive".into()));
        }
        let pieces = self.pieces();
        if channels % pieces != 0 {
            return Err(ActError::Config(format!(
                "{channels} channels cannot be split into {pieces} CSTA pieces"
            )));
        }
        let width = channels / pieces * self.token * self.token;
        if self.heads == 0 || width % self.heads != 0 {
            return Err(ActError::Config(format!(
                "{} heads do not divide CSTA piece width {width}",
                self.heads
            )));
        }
        Ok(())
    }

    /// Checks that every large scale fits the canvas and yields fewer tokens
    /// than the small grid.
    pub fn validate_canvas(&self, height: usize, width: usize) -> Result<()> {
        let n = token_count(height, width, self.token, self.token);
        for (large, stride) in self.pairs() {
            if large > height || large > width {
                return Err(ActError::Geometry(format!(
                    "large token {large} exceeds {height}x{width} canvas"
                )));
            }
            let n_large = token_count(height, width, large, stride);
            if large > self.token && n_large >= n {
                return Err(ActError::Config(format!(
                    "large tokens (size {large}, stride {stride}) give n' = {n_large} >= n = {n}"
                )));
            }
        }
        Ok(())
    }
}

/// One small/large cross-attention pair.
#[derive(Clone, Debug)]
pub struct CrossScalePair {
    pub large: usize,
    pub stride: usize,
    /// Token width of each piece.
    pub width: usize,
    /// Channels of each piece.
    pub channels: usize,
    pub small_qkv: Qkv,
    pub large_qkv: Qkv,
    /// Large token dimension -> piece width.
    pub before: Linear,
    /// Piece width -> large token dimension.
    pub after: Linear,
}

#[derive(Clone, Debug)]
pub struct Csta {
    pub config: CstaConfig,
    pub pairs: Vec<CrossScalePair>,
    pub out: Linear,
}

impl Csta {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, config: &CstaConfig) -> Result<Self> {
        config.validate(channels)?;
        let mut b = b.sub(name);
        let t = config.token;
        let piece_channels = channels / config.pieces();
        let width = piece_channels * t * t;
        let dim = channels * t * t;
        let mut pairs = Vec::new();
        for (j, (large, stride)) in config.pairs().into_iter().enumerate() {
            let mut pb = b.sub(&format!("pair{j}"));
            let large_dim = piece_channels * large * large;
            pairs.push(CrossScalePair {
                large,
                stride,
                width,
                channels: piece_channels,
                small_qkv: Qkv::new(&mut pb, "small", width)?,
                large_qkv: Qkv::new(&mut pb, "large", width)?,
                before: Linear::new(&mut pb, "before", large_dim, width)?,
                after: Linear::new(&mut pb, "after", width, large_dim)?,
            });
        }
        Ok(Csta {
            config: config.clone(),
            pairs,
            out: Linear::new(&mut b, "out", dim, dim)?,
        })
    }

    pub fn forward(&self, p: &Binding, grid: &TokenGrid) -> Result<TokenGrid> {
        let g = grid.geometry;
        if g.token != self.config.token || g.stride != g.token {
            return Err(ActError::Geometry(format!(
                "CSTA built for token size {} got grid {g:?}",
                self.config.token
            )));
        }
        let pieces = self.config.pieces();
        if g.channels % pieces != 0 || self.pairs[0].channels * pieces != g.channels {
            return Err(ActError::Geometry(format!(
                "CSTA built for {} channels got {}",
                self.pairs[0].channels * pieces,
                g.channels
            )));
        }
        self.config.validate_canvas(g.height, g.width)?;

        let n = g.count();
        let d = g.dim();
        let heads = self.config.heads;
        flops::note(flops::ATTN_MIXING, (n * d * d) as u64);

        let mut outputs = Vec::with_capacity(pieces);
        for (j, pair) in self.pairs.iter().enumerate() {
            let w = pair.width;
            let piece_geometry = TokenGeometry {
                channels: pair.channels,
                ..g
            };
            let small = grid.tokens.narrow(1, 2 * j * w, w)?;
            let source = TokenGrid::new(grid.tokens.narrow(1, (2 * j + 1) * w, w)?, piece_geometry)?;
            let large_grid = retokenize_overlap(&source, pair.large, pair.stride)?;
            let n_large = large_grid.count();
            flops::note(flops::ATTN_MIXING, (n_large * d * d) as u64);

            let large = pair.before.forward(p, &large_grid.tokens)?;
            let (qs, ks, vs) = pair.small_qkv.forward(p, &small)?;
            let (ql, kl, vl) = pair.large_qkv.forward(p, &large)?;
            let large_out = attend(&ql, &ks, &vs, heads)?;
            let small_out = attend(&qs, &kl, &vl, heads)?;

            let widened = large_grid.with_tokens(pair.after.forward(p, &large_out)?)?;
            let canvas = crate::tokenization::rearrange_to_image(&widened)?;
            let back = tokenize(&canvas, g.token)?;
            outputs.push(small_out);
            outputs.push(back.tokens);
        }
        let joined = crate::tensor::Var::concat(&outputs, 1)?;
        grid.with_tokens(self.out.forward(p, &joined)?)
    }

    /// Parameter count for a given channel count and configuration.
    pub fn param_count(channels: usize, config: &CstaConfig) -> usize {
        let t = config.token;
        let piece_channels = channels / config.pieces();
        let width = piece_channels * t * t;
        let dim = channels * t * t;
        config
            .pairs()
            .iter()
            .map(|&(large, _)| {
                let large_dim = piece_channels * large * large;
                2 * Qkv::param_count(width)
                    + Linear::param_count(large_dim, width)
                    + Linear::param_count(width, large_dim)
            })
            .sum::<usize>()
            + Linear::param_count(dim, dim)
    }
}
