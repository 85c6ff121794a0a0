//! Conversion between image-like features and token grids.
//!
//! A token is a `t x t` window flattened channel-major, then row, then
//! column, so a token of `c` channels has dimension `c * t^2` and splitting a
//! token along its last axis splits the underlying channels. Tokens are
//! ordered row-major over the window lattice. Folding overlapping windows
//! back onto the canvas sums their contributions without normalization.

use crate::error::{ActError, Result};
use crate::tensor::{window_count, Var};

/// Spatial bookkeeping that travels with a token matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub token: usize,
    pub stride: usize,
}

impl TokenGeometry {
    pub fn rows(&self) -> usize {
        window_count(self.height, self.token, self.stride)
    }

    pub fn cols(&self) -> usize {
        window_count(self.width, self.token, self.stride)
    }

    /// Number of tokens.
    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Token dimension `c * t^2`.
    pub fn dim(&self) -> usize {
        self.channels * self.token * self.token
    }
}

/// Token matrix `n x d` plus the geometry needed to put it back on a canvas.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub geometry: TokenGeometry,
}

impl TokenGrid {
    pub fn new(tokens: Var, geometry: TokenGeometry) -> Result<Self> {
        if tokens.shape() != [geometry.count(), geometry.dim()] {
            return Err(ActError::Geometry(format!(
                "token matrix {:?} inconsistent with geometry {geometry:?} (expects [{}, {}])",
                tokens.shape(),
                geometry.count(),
                geometry.dim()
            )));
        }
        Ok(TokenGrid { tokens, geometry })
    }

    /// Same geometry, new token values.
    pub fn with_tokens(&self, tokens: Var) -> Result<Self> {
        Self::new(tokens, self.geometry)
    }

    pub fn count(&self) -> usize {
        self.geometry.count()
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }
}

/// Number of `token x token` windows at `stride` on an `h x w` canvas:
/// `floor((h - t) / s + 1) * floor((w - t) / s + 1)`.
pub fn token_count(height: usize, width: usize, token: usize, stride: usize) -> usize {
    window_count(height, token, stride) * window_count(width, token, stride)
}

/// Non-overlapping tokenization of a `[c, h, w]` feature map.
pub fn tokenize(feature: &Var, token: usize) -> Result<TokenGrid> {
    let [c, h, w] = *feature.shape() else {
        return Err(ActError::Geometry(format!(
            "tokenize expects a [c, h, w] feature map, got {:?}",
            feature.shape()
        )));
    };
    if token == 0 || h % token != 0 || w % token != 0 {
        return Err(ActError::Geometry(format!(
            "token size {token} does not divide {h}x{w}"
        )));
    }
    let geometry = TokenGeometry {
        channels: c,
        height: h,
        width: w,
        token,
        stride: token,
    };
    TokenGrid::new(feature.unfold(token, token)?, geometry)
}

/// Places tokens back on their canvas; overlapping contributions add up.
pub fn rearrange_to_image(grid: &TokenGrid) -> Result<Var> {
    let g = grid.geometry;
    if grid.tokens.shape() != [g.count(), g.dim()] {
        return Err(ActError::Geometry(format!(
            "token matrix {:?} inconsistent with geometry {g:?}",
            grid.tokens.shape()
        )));
    }
    grid.tokens.fold(g.channels, g.height, g.width, g.token, g.stride)
}

/// Re-tokenizes a non-overlapping grid with larger, possibly overlapping
/// windows: fold back to the canvas, then unfold with `large` / `stride`.
pub fn retokenize_overlap(grid: &TokenGrid, large: usize, stride: usize) -> Result<TokenGrid> {
    let g = grid.geometry;
    if g.stride != g.token {
        return Err(ActError::Geometry(
            "re-tokenization expects a non-overlapping source grid".into(),
        ));
    }
    if large < g.token || large > g.height || large > g.width || stride == 0 {
        return Err(ActError::Geometry(format!(
            "large token {large} (stride {stride}) invalid for {}x{} canvas with token {}",
            g.height, g.width, g.token
        )));
    }
    let image = rearrange_to_image(grid)?;
    let geometry = TokenGeometry {
        token: large,
        stride,
        ..g
    };
    TokenGrid::new(image.unfold(large, stride)?, geometry)
}
