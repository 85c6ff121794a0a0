use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMix, CstaConfig, TransformerBlockConfig, DEFAULT_HEADS};
use crate::cnn::DEFAULT_REDUCTION;
use crate::error::{ActError, Result};
use crate::fusion::FusionMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    /// Convolution, pixel shuffle, convolution to RGB.
    #[default]
    PixelShuffle,
    /// One 3x3 convolution to RGB at the input resolution.
    Restoration,
}

/// Every architectural hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `c`.
    pub channels: usize,
    /// Number of paired transformer/CNN/fusion stages `N`.
    pub blocks: usize,
    /// Small token size `t`.
    pub token: usize,
    /// Token sizes used by cross-scale attention, smallest first (`[t, t']`).
    pub csta_scales: Vec<usize>,
    /// Stride `s'` of the large tokens.
    pub large_stride: usize,
    /// FFN expansion ratio `r`.
    pub ffn_ratio: usize,
    /// Heads of every attention.
    pub heads: usize,
    pub rcabs_per_block: usize,
    pub ca_reduction: usize,
    /// 1x1 residual blocks inside each fusion block.
    pub fusion_residual_blocks: usize,
    pub fusion: FusionMode,
    pub attention: AttentionMix,
    pub use_positional_embedding: bool,
    /// Canvas (height, width) the learnable positional embedding is sized for.
    pub pe_canvas: [usize; 2],
    pub tail: TailKind,
    pub scale: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            blocks: 4,
            token: 3,
            csta_scales: vec![3, 6],
            large_stride: 3,
            ffn_ratio: 4,
            heads: DEFAULT_HEADS,
            rcabs_per_block: 12,
            ca_reduction: DEFAULT_REDUCTION,
            fusion_residual_blocks: 4,
            fusion: FusionMode::default(),
            attention: AttentionMix::default(),
            use_positional_embedding: false,
            pe_canvas: [48, 48],
            tail: TailKind::default(),
            scale: 2,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl ModelConfig {
    /// Small configuration used for gradient checks and fast tests:
    /// `c = 8`, `N = 2`, one RCAB per block, `d = 72`.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 8,
            blocks: 2,
            heads: 2,
            rcabs_per_block: 1,
            ca_reduction: 4,
            ffn_ratio: 2,
            fusion_residual_blocks: 1,
            pe_canvas: [12, 12],
            ..ModelConfig::default()
        }
    }

    /// Token dimension `d = c * t^2`.
    pub fn dim(&self) -> usize {
        self.channels * self.token * self.token
    }

    /// Large token size `t'` (the largest cross-attention scale).
    pub fn large_token(&self) -> usize {
        *self.csta_scales.last().unwrap_or(&self.token)
    }

    /// Large token dimension `d' = (c / pieces) * t'^2`; `(c / 2) * t'^2`
    /// for two scales.
    pub fn large_dim(&self) -> usize {
        let t = self.large_token();
        self.channels / self.csta().pieces() * t * t
    }

    pub fn csta(&self) -> CstaConfig {
        CstaConfig {
            token: self.token,
            scales: self.csta_scales.clone(),
            stride: self.large_stride,
            heads: self.heads,
        }
    }

    pub fn transformer(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            channels: self.channels,
            ffn_ratio: self.ffn_ratio,
            heads: self.heads,
            mix: self.attention,
            csta: self.csta(),
            ln_eps: self.ln_eps,
        }
    }

    /// Upscaling factor of the output relative to the input.
    pub fn output_scale(&self) -> usize {
        match self.tail {
            TailKind::PixelShuffle => self.scale,
            TailKind::Restoration => 1,
        }
    }

    /// Spatial extents fed to the body are padded to multiples of this.
    pub fn pad_multiple(&self) -> usize {
        self.csta_scales
            .iter()
            .fold(lcm(self.token, self.large_stride), |m, &s| lcm(m, s))
    }

    /// Smallest legal canvas extent `>= len`.
    pub fn padded_extent(&self, len: usize) -> usize {
        let m = self.pad_multiple();
        len.max(self.large_token()).div_ceil(m) * m
    }

    /// Token count the positional embedding is sized for.
    pub fn pe_tokens(&self) -> usize {
        (self.pe_canvas[0] / self.token) * (self.pe_canvas[1] / self.token)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ActError::Config(msg));
        if self.channels == 0 || self.blocks == 0 || self.token == 0 || self.ffn_ratio == 0 {
            return bad("channels, blocks, token size and FFN ratio must be positive".into());
        }
        if self.heads == 0 || self.dim() % self.heads != 0 {
            return bad(format!("{} heads do not divide d = {}", self.heads, self.dim()));
        }
        if self.ln_eps <= 0.0 || !self.ln_eps.is_finite() {
            return bad(format!("layer-norm epsilon {} must be positive", self.ln_eps));
        }
        if self.tail == TailKind::PixelShuffle && !(2..=4).contains(&self.scale) {
            return bad(format!("scale {} not in {{2, 3, 4}}", self.scale));
        }
        if self.use_positional_embedding
            && (self.pe_canvas.iter().any(|&s| s == 0 || s % self.token != 0))
        {
            return bad(format!(
                "positional-embedding canvas {:?} not divisible by token size {}",
                self.pe_canvas, self.token
            ));
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds the TOML integer range", self.seed));
        }
        self.csta().validate(self.channels)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| ActError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First field in which `found` differs from `self`.
    pub fn check_matches(&self, found: &ModelConfig) -> Result<()> {
        let table = |c: &ModelConfig| match toml::Value::try_from(c).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        };
        let (expected, actual) = (table(self), table(found));
        for (key, value) in &expected {
            let other = actual.get(key);
            if other != Some(value) {
                return Err(ActError::ConfigMismatch {
                    field: key.clone(),
                    expected: value.to_string(),
                    found: other.map_or_else(|| "<missing>".into(), |v| v.to_string()),
                });
            }
        }
        Ok(())
    }
}
