//! Fusion blocks between the transformer and CNN branches.
//!
//! The rearranged token features and the CNN features are joined laterally
//! (channel concatenation, or elementwise sum), mixed by a stack of 1x1
//! residual blocks, and then either sent back to the branches as additive
//! deltas (every block but the last) or reduced to `c` channels by a 3x3
//! convolution (the last block).
//!
//! Return paths: the token side tokenizes its half and runs a two-layer MLP,
//! the CNN side runs a 3x3 convolution. Bidirectional fusion splits the
//! mixed features channel-wise between the two paths (with summation both
//! paths read the whole `c`-wide map). Unidirectional fusion first reduces the
//! mixed features to `c` channels with a 1x1 convolution, after the residual
//! stack, and feeds only the receiving branch.

use serde::{Deserialize, Serialize};

use crate::attention::MlpBlock;
use crate::error::{ActError, Result};
use crate::nn::{Binding, Builder, Conv2d};
use crate::tensor::Var;
use crate::tokenization::{rearrange_to_image, tokenize, TokenGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionDirection {
    /// Branches stay separate until their outputs are joined before the tail.
    None,
    TToC,
    CToT,
    #[default]
    Bidirectional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lateral {
    #[default]
    Concat,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionMode {
    pub direction: FusionDirection,
    pub lateral: Lateral,
}

impl FusionMode {
    /// Channel width after the lateral join.
    pub fn width(&self, channels: usize) -> usize {
        match self.lateral {
            Lateral::Concat => 2 * channels,
            Lateral::Sum => channels,
        }
    }
}

/// `x + conv_b(relu(conv_a(x)))` with 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock1x1 {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

impl ResBlock1x1 {
    fn new(b: &mut Builder<'_>, name: &str, width: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(ResBlock1x1 {
            conv_a: Conv2d::new(&mut b, "conv_a", width, width, 1)?,
            conv_b: Conv2d::new(&mut b, "conv_b", width, width, 1)?,
        })
    }

    fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        x.add(&self.conv_b.forward(p, &self.conv_a.forward(p, x)?.relu()?)?)
    }
}

#[derive(Clone, Debug)]
pub enum FusionExit {
    /// Bidirectional: token half through the MLP, feature half through a conv.
    Split { mlp: MlpBlock, conv: Conv2d },
    /// Transformer-to-CNN only.
    ToCnn { reduce: Option<Conv2d>, conv: Conv2d },
    /// CNN-to-transformer only.
    ToTransformer { reduce: Option<Conv2d>, mlp: MlpBlock },
    /// Last block: 3x3 convolution down to `c` channels.
    Final { conv: Conv2d },
}

/// What a fusion block hands back to the body.
#[derive(Debug)]
pub enum FusionOutput {
    /// Additive updates for the token grid and the CNN features.
    Deltas {
        tokens: Option<Var>,
        features: Option<Var>,
    },
    /// The fused `c`-channel map of the last block.
    Fused(Var),
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub mode: FusionMode,
    pub channels: usize,
    pub token: usize,
    pub residual: Vec<ResBlock1x1>,
    pub exit: FusionExit,
}

impl FusionBlock {
    /// A fusion block. `last` selects the reducing exit. With direction
    /// `None` only a last block exists and it has no residual stack.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        token: usize,
        mlp_ratio: usize,
        residual_blocks: usize,
        mode: FusionMode,
        last: bool,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let width = mode.width(channels);
        let stack = if mode.direction == FusionDirection::None {
            if !last {
                return Err(ActError::Config(
                    "fusion direction `none` has no intermediate fusion blocks".into(),
                ));
            }
            0
        } else {
            residual_blocks
        };
        let residual = (0..stack)
            .map(|i| ResBlock1x1::new(&mut b, &format!("res{i}"), width))
            .collect::<Result<Vec<_>>>()?;
        let dim = channels * token * token;
        let reduce = |b: &mut Builder<'_>| -> Result<Option<Conv2d>> {
            (width != channels)
                .then(|| Conv2d::new(b, "reduce", width, channels, 1))
                .transpose()
        };
        let exit = if last {
            FusionExit::Final {
                conv: Conv2d::new(&mut b, "out", width, channels, 3)?,
            }
        } else {
            match mode.direction {
                FusionDirection::Bidirectional => FusionExit::Split {
                    mlp: MlpBlock::new(&mut b, "mlp", dim, mlp_ratio)?,
                    conv: Conv2d::new(&mut b, "conv", channels, channels, 3)?,
                },
                FusionDirection::TToC => FusionExit::ToCnn {
                    reduce: reduce(&mut b)?,
                    conv: Conv2d::new(&mut b, "conv", channels, channels, 3)?,
                },
                FusionDirection::CToT => FusionExit::ToTransformer {
                    reduce: reduce(&mut b)?,
                    mlp: MlpBlock::new(&mut b, "mlp", dim, mlp_ratio)?,
                },
                FusionDirection::None => unreachable!("rejected above"),
            }
        };
        Ok(FusionBlock {
            mode,
            channels,
            token,
            residual,
            exit,
        })
    }

    /// Joins the rearranged tokens and the CNN features laterally.
    pub fn join(&self, tokens: &TokenGrid, features: &Var) -> Result<Var> {
        let image = rearrange_to_image(tokens)?;
        if image.shape() != features.shape() || features.shape()[0] != self.channels {
            return Err(ActError::Geometry(format!(
                "cannot fuse rearranged tokens {:?} with features {:?}",
                image.shape(),
                features.shape()
            )));
        }
        match self.mode.lateral {
            Lateral::Concat => Var::concat(&[image, features.clone()], 0),
            Lateral::Sum => image.add(features),
        }
    }

    pub fn forward(&self, p: &Binding, tokens: &TokenGrid, features: &Var) -> Result<FusionOutput> {
        let mut m = self.join(tokens, features)?;
        for block in &self.residual {
            m = block.forward(p, &m)?;
        }
        let c = self.channels;
        let to_tokens = |mlp: &MlpBlock, map: &Var| -> Result<Var> {
            mlp.forward(p, &tokenize(map, self.token)?.tokens)
        };
        let reduced = |reduce: &Option<Conv2d>| -> Result<Var> {
            match reduce {
                Some(conv) => conv.forward(p, &m),
                None => Ok(m.clone()),
            }
        };
        Ok(match &self.exit {
            FusionExit::Final { conv } => FusionOutput::Fused(conv.forward(p, &m)?),
            FusionExit::Split { mlp, conv } => {
                let (mt, mf) = match self.mode.lateral {
                    Lateral::Concat => (m.narrow(0, 0, c)?, m.narrow(0, c, c)?),
                    Lateral::Sum => (m.clone(), m.clone()),
                };
                FusionOutput::Deltas {
                    tokens: Some(to_tokens(mlp, &mt)?),
                    features: Some(conv.forward(p, &mf)?),
                }
            }
            FusionExit::ToCnn { reduce, conv } => FusionOutput::Deltas {
                tokens: None,
                features: Some(conv.forward(p, &reduced(reduce)?)?),
            },
            FusionExit::ToTransformer { reduce, mlp } => FusionOutput::Deltas {
                tokens: Some(to_tokens(mlp, &reduced(reduce)?)?),
                features: None,
            },
        })
    }

    pub fn param_count(
        channels: usize,
        token: usize,
        mlp_ratio: usize,
        residual_blocks: usize,
        mode: FusionMode,
        last: bool,
    ) -> usize {
        let width = mode.width(channels);
        let dim = channels * token * token;
        let stack = if mode.direction == FusionDirection::None {
            0
        } else {
            residual_blocks * 2 * Conv2d::param_count(width, width, 1)
        };
        let reduce = if width != channels {
            Conv2d::param_count(width, channels, 1)
        } else {
            0
        };
        let conv3 = Conv2d::param_count(channels, channels, 3);
        let mlp = MlpBlock::param_count(dim, mlp_ratio);
        stack
            + if last {
                Conv2d::param_count(width, channels, 3)
            } else {
                match mode.direction {
                    FusionDirection::Bidirectional => mlp + conv3,
                    FusionDirection::TToC => reduce + conv3,
                    FusionDirection::CToT => reduce + mlp,
                    FusionDirection::None => 0,
                }
            }
    }
}
