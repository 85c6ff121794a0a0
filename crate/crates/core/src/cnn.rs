//! Convolutional branch: residual channel attention blocks grouped into CNN
//! blocks, each closed by a 3x3 convolution and a block-level skip.

use crate::error::{ActError, Result};
use crate::nn::{Binding, Builder, Conv2d};
use crate::tensor::Var;

/// Default squeeze ratio of the channel-attention gate.
pub const DEFAULT_REDUCTION: usize = 16;

/// `F + gate(r) * r` with `r = conv2(relu(conv1(F)))` and
/// `gate = sigmoid(up(relu(down(avgpool(r)))))`.
#[derive(Clone, Debug)]
pub struct Rcab {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub ca_down: Conv2d,
    pub ca_up: Conv2d,
}

impl Rcab {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(ActError::Config(format!(
                "channel-attention reduction {reduction} does not divide {channels} channels"
            )));
        }
        let mut b = b.sub(name);
        let squeezed = channels / reduction;
        Ok(Rcab {
            conv1: Conv2d::new(&mut b, "conv1", channels, channels, 3)?,
            conv2: Conv2d::new(&mut b, "conv2", channels, channels, 3)?,
            ca_down: Conv2d::new(&mut b, "ca_down", channels, squeezed, 1)?,
            ca_up: Conv2d::new(&mut b, "ca_up", squeezed, channels, 1)?,
        })
    }

    /// Per-channel gate for a residual map `r`, in (0, 1).
    pub fn gate(&self, p: &Binding, r: &Var) -> Result<Var> {
        let c = r.shape()[0];
        let pooled = r.global_avg_pool()?.reshape(&[c, 1, 1])?;
        let squeezed = self.ca_down.forward(p, &pooled)?.relu()?;
        self.ca_up.forward(p, &squeezed)?.sigmoid()?.reshape(&[c])
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        let r = self.conv2.forward(p, &self.conv1.forward(p, x)?.relu()?)?;
        let gate = self.gate(p, &r)?;
        x.add(&r.scale_channels(&gate)?)
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let squeezed = channels / reduction;
        2 * Conv2d::param_count(channels, channels, 3)
            + Conv2d::param_count(channels, squeezed, 1)
            + Conv2d::param_count(squeezed, channels, 1)
    }
}

#[derive(Clone, Debug)]
pub struct CnnBlock {
    pub rcabs: Vec<Rcab>,
    pub conv: Conv2d,
}

impl CnnBlock {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        rcabs: usize,
        reduction: usize,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let rcabs = (0..rcabs)
            .map(|i| Rcab::new(&mut b, &format!("rcab{i}"), channels, reduction))
            .collect::<Result<_>>()?;
        Ok(CnnBlock {
            rcabs,
            conv: Conv2d::new(&mut b, "conv", channels, channels, 3)?,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        let mut y = x.clone();
        for rcab in &self.rcabs {
            y = rcab.forward(p, &y)?;
        }
        x.add(&self.conv.forward(p, &y)?)
    }

    pub fn param_count(channels: usize, rcabs: usize, reduction: usize) -> usize {
        rcabs * Rcab::param_count(channels, reduction) + Conv2d::param_count(channels, channels, 3)
    }
}
