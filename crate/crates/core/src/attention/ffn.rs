use crate::error::Result;
use crate::nn::{Binding, Builder, Linear};
use crate::tensor::Var;

/// Token-wise two-layer MLP: `d -> ratio * d`, GELU, `ratio * d -> d`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// The fusion block's token-side return path uses the same two-layer shape.
pub type MlpBlock = Ffn;

impl Ffn {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Ffn {
            fc1: Linear::new(&mut b, "fc1", dim, ratio * dim)?,
            fc2: Linear::new(&mut b, "fc2", ratio * dim, dim)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu()?)
    }

    pub fn param_count(dim: usize, ratio: usize) -> usize {
        Linear::param_count(dim, ratio * dim) + Linear::param_count(ratio * dim, dim)
    }
}
