//! Named parameters and the handful of primitive layers the network uses.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ActError, Result};
use crate::tensor::{Tensor, Var};

/// Standard deviation of the truncated-normal init for linear weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Parameters in registration order, addressable by id or hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(ActError::Config(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Lifts every parameter into a graph. With `track` off the values are
    /// plain constants and no gradients are recorded.
    pub fn bind(&self, track: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if track && p.trainable {
                    Var::param(p.tensor.clone(), i)
                } else {
                    Var::constant(p.tensor.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Graph handles for one forward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Registers parameters under a name prefix and draws their initial values.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn add(&mut self, leaf: &str, tensor: Tensor) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.add(name, tensor)
    }

    pub fn truncated_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("positive std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }
}

/// Seeded generator used for all initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Affine map over the last axis. The weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let w = b.truncated_normal(&[in_dim, out_dim], LINEAR_INIT_STD);
        Ok(Linear {
            weight: b.add("weight", w)?,
            bias: b.add("bias", Tensor::zeros(&[out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        x.matmul(p.get(self.weight))?.add_row_bias(p.get(self.bias))
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// Same-size convolution, weight `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Weights uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn new(b: &mut Builder<'_>, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = b.uniform(&[out_ch, in_ch, kernel, kernel], bound);
        Ok(Conv2d {
            weight: b.add("weight", w)?,
            bias: b.add("bias", Tensor::zeros(&[out_ch]))?,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        x.conv2d(p.get(self.weight), Some(p.get(self.bias)))
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(LayerNorm {
            gamma: b.add("gamma", Tensor::full(&[dim], 1.0))?,
            beta: b.add("beta", Tensor::zeros(&[dim]))?,
            eps,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), self.eps)
    }
}
