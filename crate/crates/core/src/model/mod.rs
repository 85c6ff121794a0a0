//! The full network: head, paired-branch body with fusion, and tail.

mod config;
mod io;

pub use config::{ModelConfig, TailKind};
pub use io::{load_weights, save_weights, WEIGHT_FORMAT_VERSION, WEIGHT_MAGIC};

use crate::attention::TransformerBlock;
use crate::cnn::CnnBlock;
use crate::error::{ActError, Result};
use crate::fusion::{FusionBlock, FusionDirection, FusionOutput};
use crate::nn::{init_rng, Binding, Builder, Conv2d, ParamId, ParamStore, LINEAR_INIT_STD};
use crate::tensor::{Tensor, Var};
use crate::tokenization::{rearrange_to_image, tokenize};

/// `x + conv_b(relu(conv_a(x)))` with 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResConvBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

impl ResConvBlock {
    fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(ResConvBlock {
            conv_a: Conv2d::new(&mut b, "conv_a", channels, channels, 3)?,
            conv_b: Conv2d::new(&mut b, "conv_b", channels, channels, 3)?,
        })
    }

    fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        x.add(&self.conv_b.forward(p, &self.conv_a.forward(p, x)?.relu()?)?)
    }
}

/// RGB to `c` channels, then two residual convolution blocks.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv2d,
    pub blocks: [ResConvBlock; 2],
}

impl Head {
    fn new(b: &mut Builder<'_>, channels: usize) -> Result<Self> {
        let mut b = b.sub("head");
        Ok(Head {
            conv: Conv2d::new(&mut b, "conv", 3, channels, 3)?,
            blocks: [
                ResConvBlock::new(&mut b, "res0", channels)?,
                ResConvBlock::new(&mut b, "res1", channels)?,
            ],
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        let mut f = self.conv.forward(p, x)?;
        for block in &self.blocks {
            f = block.forward(p, &f)?;
        }
        Ok(f)
    }
}

/// One body stage: a transformer block, a CNN block and the fusion block
/// that follows them.
#[derive(Clone, Debug)]
pub struct Stage {
    pub transformer: TransformerBlock,
    pub cnn: CnnBlock,
    /// `None` for intermediate stages when fusion is disabled.
    pub fusion: Option<FusionBlock>,
}

#[derive(Clone, Debug)]
pub struct Body {
    pub positional: Option<ParamId>,
    pub stages: Vec<Stage>,
}

/// Per-stage feature maps recorded by [`ActModel::forward_traced`].
#[derive(Clone, Debug)]
pub struct StageTrace {
    /// Transformer tokens rearranged to `[c, h, w]`, after fusion updates.
    pub transformer: Tensor,
    /// CNN features after fusion updates.
    pub cnn: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct BodyTrace {
    pub stages: Vec<StageTrace>,
    /// Output of the last fusion block, before the global residual.
    pub fused: Option<Tensor>,
}

impl Body {
    fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("body");
        let positional = if cfg.use_positional_embedding {
            let pe = b.truncated_normal(&[cfg.pe_tokens(), cfg.dim()], LINEAR_INIT_STD);
            Some(b.add("pos_embed", pe)?)
        } else {
            None
        };
        let tcfg = cfg.transformer();
        let mut stages = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut sb = b.sub(&format!("stage{i}"));
            let last = i + 1 == cfg.blocks;
            let transformer = TransformerBlock::new(&mut sb, "transformer", &tcfg)?;
            let cnn = CnnBlock::new(&mut sb, "cnn", cfg.channels, cfg.rcabs_per_block, cfg.ca_reduction)?;
            let fusion = (last || cfg.fusion.direction != FusionDirection::None)
                .then(|| {
                    FusionBlock::new(
                        &mut sb,
                        "fusion",
                        cfg.channels,
                        cfg.token,
                        cfg.ffn_ratio,
                        cfg.fusion_residual_blocks,
                        cfg.fusion,
                        last,
                    )
                })
                .transpose()?;
            stages.push(Stage { transformer, cnn, fusion });
        }
        Ok(Body { positional, stages })
    }

    fn forward(&self, p: &Binding, cfg: &ModelConfig, f0: &Var, mut trace: Option<&mut BodyTrace>) -> Result<Var> {
        let mut tokens = tokenize(f0, cfg.token)?;
        if let Some(pe) = self.positional {
            let pe = p.get(pe);
            if pe.shape()[0] != tokens.count() {
                return Err(ActError::Geometry(format!(
                    "positional embedding sized for {} tokens ({}x{} canvas) but input gives {}",
                    pe.shape()[0],
                    cfg.pe_canvas[0],
                    cfg.pe_canvas[1],
                    tokens.count()
                )));
            }
            tokens = tokens.with_tokens(tokens.tokens.add(pe)?)?;
        }
        let mut features = f0.clone();
        let mut fused = None;
        for stage in &self.stages {
            tokens = stage.transformer.forward(p, &tokens)?;
            features = stage.cnn.forward(p, &features)?;
            match stage.fusion.as_ref().map(|f| f.forward(p, &tokens, &features)).transpose()? {
                Some(FusionOutput::Deltas { tokens: dt, features: df }) => {
                    if let Some(dt) = dt {
                        tokens = tokens.with_tokens(tokens.tokens.add(&dt)?)?;
                    }
                    if let Some(df) = df {
                        features = features.add(&df)?;
                    }
                }
                Some(FusionOutput::Fused(m)) => fused = Some(m),
                None => {}
            }
            if let Some(trace) = trace.as_deref_mut() {
                trace.stages.push(StageTrace {
                    transformer: rearrange_to_image(&tokens)?.value().clone(),
                    cnn: features.value().clone(),
                });
            }
        }
        let fused = fused.ok_or_else(|| ActError::Config("body has no final fusion block".into()))?;
        if let Some(trace) = trace {
            trace.fused = Some(fused.value().clone());
        }
        fused.add(f0)
    }
}

/// Upsampler stages followed by a 3x3 convolution to RGB.
#[derive(Clone, Debug)]
pub struct Tail {
    /// `(expanding conv, shuffle factor)` per upsampling stage.
    pub upsample: Vec<(Conv2d, usize)>,
    pub out: Conv2d,
}

impl Tail {
    fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("tail");
        let c = cfg.channels;
        let factors: Vec<usize> = match (cfg.tail, cfg.scale) {
            (TailKind::Restoration, _) => vec![],
            (TailKind::PixelShuffle, 4) => vec![2, 2],
            (TailKind::PixelShuffle, s) => vec![s],
        };
        let upsample = factors
            .into_iter()
            .enumerate()
            .map(|(i, s)| Ok((Conv2d::new(&mut b, &format!("up{i}"), c, c * s * s, 3)?, s)))
            .collect::<Result<_>>()?;
        Ok(Tail {
            upsample,
            out: Conv2d::new(&mut b, "out", c, 3, 3)?,
        })
    }

    pub fn forward(&self, p: &Binding, x: &Var) -> Result<Var> {
        let mut f = x.clone();
        for (conv, s) in &self.upsample {
            f = conv.forward(p, &f)?.pixel_shuffle(*s)?;
        }
        self.out.forward(p, &f)
    }
}

/// The network plus its parameters. Immutable once built; `forward` can be
/// called from several threads at once.
#[derive(Clone, Debug)]
pub struct ActModel {
    config: ModelConfig,
    store: ParamStore,
    pub head: Head,
    pub body: Body,
    pub tail: Tail,
}

impl ActModel {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = init_rng(config.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let head = Head::new(&mut b, config.channels)?;
        let body = Body::new(&mut b, &config)?;
        let tail = Tail::new(&mut b, &config)?;
        Ok(ActModel {
            config,
            store,
            head,
            body,
            tail,
        })
    }

    /// A model whose output is the nearest-neighbour upscaled input (the
    /// input itself for the restoration tail). The head copies RGB into the
    /// first three channels, every residual branch and the body are zero, and
    /// the tail replicates those channels before the pixel shuffle. Useful as
    /// an exactly equivariant reference.
    pub fn identity_stub(config: ModelConfig) -> Result<Self> {
        if config.channels < 3 {
            return Err(ActError::Config("identity stub needs at least 3 channels".into()));
        }
        let mut model = ActModel::new(config)?;
        model.store.zero_prefix("");
        let centre = |store: &mut ParamStore, conv: &Conv2d, pairs: &[(usize, usize)]| {
            let k = conv.kernel;
            let w = store.tensor_mut(conv.weight).data_mut();
            for &(o, i) in pairs {
                w[((o * conv.in_ch + i) * k + k / 2) * k + k / 2] = 1.0;
            }
        };
        let rgb: Vec<_> = (0..3).map(|c| (c, c)).collect();
        centre(&mut model.store, &model.head.conv, &rgb);
        for (conv, s) in &model.tail.upsample {
            let fan: Vec<_> = (0..3).flat_map(|c| (0..s * s).map(move |j| (c * s * s + j, c))).collect();
            centre(&mut model.store, conv, &fan);
        }
        centre(&mut model.store, &model.tail.out, &rgb);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Checks that a `[3, h, w]` input can go through the network unpadded.
    pub fn check_canvas(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let [3, h, w] = *shape else {
            return Err(ActError::Geometry(format!("expected a [3, h, w] image, got {shape:?}")));
        };
        let t_large = cfg.large_token();
        if h < t_large || w < t_large {
            return Err(ActError::Geometry(format!(
                "{h}x{w} input is smaller than the large token size {t_large}"
            )));
        }
        if h % cfg.token != 0 || w % cfg.token != 0 {
            return Err(ActError::Geometry(format!(
                "token size {} does not divide {h}x{w}",
                cfg.token
            )));
        }
        cfg.csta().validate_canvas(h, w)?;
        if self.body.positional.is_some() && (cfg.pe_canvas != [h, w]) {
            return Err(ActError::Geometry(format!(
                "positional embedding only supports a {}x{} canvas, got {h}x{w}",
                cfg.pe_canvas[0], cfg.pe_canvas[1]
            )));
        }
        Ok(())
    }

    /// Head features `F_0` of an unpadded input.
    pub fn head_features(&self, p: &Binding, x: &Var) -> Result<Var> {
        self.check_canvas(x.shape())?;
        self.head.forward(p, x)
    }

    /// Graph-level forward on an input whose extents are already legal.
    pub fn forward_var(&self, p: &Binding, x: &Var) -> Result<Var> {
        let f0 = self.head_features(p, x)?;
        let deep = self.body.forward(p, &self.config, &f0, None)?;
        self.tail.forward(p, &deep)
    }

    /// Inference on any `[3, h, w]` image: reflection-pad to a legal canvas,
    /// run the network, crop to `scale * h x scale * w`.
    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(lr, false)?.0)
    }

    /// Like [`ActModel::forward`], also returning the per-stage body features
    /// (on the padded canvas).
    pub fn forward_traced(&self, lr: &Tensor) -> Result<(Tensor, BodyTrace)> {
        self.forward_impl(lr, true)
    }

    fn forward_impl(&self, lr: &Tensor, traced: bool) -> Result<(Tensor, BodyTrace)> {
        let [3, h, w] = *lr.shape() else {
            return Err(ActError::Geometry(format!(
                "expected a [3, h, w] image, got {:?}",
                lr.shape()
            )));
        };
        let (ph, pw) = (self.config.padded_extent(h), self.config.padded_extent(w));
        let padded = reflect_pad(lr, ph, pw);
        let p = self.store.bind(false);
        let x = Var::constant(padded);
        let f0 = self.head_features(&p, &x)?;
        let mut trace = BodyTrace::default();
        let deep = self.body.forward(&p, &self.config, &f0, traced.then_some(&mut trace))?;
        let out = self.tail.forward(&p, &deep)?;
        let s = self.config.output_scale();
        Ok((crop(out.value(), h * s, w * s), trace))
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Reflection padding on the bottom and right of a `[c, h, w]` tensor,
/// mirrored periodically when the pad exceeds the extent.
pub fn reflect_pad(x: &Tensor, height: usize, width: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (height, width) {
        return x.clone();
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let sy = reflect_index(y as isize, h);
            for xx in 0..width {
                out.push(d[(ch * h + sy) * w + reflect_index(xx as isize, w)]);
            }
        }
    }
    Tensor::new(vec![c, height, width], out).expect("non-empty pad")
}

/// Top-left `[c, height, width]` window of a `[c, h, w]` tensor.
pub fn crop(x: &Tensor, height: usize, width: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (height, width) {
        return x.clone();
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row..row + width]);
        }
    }
    Tensor::new(vec![c, height, width], out).expect("non-empty crop")
}
