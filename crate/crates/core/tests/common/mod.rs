//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use act_core::attention::{attend, Csta, CstaConfig, Ffn, Mhsa, TransformerBlock};
use act_core::cnn::{CnnBlock, Rcab};
use act_core::fusion::{FusionBlock, FusionDirection, FusionMode, FusionOutput, Lateral};
use act_core::gradcheck::{check_fn, check_model, check_store, GradCheckConfig, GradCheckReport};
use act_core::model::{ActModel, ModelConfig};
use act_core::nn::{init_rng, Builder, Conv2d, LayerNorm, Linear, ParamStore};
use act_core::tokenization::{rearrange_to_image, tokenize};
use act_core::{Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Builds a module into a fresh store initialized from `seed`.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> Result<T>) -> (ParamStore, T) {
    let mut store = ParamStore::default();
    let mut r = init_rng(seed);
    let module = f(&mut Builder::new(&mut store, &mut r)).expect("module builds");
    (store, module)
}

/// Flattens every part of a fusion output into one vector.
pub fn flatten_fusion(out: FusionOutput) -> Result<Var> {
    let parts: Vec<Var> = match out {
        FusionOutput::Fused(v) => vec![v],
        FusionOutput::Deltas { tokens, features } => tokens.into_iter().chain(features).collect(),
    };
    let flat = parts
        .iter()
        .map(|v| v.reshape(&[v.value().numel()]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&flat, 0)
}

pub const FUSION_MODES: [(FusionDirection, Lateral); 5] = [
    (FusionDirection::Bidirectional, Lateral::Concat),
    (FusionDirection::TToC, Lateral::Concat),
    (FusionDirection::CToT, Lateral::Concat),
    (FusionDirection::Bidirectional, Lateral::Sum),
    (FusionDirection::TToC, Lateral::Sum),
];

/// Gradient checks of every layer type on small random shapes. Returns the
/// report of each named case.
pub fn layer_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let mut r = rng(seed.wrapping_add(1000));
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut push = |name: &str, report: Result<GradCheckReport>| {
        out.push((name.to_string(), report.unwrap_or_else(|e| panic!("{name}: {e}"))));
    };

    let x = uniform(&[4, 5], -1.0, 1.0, &mut r);
    let (s, lin) = build(seed, |b| Linear::new(b, "lin", 5, 3));
    push("linear", check_store(&s, &x, |p, v| lin.forward(p, v), &cfg));

    let img = uniform(&[2, 5, 4], -1.0, 1.0, &mut r);
    let (s, conv) = build(seed, |b| Conv2d::new(b, "conv", 2, 3, 3));
    push("conv3x3", check_store(&s, &img, |p, v| conv.forward(p, v), &cfg));
    let (s, conv) = build(seed, |b| Conv2d::new(b, "conv", 2, 3, 1));
    push("conv1x1", check_store(&s, &img, |p, v| conv.forward(p, v), &cfg));

    let (s, ln) = build(seed, |b| LayerNorm::new(b, "ln", 5, 1e-5));
    push("layer_norm", check_store(&s, &x, |p, v| ln.forward(p, v), &cfg));

    push("gelu", check_fn(&[("x", uniform(&[3, 4], -3.0, 3.0, &mut r))], |v| v[0].gelu(), &cfg));
    push("softmax", check_fn(&[("x", uniform(&[3, 4], -3.0, 3.0, &mut r))], |v| v[0].softmax_last(), &cfg));
    push("relu", check_fn(&[("x", uniform(&[3, 4], -1.0, 1.0, &mut r))], |v| v[0].relu(), &cfg));
    push("sigmoid", check_fn(&[("x", uniform(&[3, 4], -3.0, 3.0, &mut r))], |v| v[0].sigmoid(), &cfg));
    push(
        "matmul",
        check_fn(
            &[("a", uniform(&[3, 4], -1.0, 1.0, &mut r)), ("b", uniform(&[4, 2], -1.0, 1.0, &mut r))],
            |v| v[0].matmul(&v[1]),
            &cfg,
        ),
    );
    push(
        "attention_core",
        check_fn(
            &[
                ("q", uniform(&[3, 4], -1.0, 1.0, &mut r)),
                ("k", uniform(&[5, 4], -1.0, 1.0, &mut r)),
                ("v", uniform(&[5, 4], -1.0, 1.0, &mut r)),
            ],
            |v| attend(&v[0], &v[1], &v[2], 2),
            &cfg,
        ),
    );
    push(
        "unfold_fold",
        check_fn(
            &[("x", uniform(&[2, 5, 6], -1.0, 1.0, &mut r))],
            |v| v[0].unfold(3, 2)?.scale(1.5)?.fold(2, 5, 6, 3, 2),
            &cfg,
        ),
    );
    push(
        "pixel_shuffle",
        check_fn(&[("x", uniform(&[8, 2, 3], -1.0, 1.0, &mut r))], |v| v[0].pixel_shuffle(2), &cfg),
    );

    // Token layers see a [c, h, w] map that is tokenized and folded back.
    let feat = uniform(&[4, 6, 6], -1.0, 1.0, &mut r);
    let (s, mhsa) = build(seed, |b| Mhsa::new(b, "mhsa", 16, 2));
    push(
        "mhsa",
        check_store(&s, &feat, |p, v| rearrange_to_image(&mhsa.forward(p, &tokenize(v, 2)?)?), &cfg),
    );
    let csta_cfg = CstaConfig::two_scale(2, 4, 2, 2);
    let (s, csta) = build(seed, |b| Csta::new(b, "csta", 4, &csta_cfg));
    push(
        "csta",
        check_store(&s, &feat, |p, v| rearrange_to_image(&csta.forward(p, &tokenize(v, 2)?)?), &cfg),
    );
    let three = CstaConfig { token: 1, scales: vec![1, 2, 3], stride: 2, heads: 1 };
    let (s, csta3) = build(seed, |b| Csta::new(b, "csta3", 4, &three));
    push(
        "csta_three_scale",
        check_store(&s, &feat, |p, v| rearrange_to_image(&csta3.forward(p, &tokenize(v, 1)?)?), &cfg),
    );
    let tokens = uniform(&[5, 6], -1.0, 1.0, &mut r);
    let (s, ffn) = build(seed, |b| Ffn::new(b, "ffn", 6, 2));
    push("ffn", check_store(&s, &tokens, |p, v| ffn.forward(p, v), &cfg));

    let mut tcfg = ModelConfig::toy().transformer();
    tcfg.channels = 4;
    tcfg.csta = CstaConfig::two_scale(2, 4, 2, 2);
    let (s, block) = build(seed, |b| TransformerBlock::new(b, "tb", &tcfg));
    push(
        "transformer_block",
        check_store(&s, &feat, |p, v| rearrange_to_image(&block.forward(p, &tokenize(v, 2)?)?), &cfg),
    );

    let (s, rcab) = build(seed, |b| Rcab::new(b, "rcab", 4, 2));
    push("rcab", check_store(&s, &feat, |p, v| rcab.forward(p, v), &cfg));
    let (s, cnn) = build(seed, |b| CnnBlock::new(b, "cnn", 4, 2, 2));
    push("cnn_block", check_store(&s, &feat, |p, v| cnn.forward(p, v), &cfg));

    // Fusion input: the first half of the channels becomes tokens, the
    // second half the CNN features.
    let joint = uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    let mut fusion_cases: Vec<(String, FusionMode, bool)> = FUSION_MODES
        .iter()
        .map(|&(direction, lateral)| {
            (format!("fusion_{direction:?}_{lateral:?}"), FusionMode { direction, lateral }, false)
        })
        .collect();
    fusion_cases.push(("fusion_last".into(), FusionMode::default(), true));
    fusion_cases.push((
        "fusion_none_last".into(),
        FusionMode { direction: FusionDirection::None, lateral: Lateral::Concat },
        true,
    ));
    for (name, mode, last) in fusion_cases {
        let (s, fusion) = build(seed, |b| FusionBlock::new(b, "fusion", 2, 2, 2, 1, mode, last));
        push(
            &name,
            check_store(
                &s,
                &joint,
                |p, v| {
                    let grid = tokenize(&v.narrow(0, 0, 2)?, 2)?;
                    flatten_fusion(fusion.forward(p, &grid, &v.narrow(0, 2, 2)?)?)
                },
                &cfg,
            ),
        );
    }

    let model = ActModel::new(ModelConfig { seed, ..ModelConfig::toy() }).expect("toy model");
    let sampled = GradCheckConfig { per_tensor: Some(4), ..cfg.clone() };
    let small = uniform(&[3, 4, 5], 0.0, 1.0, &mut r);
    push("head", check_store(model.params(), &small, |p, v| model.head.forward(p, v), &sampled));
    let hidden = uniform(&[8, 3, 4], -1.0, 1.0, &mut r);
    push("tail", check_store(model.params(), &hidden, |p, v| model.tail.forward(p, v), &sampled));
    out
}

/// Gradient check of the full toy model on a 12x12 input.
pub fn full_model_check(seed: u64) -> GradCheckReport {
    let model = ActModel::new(ModelConfig { seed, ..ModelConfig::toy() }).expect("toy model");
    let input = uniform(&[3, 12, 12], 0.0, 1.0, &mut rng(seed.wrapping_add(77)));
    let cfg = GradCheckConfig { per_tensor: Some(3), seed, ..GradCheckConfig::default() };
    check_model(&model, &input, &cfg).expect("full model check")
}

/// Smooth synthetic image in `[0.15, 0.85]`.
pub fn smooth_patch(channels: usize, height: usize, width: usize, phase: f64) -> Tensor {
    Tensor::from_fn(&[channels, height, width], |i| {
        let c = (i / (height * width)) as f64;
        let y = ((i / width) % height) as f64;
        let x = (i % width) as f64;
        0.5 + 0.35 * ((x * 0.45 + phase * 1.7 + c).sin() * (y * 0.3 - phase).cos())
    })
}
