mod common;

use act_core::attention::{attention_weights, Csta, CstaConfig};
use act_core::model::{crop, load_weights, reflect_pad, save_weights, ActModel, ModelConfig};
use act_core::tokenization::{rearrange_to_image, retokenize_overlap, token_count, tokenize};
use act_core::train::{bicubic_downscale, dihedral, inverse_code};
use act_core::{Tensor, Var};
use common::{build, rng, uniform};
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    uniform(&[c, h, w], -1.0, 1.0, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenize_round_trips(c in 1usize..5, t in 1usize..5, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let x = Var::constant(image(c, t * rows, t * cols, seed));
        let grid = tokenize(&x, t).unwrap();
        prop_assert_eq!(grid.count(), rows * cols);
        prop_assert_eq!(grid.dim(), c * t * t);
        prop_assert_eq!(rearrange_to_image(&grid).unwrap().value().clone(), x.value().clone());
    }

    #[test]
    fn overlapping_counts_follow_formula(t in 1usize..4, extra in 1usize..4, stride in 1usize..6, rows in 2usize..7, cols in 2usize..7) {
        let large = t + extra;
        let (h, w) = (t * rows, t * cols);
        prop_assume!(large <= h && large <= w);
        let grid = tokenize(&Var::constant(Tensor::zeros(&[2, h, w])), t).unwrap();
        let big = retokenize_overlap(&grid, large, stride).unwrap();
        prop_assert_eq!(big.count(), ((h - large) / stride + 1) * ((w - large) / stride + 1));
        prop_assert_eq!(big.count(), token_count(h, w, large, stride));
        prop_assert_eq!(big.dim(), 2 * large * large);
    }

    #[test]
    fn overlapping_fold_counts_coverage(k in 1usize..4, s in 1usize..4, h in 4usize..9, w in 4usize..9) {
        prop_assume!(k <= h && k <= w);
        let ones = Var::constant(Tensor::full(&[1, h, w], 1.0));
        let cover = ones.unfold(k, s).unwrap().fold(1, h, w, k, s).unwrap();
        let direct: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let hits = |p: usize, n: usize| (0..=(n - k) / s).filter(|&j| j * s <= p && p < j * s + k).count();
                (hits(y, h) * hits(x, w)) as f64
            })
            .collect();
        prop_assert_eq!(cover.data(), direct.as_slice());
    }

    #[test]
    fn csta_preserves_grid(t in 1usize..3, extra in 1usize..3, stride in 1usize..4, pieces_mul in 1usize..3, rows in 2usize..6, cols in 2usize..6, seed in any::<u64>()) {
        let large = t + extra;
        let channels = 2 * pieces_mul;
        let (h, w) = (t * rows, t * cols);
        let cfg = CstaConfig::two_scale(t, large, stride, 1);
        prop_assume!(cfg.validate_canvas(h, w).is_ok());
        let grid = tokenize(&Var::constant(image(channels, h, w, seed)), t).unwrap();
        let (store, csta) = build(seed, |b| Csta::new(b, "c", channels, &cfg));
        let out = csta.forward(&store.bind(false), &grid).unwrap();
        prop_assert_eq!(out.tokens.shape(), grid.tokens.shape());
        prop_assert!(out.tokens.value().all_finite());
    }

    #[test]
    fn attention_rows_are_distributions(nq in 1usize..8, nk in 1usize..8, heads in 1usize..4, per in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let q = Var::constant(uniform(&[nq, heads * per], -50.0, 50.0, &mut r));
        let k = Var::constant(uniform(&[nk, heads * per], -50.0, 50.0, &mut r));
        let a = attention_weights(&q, &k, heads).unwrap();
        for row in a.data().chunks(nk) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dihedral_codes_invert(code in 0u8..8, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = image(3, h, w, seed);
        let y = dihedral(&x, code).unwrap();
        prop_assert_eq!(dihedral(&y, inverse_code(code)).unwrap(), x);
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle(c in 1usize..4, s in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = Var::constant(image(c * s * s, h, w, seed));
        let y = x.pixel_shuffle(s).unwrap();
        prop_assert_eq!(y.shape(), &[c, h * s, w * s]);
        prop_assert_eq!(y.pixel_unshuffle(s).unwrap().value().clone(), x.value().clone());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(h in 1usize..8, w in 1usize..8, ph in 0usize..12, pw in 0usize..12, seed in any::<u64>()) {
        let x = image(2, h, w, seed);
        let padded = reflect_pad(&x, h + ph, w + pw);
        prop_assert_eq!(crop(&padded, h, w), x);
    }

    #[test]
    fn bicubic_keeps_constants(scale in 1usize..5, rows in 1usize..6, cols in 1usize..6, v in 0.0f64..1.0) {
        let x = Tensor::full(&[3, rows * scale, cols * scale], v);
        let y = bicubic_downscale(&x, scale).unwrap();
        prop_assert_eq!(y.shape(), &[3, rows, cols]);
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weight_files_round_trip(seed in 0..=i64::MAX as u64, blocks in 1usize..3, pe in any::<bool>()) {
        let cfg = ModelConfig { seed, blocks, use_positional_embedding: pe, ..ModelConfig::toy() };
        let model = ActModel::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&model, &path).unwrap();
        let back = load_weights(&path, Some(&cfg)).unwrap();
        prop_assert_eq!(back.config(), &cfg);
        for (a, b) in model.params().iter().zip(back.params().iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.tensor, &b.tensor);
        }
    }
}
