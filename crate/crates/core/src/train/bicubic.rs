//! Antialiased bicubic downscaling by an integer factor.
//!
//! Output pixel `i` is centred at input coordinate `(i + 0.5) s - 0.5`. Taps
//! use the cubic kernel with `a = -0.5` stretched by `s`, so the support spans
//! `4 s` input pixels; weights are normalized to sum to 1 and out-of-range
//! taps mirror symmetrically (`-1 -> 0`, `n -> n - 1`). Because the factor is
//! an integer every output pixel uses the same weight table, returned by
//! [`bicubic_weights`].

use crate::error::{ActError, Result};
use crate::tensor::Tensor;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Tap weights for a downscale by `scale`: output `i` reads input
/// `i * scale + first + k` with weight `taps[k]`.
pub fn bicubic_weights(scale: usize) -> (isize, Vec<f64>) {
    let s = scale as f64;
    let centre = (s - 1.0) / 2.0;
    let half = 2.0 * s;
    let first = (centre - half).floor() as isize;
    let last = (centre + half).ceil() as isize;
    let raw: Vec<f64> = (first..=last).map(|j| cubic((centre - j as f64) / s) / s).collect();
    let total: f64 = raw.iter().sum();
    (first, raw.into_iter().map(|w| w / total).collect())
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Downscales one axis of a contiguous row of `n` samples.
fn resample(row: &[f64], scale: usize, first: isize, taps: &[f64], out: &mut Vec<f64>) {
    let n = row.len();
    for i in 0..n / scale {
        let base = (i * scale) as isize + first;
        let v = taps
            .iter()
            .enumerate()
            .map(|(k, w)| w * row[mirror(base + k as isize, n)])
            .sum();
        out.push(v);
    }
}

/// Downscales `[c, h, w]` by `scale` along both axes (width first).
pub fn bicubic_downscale(hr: &Tensor, scale: usize) -> Result<Tensor> {
    let [c, h, w] = *hr.shape() else {
        return Err(ActError::Geometry(format!("expected [c, h, w], got {:?}", hr.shape())));
    };
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(ActError::Geometry(format!(
            "{h}x{w} is not divisible by scale {scale}"
        )));
    }
    if scale == 1 {
        return Ok(hr.clone());
    }
    let (first, taps) = bicubic_weights(scale);
    let (oh, ow) = (h / scale, w / scale);
    let mut across = Vec::with_capacity(c * h * ow);
    for row in hr.data().chunks(w) {
        resample(row, scale, first, &taps, &mut across);
    }
    let mut out = vec![0.0; c * oh * ow];
    let mut column = Vec::with_capacity(h);
    let mut down = Vec::with_capacity(oh);
    for ch in 0..c {
        for x in 0..ow {
            column.clear();
            column.extend((0..h).map(|y| across[(ch * h + y) * ow + x]));
            down.clear();
            resample(&column, scale, first, &taps, &mut down);
            for (y, v) in down.iter().enumerate() {
                out[(ch * oh + y) * ow + x] = *v;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for s in 2..=4 {
            let (_, taps) = bicubic_weights(s);
            assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Factor 2: centre 0.5, taps at -4..=5, kernel sampled at quarter steps.
        let (first, taps) = bicubic_weights(2);
        assert_eq!(first, -4);
        assert_eq!(taps.len(), 10);
        assert_eq!(taps[0], 0.0);
        assert!((taps[4] - taps[5]).abs() < 1e-15);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::full(&[3, 12, 18], 0.37);
        let y = bicubic_downscale(&x, 3).unwrap();
        assert_eq!(y.shape(), &[3, 4, 6]);
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
    }

    #[test]
    fn ramp_matches_direct_convolution() {
        // Independent oracle: evaluate the stretched kernel at each input
        // position of an interior output sample and normalize.
        let n = 16usize;
        let x = Tensor::from_fn(&[1, 1, n], |i| i as f64 * 0.1 + 0.05 * (i as f64).powi(2));
        let y = bicubic_downscale(&Tensor::new(vec![1, 2, n], x.data().repeat(2)).unwrap(), 2).unwrap();
        for i in 2..6 {
            let centre = 2.0 * i as f64 + 0.5;
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n {
                let wgt = cubic((centre - j as f64) / 2.0);
                num += wgt * x.data()[j];
                den += wgt;
            }
            assert!((y.data()[i] - num / den).abs() < 1e-12, "i = {i}");
        }
    }

    #[test]
    fn indivisible_extent_rejected() {
        assert!(bicubic_downscale(&Tensor::zeros(&[3, 5, 4]), 2).is_err());
        let y = bicubic_downscale(&Tensor::zeros(&[3, 48, 48]), 2).unwrap();
        assert_eq!(y.shape(), &[3, 24, 24]);
    }
}
