//! PSNR and SSIM on the BT.601 luma channel of `[3, h, w]` RGB images in `[0, 1]`.

use crate::error::{ActError, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Luma `Y = 16/255 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(rgb: &Tensor) -> Result<Tensor> {
    let [3, h, w] = *rgb.shape() else {
        return Err(ActError::Geometry(format!("expected [3, h, w], got {:?}", rgb.shape())));
    };
    let d = rgb.data();
    let hw = h * w;
    let y = (0..hw)
        .map(|i| (16.0 + 65.481 * d[i] + 128.553 * d[hw + i] + 24.966 * d[2 * hw + i]) / 255.0)
        .collect();
    Tensor::new(vec![h, w], y)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ActError::dim("metric", a.shape(), b.shape()));
    }
    Ok(())
}

/// Removes `border` pixels from every side of a `[c, h, w]` image.
pub fn shave(x: &Tensor, border: usize) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(ActError::Geometry(format!("expected [c, h, w], got {:?}", x.shape())));
    };
    if 2 * border >= h || 2 * border >= w {
        return Err(ActError::Geometry(format!("cannot shave {border} pixels from {h}x{w}")));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in border..h - border {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + border..row + w - border]);
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Peak signal-to-noise ratio on luma with peak 1: `10 log10(1 / MSE)`.
pub fn psnr_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (ya, yb) = (rgb_to_y(a)?, rgb_to_y(b)?);
    let mse = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        / ya.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..k).map(|i| g[i] * x[y * w + xx + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..k).map(|i| g[i] * rows[(y + i) * ow + xx]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11x11 window position of the luma planes.
pub fn ssim_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (ya, yb) = (rgb_to_y(a)?, rgb_to_y(b)?);
    let (h, w) = (ya.shape()[0], ya.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ActError::Geometry(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (x, y) = (ya.data(), yb.data());
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let xx = filter_valid(&prod(x, x), h, w, &g);
    let yy = filter_valid(&prod(y, y), h, w, &g);
    let xy = filter_valid(&prod(x, y), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}
