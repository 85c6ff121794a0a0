//! 8-bit PNG input and output.
//!
//! Images are `[3, h, w]` tensors in `[0, 1]`. Saving clamps to `[0, 1]` and
//! quantizes with `floor(255 v + 0.5)` (round half up).

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{ActError, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> ActError {
    ActError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads any PNG as RGB.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| ActError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| ActError::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

/// Round-half-up quantization of a value clamped to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn tensor_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = *x.shape() else {
        return Err(ActError::Geometry(format!("expected [3, h, w], got {:?}", x.shape())));
    };
    let d = x.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            raw.push(quantize(d[c * h * w + p]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
}

pub fn save_rgb(path: &Path, x: &Tensor) -> Result<()> {
    tensor_to_rgb(x)?.save(path).map_err(|e| image_err(path, e))
}

/// Saves an `h x w` plane as grayscale after min-max normalization. A
/// constant plane maps to mid gray.
pub fn save_gray_normalized(path: &Path, plane: &[f64], height: usize, width: usize) -> Result<()> {
    GrayImage::from_raw(width as u32, height as u32, normalize_plane(plane))
        .ok_or_else(|| image_err(path, "plane size does not match extents"))?
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn normalize_plane(plane: &[f64]) -> Vec<u8> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; plane.len()];
    }
    plane.iter().map(|v| quantize((v - lo) / (hi - lo))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let x = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0);
        save_rgb(&path, &x).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), x);
    }

    #[test]
    fn constant_plane_is_mid_gray() {
        assert_eq!(normalize_plane(&[0.0; 4]), vec![128; 4]);
        assert_eq!(normalize_plane(&[0.0, 1.0, 0.5]), vec![0, 255, 128]);
    }
}
