//! The eight dihedral transforms of a `[c, h, w]` image.
//!
//! Code `k` in `0..8` flips horizontally when `k >= 4`, then rotates
//! counter-clockwise by `(k % 4) * 90` degrees. Code 0 is the identity.

use crate::error::{ActError, Result};
use crate::tensor::Tensor;

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(ActError::Geometry(format!("expected [c, h, w], got {:?}", x.shape()))),
    }
}

fn check_code(code: u8) -> Result<()> {
    if code >= 8 {
        return Err(ActError::Range(format!("dihedral code {code} not in 0..8")));
    }
    Ok(())
}

/// Applies transform `code`. Odd rotations swap height and width.
pub fn dihedral(x: &Tensor, code: u8) -> Result<Tensor> {
    check_code(code)?;
    let (c, h, w) = dims(x)?;
    let flip = code >= 4;
    let rot = code % 4;
    let (oh, ow) = if rot % 2 == 1 { (w, h) } else { (h, w) };
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                // Undo the rotation to find the coordinate in the flipped image.
                let (fy, fx) = match rot {
                    0 => (y, xx),
                    1 => (xx, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - xx),
                    _ => (h - 1 - xx, y),
                };
                let sx = if flip { w - 1 - fx } else { fx };
                out.push(d[(ch * h + fy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Code of the transform that undoes `code`.
pub fn inverse_code(code: u8) -> u8 {
    if code >= 4 {
        code
    } else {
        (4 - code) % 4
    }
}

/// Training augmentation: like [`dihedral`], restricted to square patches.
pub fn augment(patch: &Tensor, code: u8) -> Result<Tensor> {
    let (_, h, w) = dims(patch)?;
    if h != w && code % 2 == 1 {
        return Err(ActError::Geometry(format!(
            "cannot rotate a non-square {h}x{w} patch by 90 degrees"
        )));
    }
    dihedral(patch, code)
}
