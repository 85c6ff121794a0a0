//! Image-layout operations on `[c, h, w]` feature maps.

use std::rc::Rc;

use super::linalg::{gemm, Op};
use super::{Tensor, Var};
use crate::error::{ActError, Result};

fn chw(op: &'static str, x: &Var) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(ActError::dim(op, x.shape(), &[])),
    }
}

/// Number of sliding positions of a `kernel` window with `stride` along `len`.
pub fn window_count(len: usize, kernel: usize, stride: usize) -> usize {
    if kernel > len || stride == 0 {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// Flat pixel index for every (token, within-token) slot of an unfold.
///
/// Tokens are ordered row-major over the window lattice; within a token the
/// layout is channel-major, then row, then column.
pub(crate) fn unfold_indices(c: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<usize> {
    let rows = window_count(h, k, s);
    let cols = window_count(w, k, s);
    let mut idx = Vec::with_capacity(rows * cols * c * k * k);
    for i in 0..rows {
        for j in 0..cols {
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        idx.push((ch * h + i * s + ky) * w + j * s + kx);
                    }
                }
            }
        }
    }
    idx
}

impl Var {
    /// `out[i] = self[index[i]]`; backward scatters.
    pub(crate) fn gather(&self, op: &'static str, shape: Vec<usize>, index: Rc<Vec<usize>>) -> Result<Var> {
        let x = self.data();
        let out = index.iter().map(|&i| x[i]).collect();
        let n = self.value().numel();
        Var::from_op(
            op,
            Tensor::from_parts(shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n];
                for (gi, &i) in g.iter().zip(index.iter()) {
                    dx[i] += gi;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `out[index[i]] += self[i]`; backward gathers.
    pub(crate) fn scatter_add(&self, op: &'static str, shape: Vec<usize>, index: Rc<Vec<usize>>) -> Result<Var> {
        let mut out = vec![0.0; shape.iter().product()];
        for (v, &i) in self.data().iter().zip(index.iter()) {
            out[i] += v;
        }
        Var::from_op(
            op,
            Tensor::from_parts(shape, out),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(index.iter().map(|&i| g[i]).collect())]),
        )
    }

    /// Extracts `kernel x kernel` windows at `stride` from `[c, h, w]` into
    /// an `[n, c * kernel^2]` token matrix.
    pub fn unfold(&self, kernel: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = chw("unfold", self)?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(ActError::Geometry(format!(
                "cannot unfold {c}x{h}x{w} with kernel {kernel}, stride {stride}"
            )));
        }
        let n = window_count(h, kernel, stride) * window_count(w, kernel, stride);
        let idx = Rc::new(unfold_indices(c, h, w, kernel, stride));
        self.gather("unfold", vec![n, c * kernel * kernel], idx)
    }

    /// Adjoint of [`Var::unfold`]: places tokens back on a `[c, h, w]` canvas,
    /// summing where windows overlap. Pixels no window covers stay zero.
    pub fn fold(&self, c: usize, h: usize, w: usize, kernel: usize, stride: usize) -> Result<Var> {
        let n = window_count(h, kernel, stride) * window_count(w, kernel, stride);
        if self.shape() != [n, c * kernel * kernel] || n == 0 {
            return Err(ActError::Geometry(format!(
                "tokens {:?} do not fold onto {c}x{h}x{w} with kernel {kernel}, stride {stride}",
                self.shape()
            )));
        }
        let idx = Rc::new(unfold_indices(c, h, w, kernel, stride));
        self.scatter_add("fold", vec![c, h, w], idx)
    }

    /// Depth-to-space: `[c * s^2, h, w] -> [c, s * h, s * w]` with
    /// `out[ch, y * s + i, x * s + j] = in[ch * s^2 + i * s + j, y, x]`.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Var> {
        let (cin, h, w) = chw("pixel_shuffle", self)?;
        if s == 0 || cin % (s * s) != 0 {
            return Err(ActError::Geometry(format!(
                "{cin} channels cannot be shuffled by factor {s}"
            )));
        }
        let c = cin / (s * s);
        let (oh, ow) = (h * s, w * s);
        let mut idx = Vec::with_capacity(cin * h * w);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src_c = ch * s * s + (oy % s) * s + ox % s;
                    idx.push((src_c * h + oy / s) * w + ox / s);
                }
            }
        }
        self.gather("pixel_shuffle", vec![c, oh, ow], Rc::new(idx))
    }

    /// Space-to-depth, the inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, s: usize) -> Result<Var> {
        let (c, oh, ow) = chw("pixel_unshuffle", self)?;
        if s == 0 || oh % s != 0 || ow % s != 0 {
            return Err(ActError::Geometry(format!(
                "{oh}x{ow} map cannot be unshuffled by factor {s}"
            )));
        }
        let (h, w) = (oh / s, ow / s);
        let mut idx = Vec::with_capacity(c * oh * ow);
        for src_c in 0..c * s * s {
            let (ch, i, j) = (src_c / (s * s), (src_c / s) % s, src_c % s);
            for y in 0..h {
                for x in 0..w {
                    idx.push((ch * oh + y * s + i) * ow + x * s + j);
                }
            }
        }
        self.gather("pixel_unshuffle", vec![c * s * s, h, w], Rc::new(idx))
    }

    /// Same-size 2-D convolution with zero padding `kernel / 2` and stride 1.
    ///
    /// `weight` is `[c_out, c_in, k, k]`, `bias` is `[c_out]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (ci, h, w) = chw("conv2d", self)?;
        let (co, k) = match *weight.shape() {
            [co, wci, k, k2] if wci == ci && k == k2 => (co, k),
            _ => return Err(ActError::dim("conv2d", self.shape(), weight.shape())),
        };
        if k % 2 == 0 {
            return Err(ActError::Geometry(format!("conv2d needs an odd kernel, got {k}")));
        }
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(ActError::dim("conv2d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(ActError::dim("conv2d bias", weight.shape(), b.shape()));
            }
        }
        let hw = h * w;
        let ckk = ci * k * k;
        let cols: Rc<Vec<f64>> = if k == 1 {
            Rc::new(self.data().to_vec())
        } else {
            Rc::new(im2col(self.data(), ci, h, w, k, pad))
        };
        let wt = weight.value().clone();
        let mut out = vec![0.0; co * hw];
        gemm(co, ckk, hw, wt.data(), Op::N, &cols, Op::N, &mut out, false);
        if let Some(b) = bias {
            for (row, bv) in out.chunks_mut(hw).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let has_bias = bias.is_some();
        Var::from_op(
            "conv2d",
            Tensor::from_parts(vec![co, h, w], out),
            parents,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, co, hw, wt.data(), Op::T, g, Op::N, &mut dcols, false);
                    if k == 1 {
                        dcols
                    } else {
                        col2im(&dcols, ci, h, w, k, pad)
                    }
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; co * ckk];
                    gemm(co, hw, ckk, g, Op::N, &cols, Op::T, &mut dw, false);
                    dw
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(needs[2].then(|| g.chunks(hw).map(|r| r.iter().sum()).collect()));
                }
                grads
            }),
        )
    }

    /// Per-channel spatial mean: `[c, h, w] -> [c]`.
    pub fn global_avg_pool(&self) -> Result<Var> {
        let (c, h, w) = chw("global_avg_pool", self)?;
        let hw = h * w;
        let out = self.data().chunks(hw).map(|r| r.iter().sum::<f64>() / hw as f64).collect();
        Var::from_op(
            "global_avg_pool",
            Tensor::from_parts(vec![c], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect())]
            }),
        )
    }

    /// Multiplies channel `i` of `[c, h, w]` by `scales[i]`.
    pub fn scale_channels(&self, scales: &Var) -> Result<Var> {
        let (c, h, w) = chw("scale_channels", self)?;
        if scales.shape() != [c] {
            return Err(ActError::dim("scale_channels", self.shape(), scales.shape()));
        }
        let hw = h * w;
        let x = self.value().clone();
        let s = scales.value().clone();
        let out = x
            .data()
            .chunks(hw)
            .zip(s.data())
            .flat_map(|(r, sv)| r.iter().map(move |v| v * sv))
            .collect();
        Var::from_op(
            "scale_channels",
            Tensor::from_parts(vec![c, h, w], out),
            vec![self.clone(), scales.clone()],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    g.chunks(hw)
                        .zip(s.data())
                        .flat_map(|(r, sv)| r.iter().map(move |v| v * sv))
                        .collect()
                });
                let ds = needs[1].then(|| {
                    g.chunks(hw)
                        .zip(x.data().chunks(hw))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
                vec![dx, ds]
            }),
        )
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let src = (ch * h + sy - pad) * w;
                    for xx in 0..w {
                        let sx = xx + kx;
                        if sx >= pad && sx - pad < w {
                            cols[row + y * w + xx] = x[src + sx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let dst = (ch * h + sy - pad) * w;
                    for xx in 0..w {
                        let sx = xx + kx;
                        if sx >= pad && sx - pad < w {
                            x[dst + sx - pad] += cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}
