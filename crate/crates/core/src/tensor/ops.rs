//! Differentiable operations on [`Var`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::linalg::{gemm, Op};
use super::{strides, Tensor, Var};
use crate::error::{ActError, Result};

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ActError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn unary(
    op: &'static str,
    x: &Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var> {
    let input = x.value().clone();
    let out: Vec<f64> = input.data().iter().map(|&v| f(v)).collect();
    let value = Tensor::from_parts(x.shape().to_vec(), out);
    let saved_out = value.clone();
    Var::from_op(
        op,
        value,
        vec![x.clone()],
        Box::new(move |g, _| {
            let grad = g
                .iter()
                .zip(input.data())
                .zip(saved_out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(grad)]
        }),
    )
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        same_shape("add", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Var::from_op(
            "add",
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                needs
                    .iter()
                    .map(|&n| n.then(|| g.to_vec()))
                    .collect()
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_shape("sub", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Var::from_op(
            "sub",
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_shape("mul", self, other)?;
        let a = self.value().clone();
        let b = other.value().clone();
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Var::from_op(
            "mul",
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn scale(&self, alpha: f64) -> Result<Var> {
        unary("scale", self, move |v| alpha * v, move |_, _| alpha)
    }

    pub fn relu(&self) -> Result<Var> {
        unary(
            "relu",
            self,
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Result<Var> {
        unary(
            "sigmoid",
            self,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    /// GELU in its exact form `x * Phi(x)`.
    pub fn gelu(&self) -> Result<Var> {
        unary(
            "gelu",
            self,
            |v| v * phi(v),
            |x, _| phi(x) + x * normal_pdf(x),
        )
    }

    /// Adds a vector of length `k` to every row of a `[.., k]` tensor.
    pub fn add_row_bias(&self, bias: &Var) -> Result<Var> {
        let k = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [k] {
            return Err(ActError::dim("add_row_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Var::from_op(
            "add_row_bias",
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                });
                vec![needs[0].then(|| g.to_vec()), db]
            }),
        )
    }

    /// Batched matrix product `[.., m, k] x [.., k, p]`.
    ///
    /// Batch extents must agree, or one operand must be a plain matrix that is
    /// broadcast across the other's batch.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(ActError::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(ActError::dim("matmul", &sa, &sb));
        }
        let batch_shape = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let batch: usize = batch_shape.iter().product();
        let a_step = if ba.is_empty() { 0 } else { m * k };
        let b_step = if bb.is_empty() { 0 } else { k * p };

        let a = self.value().clone();
        let b = other.value().clone();
        let mut out = vec![0.0; batch * m * p];
        for i in 0..batch {
            gemm(
                m,
                k,
                p,
                &a.data()[i * a_step..i * a_step + m * k],
                Op::N,
                &b.data()[i * b_step..i * b_step + k * p],
                Op::N,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, p]);
        Var::from_op(
            "matmul",
            Tensor::from_parts(shape, out),
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; a.numel()];
                    for i in 0..batch {
                        gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            Op::N,
                            &b.data()[i * b_step..i * b_step + k * p],
                            Op::T,
                            &mut da[i * a_step..i * a_step + m * k],
                            a_step == 0,
                        );
                    }
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; b.numel()];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            p,
                            &a.data()[i * a_step..i * a_step + m * k],
                            Op::T,
                            &g[i * m * p..(i + 1) * m * p],
                            Op::N,
                            &mut db[i * b_step..i * b_step + k * p],
                            b_step == 0,
                        );
                    }
                    db
                });
                vec![da, db]
            }),
        )
    }

    /// Contiguous reshape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Var::from_op(
            "reshape",
            value,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Reorders axes; `perm[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..rank).collect::<Vec<_>>() {
            return Err(ActError::dim("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        // Input offset of each output element, in output order.
        let gather = permuted_offsets(&out_shape, &perm.iter().map(|&p| in_strides[p]).collect::<Vec<_>>());
        let x = self.data();
        let out = gather.iter().map(|&o| x[o]).collect();
        Var::from_op(
            "permute",
            Tensor::from_parts(out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for (gi, &o) in g.iter().zip(&gather) {
                    dx[o] = *gi;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(ActError::dim("transpose", self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var> {
        let k = *self.shape().last().ok_or_else(|| ActError::dim("softmax", self.shape(), &[]))?;
        let mut out = Vec::with_capacity(self.value().numel());
        for row in self.data().chunks(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        let y = value.clone();
        Var::from_op(
            "softmax",
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(k).zip(y.data().chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let k = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [k] || beta.shape() != [k] {
            return Err(ActError::dim("layer_norm", self.shape(), gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(ActError::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = self.value().numel() / k;
        let mut xhat = Vec::with_capacity(rows * k);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let gm = gamma.value().clone();
        let out = xhat
            .chunks(k)
            .flat_map(|r| {
                r.iter()
                    .zip(gm.data())
                    .zip(beta.data())
                    .map(|((x, g), b)| x * g + b)
            })
            .collect();
        Var::from_op(
            "layer_norm",
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                let mut dx = Vec::with_capacity(if needs[0] { g.len() } else { 0 });
                for ((gr, xr), is) in g.chunks(k).zip(xhat.chunks(k)).zip(&inv_std) {
                    for j in 0..k {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    if needs[0] {
                        let dxhat: Vec<f64> = gr.iter().zip(gm.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / k as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                        dx.extend(
                            dxhat
                                .iter()
                                .zip(xr)
                                .map(|(d, x)| is * (d - mean_d - x * mean_dx)),
                        );
                    }
                }
                vec![
                    needs[0].then_some(dx),
                    needs[1].then_some(dgamma),
                    needs[2].then_some(dbeta),
                ]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| ActError::Usage("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(ActError::dim("concat", first.shape(), &[axis]));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(ActError::dim("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Var::from_op(
            "concat",
            Tensor::from_parts(shape, out),
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            (0..outer)
                                .flat_map(|o| g[o * total + start..o * total + start + w].iter().copied())
                                .collect()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(ActError::dim("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let (s, w) = (start * inner, len * inner);
        let x = self.data();
        let out = (0..outer)
            .flat_map(|o| x[o * full + s..o * full + s + w].iter().copied())
            .collect();
        let mut out_shape = shape;
        out_shape[axis] = len;
        let numel = self.value().numel();
        Var::from_op(
            "narrow",
            Tensor::from_parts(out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; numel];
                for o in 0..outer {
                    dx[o * full + s..o * full + s + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Result<Var> {
        let n = self.value().numel();
        Var::from_op(
            "sum",
            Tensor::scalar(self.data().iter().sum()),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// `sum(self * weights)` against a fixed weight tensor.
    pub fn dot_const(&self, weights: &Tensor) -> Result<Var> {
        if weights.shape() != self.shape() {
            return Err(ActError::dim("dot_const", self.shape(), weights.shape()));
        }
        let w = weights.clone();
        let s = self.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Var::from_op(
            "dot_const",
            Tensor::scalar(s),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(w.data().iter().map(|v| v * g[0]).collect())]),
        )
    }

    /// Mean absolute difference against a fixed target. The subgradient at
    /// exact ties is 0.
    pub fn l1_to(&self, target: &Tensor) -> Result<Var> {
        if target.shape() != self.shape() {
            return Err(ActError::dim("l1_loss", self.shape(), target.shape()));
        }
        let n = target.numel() as f64;
        let t = target.clone();
        let x = self.value().clone();
        let loss = x.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        Var::from_op(
            "l1_loss",
            Tensor::scalar(loss),
            vec![self.clone()],
            Box::new(move |g, _| {
                let scale = g[0] / n;
                let dx = x
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }
}

/// Flat offsets visited when walking `shape` in row-major order with the given strides.
fn permuted_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            offset -= strides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn var(shape: &[usize], data: &[f64]) -> Var {
        Var::leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn matmul_small_case() {
        let a = var(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = var(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero_row() {
        let eye = var(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = var(&[3, 2], &[1.5, -2.0, 0.25, 3.0, 7.0, -1.0]);
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
        let z = var(&[1, 3], &[0.0; 3]);
        assert_eq!(z.matmul(&a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = var(&[2, 3], &[0.0; 6]);
        let b = var(&[2, 3], &[0.0; 6]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_matrix_over_batch() {
        let a = var(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = var(&[2, 1], &[10.0, 1.0]);
        let y = a.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.data(), &[12.0, 34.0]);
        let g = backward(&y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(&w), vec![4.0, 6.0]);
    }

    #[test]
    fn softmax_edge_values() {
        let x = var(&[3], &[0.0, 0.0, 0.0]);
        for v in x.softmax_last().unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = var(&[2], &[1000.0, 0.0]).softmax_last().unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1].abs() < 1e-12);
        // 40-digit reference values of exp(i)/sum(exp).
        let want = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let got = var(&[3], &[1.0, 2.0, 3.0]).softmax_last().unwrap();
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_reference_points() {
        let x = var(&[3], &[0.0, 10.0, 1.0]);
        let y = x.gelu().unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // Phi(1) to 22 digits.
        assert!((y.data()[2] - 0.841_344_746_068_542_948_585_2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_reference_points() {
        let ones = var(&[2], &[1.0, 1.0]);
        let zeros = var(&[2], &[0.0, 0.0]);
        let c = var(&[2], &[4.0, 4.0]).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        // [1, 3]: mean 2, variance 1 -> [-1, 1] / sqrt(1 + eps).
        for eps in [1e-5, 1e-12] {
            let y = var(&[2], &[1.0, 3.0]).layer_norm(&ones, &zeros, eps).unwrap();
            let s = 1.0 / (1.0 + eps).sqrt();
            assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);
            assert!((y.data()[1] - 1.0).abs() < eps);
        }
        let beta = var(&[2], &[0.5, -2.0]);
        let y = var(&[2], &[1.0, 3.0]).layer_norm(&zeros, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = var(&[3], &[1.0, 2.0, 3.0]);
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.wrt(&x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let x = var(&[2], &[1.0, 2.0]);
        let unused = var(&[2], &[3.0, 4.0]);
        let g = backward(&x.sum().unwrap()).unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.wrt(&unused), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_on_constant_is_usage_error() {
        let c = Var::constant(Tensor::scalar(1.0));
        assert!(matches!(backward(&c), Err(ActError::Usage(_))));
    }

    #[test]
    fn constants_stay_untracked() {
        let a = Var::constant(Tensor::scalar(2.0));
        let b = Var::constant(Tensor::scalar(3.0));
        assert!(!a.mul(&b).unwrap().tracked());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let x = Var::constant(Tensor::scalar(f64::MAX));
        assert!(matches!(x.scale(10.0), Err(ActError::NonFinite("scale"))));
    }

    #[test]
    fn permute_and_narrow_and_concat() {
        let x = var(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let left = x.narrow(1, 0, 1).unwrap();
        let right = x.narrow(1, 1, 2).unwrap();
        let back = Var::concat(&[left, right], 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn l1_loss_values() {
        let t = Tensor::from_fn(&[2, 2], |i| i as f64);
        let same = Var::leaf(t.clone());
        assert_eq!(same.l1_to(&t).unwrap().data(), &[0.0]);
        let plus = Var::leaf(Tensor::from_fn(&[2, 2], |i| i as f64 + 1.0));
        assert_eq!(plus.l1_to(&t).unwrap().data(), &[1.0]);
        let g = backward(&same.l1_to(&t).unwrap()).unwrap();
        assert_eq!(g.wrt(&same), vec![0.0; 4]);
    }
}
