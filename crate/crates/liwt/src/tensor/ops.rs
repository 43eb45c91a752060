//! Differentiable array operations. Each op computes its forward result
//! eagerly and records a closure that maps the output gradient back onto
//! the operands.

use super::{parallel, Back, Scalar, Tensor};
use rayon::prelude::*;

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("add", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += go;
                    }
                });
                ctx.parents[1].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += go;
                    }
                });
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("sub", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += go;
                    }
                });
                ctx.parents[1].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += -go;
                    }
                });
            }),
        )
    }

    /// Elementwise product. Same-shape operands only; the single broadcast
    /// form in this crate is [`Tensor::scale`] by a scalar.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("mul", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &Back<T>| {
                let a = ctx.parents[0].data_rc();
                let b = ctx.parents[1].data_rc();
                ctx.parents[0].acc_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * b[i];
                    }
                });
                ctx.parents[1].acc_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * a[i];
                    }
                });
            }),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += go * c;
                    }
                });
            }),
        )
    }

    /// max(x, 0); the subgradient at 0 is taken as 0.
    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&a| if a > T::ZERO { a } else { T::ZERO })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &Back<T>| {
                let x = ctx.parents[0].data_rc();
                ctx.parents[0].acc_grad(|g| {
                    for i in 0..g.len() {
                        if x[i] > T::ZERO {
                            g[i] += ctx.grad[i];
                        }
                    }
                });
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&a| {
                // evaluate on the side that keeps exp() small
                if a.to_f64() >= 0.0 {
                    T::ONE / (T::ONE + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for i in 0..g.len() {
                        let s = ctx.out[i];
                        g[i] += ctx.grad[i] * s * (T::ONE - s);
                    }
                });
            }),
        )
    }

    /// |x|; the subgradient at 0 is taken as 0.
    pub fn abs_val(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&a| a.abs()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &Back<T>| {
                let x = ctx.parents[0].data_rc();
                ctx.parents[0].acc_grad(|g| {
                    for i in 0..g.len() {
                        if x[i] > T::ZERO {
                            g[i] += ctx.grad[i];
                        } else if x[i] < T::ZERO {
                            g[i] += -ctx.grad[i];
                        }
                    }
                });
            }),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be rank 2, got {:?}", self.shape());
        assert_eq!(other.shape().len(), 2, "matmul: rhs must be rank 2, got {:?}", other.shape());
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul: inner dims differ, {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = vec![T::ZERO; m * n];
        matmul_nn(self.data(), other.data(), &mut out, m, k, n);
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &Back<T>| {
                let a = ctx.parents[0].data_rc();
                let b = ctx.parents[1].data_rc();
                // dA = dC . B^T, dB = A^T . dC
                ctx.parents[0].acc_grad(|g| matmul_nt(ctx.grad, &b, g, m, n, k));
                ctx.parents[1].acc_grad(|g| matmul_tn(&a, ctx.grad, g, k, m, n));
            }),
        )
    }

    /// Softmax along `axis`, numerically stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        assert!(
            axis < self.shape().len(),
            "softmax: axis {} out of range for shape {:?}",
            axis,
            self.shape()
        );
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = x[base];
                for j in 1..n {
                    mx = mx.maximum(x[base + j * inner]);
                }
                let mut sum = T::ZERO;
                for j in 0..n {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = T::ZERO;
                            for j in 0..n {
                                let idx = base + j * inner;
                                dot += ctx.grad[idx] * ctx.out[idx];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                g[idx] += ctx.out[idx] * (ctx.grad[idx] - dot);
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Concatenates tensors along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat: no operands");
        let rank = parts[0].shape().len();
        assert!(axis < rank, "concat: axis {axis} out of range for rank {rank}");
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape()[d],
                        parts[0].shape()[d],
                        "concat: shape mismatch {:?} vs {:?} on axis {}",
                        p.shape(),
                        parts[0].shape(),
                        d
                    );
                }
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let tail: usize = parts[0].shape()[axis + 1..].iter().product();
        let spans: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * tail).collect();
        let total_span: usize = spans.iter().sum();

        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = vec![T::ZERO; outer * total_span];
        for o in 0..outer {
            let mut dst = o * total_span;
            for (p, &span) in parts.iter().zip(&spans) {
                out[dst..dst + span].copy_from_slice(&p.data()[o * span..(o + 1) * span]);
                dst += span;
            }
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(
            shape,
            out,
            parents,
            Box::new(move |ctx: &Back<T>| {
                let mut offset = 0;
                for (p, &span) in ctx.parents.iter().zip(&spans) {
                    p.acc_grad(|g| {
                        for o in 0..g.len() / span {
                            let src = o * total_span + offset;
                            for j in 0..span {
                                g[o * span + j] += ctx.grad[src + j];
                            }
                        }
                    });
                    offset += span;
                }
            }),
        )
    }

    /// Copies `len` extents starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let rank = self.shape().len();
        assert!(axis < rank, "slice_axis: axis {axis} out of range for rank {rank}");
        assert!(
            start + len <= self.shape()[axis],
            "slice_axis: range {}..{} exceeds extent {} of shape {:?}",
            start,
            start + len,
            self.shape()[axis],
            self.shape()
        );
        let outer: usize = self.shape()[..axis].iter().product();
        let tail: usize = self.shape()[axis + 1..].iter().product();
        let full_span = self.shape()[axis] * tail;
        let span = len * tail;
        let offset = start * tail;

        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut out = vec![T::ZERO; outer * span];
        for o in 0..outer {
            let src = o * full_span + offset;
            out[o * span..(o + 1) * span].copy_from_slice(&self.data()[src..src + span]);
        }
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for o in 0..outer {
                        let dst = o * full_span + offset;
                        for j in 0..span {
                            g[dst + j] += ctx.grad[o * span + j];
                        }
                    }
                });
            }),
        )
    }

    /// Same data viewed under a new shape with an equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape: {:?} incompatible with {:?}",
            shape,
            self.shape()
        );
        let data = self.data_rc();
        let mut out = Vec::with_capacity(data.len());
        out.extend_from_slice(&data);
        Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(|ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += go;
                    }
                });
            }),
        )
    }

    /// Swaps the two leading axes of a rank-3 tensor.
    pub fn swap01(&self) -> Tensor<T> {
        assert_eq!(self.shape().len(), 3, "swap01: need rank 3, got {:?}", self.shape());
        let (h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for i in 0..h {
            for j in 0..w {
                let src = (i * w + j) * c;
                let dst = (j * h + i) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
        Tensor::from_op(
            vec![w, h, c],
            out,
            vec![self.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for i in 0..h {
                        for j in 0..w {
                            let src = (j * h + i) * c;
                            let dst = (i * w + j) * c;
                            for k in 0..c {
                                g[dst + k] += ctx.grad[src + k];
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Gathers rows of a rank-2 tensor. Indices may repeat; gradients
    /// scatter-add back onto the source rows.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "gather_rows: need rank 2, got {:?}", self.shape());
        let (rows, k) = (self.shape()[0], self.shape()[1]);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of range for {rows} rows");
        }
        let x = self.data();
        let mut out = vec![T::ZERO; idx.len() * k];
        for (r, &i) in idx.iter().enumerate() {
            out[r * k..(r + 1) * k].copy_from_slice(&x[i * k..(i + 1) * k]);
        }
        let idx = idx.to_vec();
        Tensor::from_op(
            vec![idx.len(), k],
            out,
            vec![self.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..k {
                            g[i * k + j] += ctx.grad[r * k + j];
                        }
                    }
                });
            }),
        )
    }

    /// Adds a length-k vector to every row of a rows-by-k matrix.
    pub fn add_row_vec(&self, bias: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "add_row_vec: need rank 2, got {:?}", self.shape());
        let (rows, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(
            bias.shape(),
            &[k],
            "add_row_vec: bias shape {:?} does not match row width {}",
            bias.shape(),
            k
        );
        let b = bias.data();
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for j in 0..k {
                out.push(self.data()[r * k + j] + b[j]);
            }
        }
        Tensor::from_op(
            vec![rows, k],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.grad) {
                        *gi += go;
                    }
                });
                ctx.parents[1].acc_grad(|g| {
                    for r in 0..rows {
                        for j in 0..k {
                            g[j] += ctx.grad[r * k + j];
                        }
                    }
                });
            }),
        )
    }

    /// Scales row r of a rows-by-k matrix by s[r].
    pub fn row_scale(&self, s: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "row_scale: need rank 2, got {:?}", self.shape());
        let (rows, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(
            s.shape(),
            &[rows],
            "row_scale: scale shape {:?} does not match {} rows",
            s.shape(),
            rows
        );
        let sv = s.data();
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for j in 0..k {
                out.push(self.data()[r * k + j] * sv[r]);
            }
        }
        Tensor::from_op(
            vec![rows, k],
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |ctx: &Back<T>| {
                let x = ctx.parents[0].data_rc();
                let sv = ctx.parents[1].data_rc();
                ctx.parents[0].acc_grad(|g| {
                    for r in 0..rows {
                        for j in 0..k {
                            g[r * k + j] += ctx.grad[r * k + j] * sv[r];
                        }
                    }
                });
                ctx.parents[1].acc_grad(|g| {
                    for r in 0..rows {
                        let mut acc = T::ZERO;
                        for j in 0..k {
                            acc += ctx.grad[r * k + j] * x[r * k + j];
                        }
                        g[r] += acc;
                    }
                });
            }),
        )
    }

    /// Scales column j of a rows-by-k matrix by s[j].
    pub fn col_scale(&self, s: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "col_scale: need rank 2, got {:?}", self.shape());
        let (rows, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(
            s.shape(),
            &[k],
            "col_scale: scale shape {:?} does not match row width {}",
            s.shape(),
            k
        );
        let sv = s.data();
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for j in 0..k {
                out.push(self.data()[r * k + j] * sv[j]);
            }
        }
        Tensor::from_op(
            vec![rows, k],
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |ctx: &Back<T>| {
                let x = ctx.parents[0].data_rc();
                let sv = ctx.parents[1].data_rc();
                ctx.parents[0].acc_grad(|g| {
                    for r in 0..rows {
                        for j in 0..k {
                            g[r * k + j] += ctx.grad[r * k + j] * sv[j];
                        }
                    }
                });
                ctx.parents[1].acc_grad(|g| {
                    for r in 0..rows {
                        for j in 0..k {
                            g[j] += ctx.grad[r * k + j] * x[r * k + j];
                        }
                    }
                });
            }),
        )
    }

    /// Sums a rank-2 tensor along `axis`, yielding a rank-1 tensor.
    pub fn sum_axis2d(&self, axis: usize) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2, "sum_axis2d: need rank 2, got {:?}", self.shape());
        assert!(axis < 2, "sum_axis2d: axis {axis} out of range");
        let (rows, k) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let (out_len, mut out) = if axis == 0 {
            (k, vec![T::ZERO; k])
        } else {
            (rows, vec![T::ZERO; rows])
        };
        if axis == 0 {
            for r in 0..rows {
                for j in 0..k {
                    out[j] += x[r * k + j];
                }
            }
        } else {
            for r in 0..rows {
                let mut acc = T::ZERO;
                for j in 0..k {
                    acc += x[r * k + j];
                }
                out[r] = acc;
            }
        }
        Tensor::from_op(
            vec![out_len],
            out,
            vec![self.clone()],
            Box::new(move |ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for r in 0..rows {
                        for j in 0..k {
                            let gi = if axis == 0 { j } else { r };
                            g[r * k + j] += ctx.grad[gi];
                        }
                    }
                });
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::from_op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(|ctx: &Back<T>| {
                ctx.parents[0].acc_grad(|g| {
                    for gi in g.iter_mut() {
                        *gi += ctx.grad[0];
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.len() as f64);
        self.sum_all().scale(T::ONE / n)
    }

    /// Mean absolute difference. The subgradient at exact ties is 0.
    pub fn l1(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("l1", self, other);
        self.sub(other).abs_val().mean_all()
    }
}

const PAR_THRESHOLD: usize = 1 << 17;

/// out += a . b, a is m-by-k, b is k-by-n.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |oi: &mut [T], i: usize| {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in oi.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if parallel() && m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, oi)| row(oi, i));
    } else {
        for (i, oi) in out.chunks_mut(n).enumerate() {
            row(oi, i);
        }
    }
}

/// out += a . b^T, a is m-by-k, b is n-by-k.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |oi: &mut [T], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in oi.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            *o += acc;
        }
    };
    if parallel() && m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, oi)| row(oi, i));
    } else {
        for (i, oi) in out.chunks_mut(n).enumerate() {
            row(oi, i);
        }
    }
}

/// out += a^T . b, a is k-by-m, b is k-by-n.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |oi: &mut [T], i: usize| {
        for l in 0..k {
            let av = a[l * m + i];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in oi.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if parallel() && m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, oi)| row(oi, i));
    } else {
        for (i, oi) in out.chunks_mut(n).enumerate() {
            row(oi, i);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{check_gradients, Tensor};
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn add_sub_mul_scale_values() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 2], vec![0.5f32, -1.0, 2.0, 0.0]);
        assert_eq!(a.add(&b).data(), &[1.5, 1.0, 5.0, 4.0]);
        assert_eq!(a.sub(&b).data(), &[0.5, 3.0, 1.0, 4.0]);
        assert_eq!(a.mul(&b).data(), &[0.5, -2.0, 6.0, 0.0]);
        assert_eq!(a.scale(2.0).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    #[should_panic(expected = "add: shape mismatch")]
    fn add_shape_mismatch_panics() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let _ = a.add(&b);
    }

    #[test]
    fn relu_and_abs_at_zero() {
        let x = Tensor::param(&[3], vec![-1.0f64, 0.0, 2.0]);
        let y = x.relu();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        y.sum_all().backward();
        // the subgradient at exactly zero is zero
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);

        let x = Tensor::param(&[3], vec![-1.5f64, 0.0, 2.0]);
        let y = x.abs_val();
        assert_eq!(y.data(), &[1.5, 0.0, 2.0]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let x = Tensor::from_vec(&[3], vec![0.0f64, 500.0, -500.0]);
        let s = x.sigmoid();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
        assert!(s.data()[2].abs() < 1e-12);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]);
        let b = Tensor::from_vec(&[2, 1], vec![3.0f32, 4.0]);
        assert_eq!(a.matmul(&b).data(), &[11.0]);

        let eye = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]);
        let m = Tensor::from_vec(&[2, 2], vec![5.0f32, 6.0, 7.0, 8.0]);
        assert_eq!(m.matmul(&eye).data(), m.data());
        assert_eq!(eye.matmul(&m).data(), m.data());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (5, 7, 3);
        let a = randv(&mut rng, m * k);
        let b = randv(&mut rng, k * n);
        let mut want = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    want[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        let got = Tensor::from_vec(&[m, k], a).matmul(&Tensor::from_vec(&[k, n], b));
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_rows() {
        let x = Tensor::from_vec(&[1, 9], vec![0.3f64; 9]);
        for &v in x.softmax(1).data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        let x = Tensor::from_vec(&[1, 2], vec![0.0f64, (3.0f64).ln()]);
        let s = x.softmax(1);
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
        // large inputs must not overflow thanks to max subtraction
        let x = Tensor::from_vec(&[1, 2], vec![1000.0f64, 1000.0]);
        let s = x.softmax(1);
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_middle_axis() {
        // lanes run along axis 1 of a [2, 3, 2] tensor
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[2, 3, 2], randv(&mut rng, 12));
        let s = x.softmax(1);
        for o in 0..2 {
            for i in 0..2 {
                let sum: f64 = (0..3).map(|j| s.data()[o * 6 + j * 2 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::from_vec(&[2, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 2, 2], vec![5.0f32, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.slice_axis(1, 0, 1).data(), a.data());
        assert_eq!(c.slice_axis(1, 1, 2).data(), b.data());
    }

    #[test]
    fn reshape_and_swap01() {
        let x = Tensor::from_vec(&[2, 3], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let r = x.reshape(&[3, 2]);
        assert_eq!(r.data(), x.data());

        let x = Tensor::from_vec(&[2, 3, 1], (0..6).map(|v| v as f32).collect());
        let t = x.swap01();
        assert_eq!(t.shape(), &[3, 2, 1]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(t.swap01().data(), x.data());
    }

    #[test]
    fn gather_rows_matches_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randv(&mut rng, 6 * 4);
        let t = Tensor::from_vec(&[6, 4], x.clone());
        let idx = [3usize, 0, 3, 5];
        let g = t.gather_rows(&idx);
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(&g.data()[r * 4..(r + 1) * 4], &x[i * 4..(i + 1) * 4]);
        }
    }

    #[test]
    fn gather_rows_gradient_accumulates_on_repeats() {
        let x = Tensor::param(&[3, 2], vec![1.0f64; 6]);
        let g = x.gather_rows(&[1, 1, 1]);
        g.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 3.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn row_and_col_scale_values() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = x.row_scale(&Tensor::from_vec(&[2], vec![2.0, -1.0]));
        assert_eq!(r.data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
        let c = x.col_scale(&Tensor::from_vec(&[3], vec![1.0, 0.0, 2.0]));
        assert_eq!(c.data(), &[1.0, 0.0, 6.0, 4.0, 0.0, 12.0]);
    }

    #[test]
    fn sums_and_means() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.sum_axis2d(0).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis2d(1).data(), &[6.0, 15.0]);
        assert_eq!(x.sum_all().item(), 21.0);
        assert_eq!(x.mean_all().item(), 3.5);
    }

    #[test]
    fn square_sum_backward() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]);
        let y = x.mul(&x).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn l1_backward_signs() {
        let x = Tensor::param(&[4], vec![0.5f64, -0.25, 0.0, 2.0]);
        let zero = Tensor::zeros(&[4]);
        let loss = x.l1(&zero);
        assert!((loss.item() - 2.75 / 4.0).abs() < 1e-12);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![0.25, -0.25, 0.0, 0.25]);
    }

    #[test]
    fn grads_accumulate_across_uses_and_zero_grad_resets() {
        let x = Tensor::param(&[2], vec![1.0f64, -1.0]);
        // x used twice in one graph
        let y = x.add(&x).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        // a second backward piles on top until zero_grad is called
        let y2 = x.sum_all();
        y2.backward();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]);
        let y = crate::tensor::no_grad(|| x.scale(3.0));
        assert_eq!(y.data(), &[3.0, 6.0]);
        assert!(!y.requires_grad());
        let z = y.sum_all();
        assert_eq!(z.len(), 1);
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]);
        let d = x.detach();
        assert_eq!(d.data(), x.data());
        let y = d.scale(2.0).sum_all();
        assert_eq!(y.item(), 6.0);
        // nothing to differentiate: the whole graph is constant
        assert!(x.grad().is_none());
    }

    #[test]
    fn finite_difference_all_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-3;
        let tol = 1e-5;
        let cases: Vec<(&str, Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>, Vec<Vec<usize>>)> = vec![
            ("add", Box::new(|t| t[0].add(&t[1]).mean_all()), vec![vec![3, 4], vec![3, 4]]),
            ("sub", Box::new(|t| t[0].sub(&t[1]).mean_all()), vec![vec![3, 4], vec![3, 4]]),
            ("mul", Box::new(|t| t[0].mul(&t[1]).sum_all()), vec![vec![3, 4], vec![3, 4]]),
            ("scale", Box::new(|t| t[0].scale(-1.7).sum_all()), vec![vec![5]]),
            ("relu", Box::new(|t| t[0].relu().sum_all()), vec![vec![4, 3]]),
            ("sigmoid", Box::new(|t| t[0].sigmoid().sum_all()), vec![vec![7]]),
            ("abs", Box::new(|t| t[0].abs_val().sum_all()), vec![vec![6]]),
            ("matmul", Box::new(|t| t[0].matmul(&t[1]).mul(&t[0].matmul(&t[1])).sum_all()), vec![vec![3, 4], vec![4, 2]]),
            ("softmax", Box::new(|t| {
                let w = Tensor::from_vec(&[2, 5], (0..10).map(|i| (i as f64 * 0.7).sin()).collect());
                t[0].softmax(1).mul(&w).sum_all()
            }), vec![vec![2, 5]]),
            ("softmax_mid_axis", Box::new(|t| {
                let w = Tensor::from_vec(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.3).cos()).collect());
                t[0].softmax(1).mul(&w).sum_all()
            }), vec![vec![2, 3, 2]]),
            ("concat", Box::new(|t| Tensor::concat(&[&t[0], &t[1]], 1).mul(&Tensor::concat(&[&t[1], &t[0]], 1)).sum_all()), vec![vec![2, 3], vec![2, 3]]),
            ("slice", Box::new(|t| t[0].slice_axis(1, 1, 2).mul(&t[0].slice_axis(1, 0, 2)).sum_all()), vec![vec![3, 4]]),
            ("reshape", Box::new(|t| t[0].reshape(&[6]).mul(&t[0].reshape(&[6])).sum_all()), vec![vec![2, 3]]),
            ("swap01", Box::new(|t| {
                let w = Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| i as f64 * 0.1).collect());
                t[0].swap01().mul(&w).sum_all()
            }), vec![vec![2, 3, 2]]),
            ("gather", Box::new(|t| t[0].gather_rows(&[2, 0, 2, 1]).mul(&t[0].gather_rows(&[1, 1, 0, 2])).sum_all()), vec![vec![3, 3]]),
            ("add_row_vec", Box::new(|t| t[0].add_row_vec(&t[1]).mul(&t[0].add_row_vec(&t[1])).sum_all()), vec![vec![3, 4], vec![4]]),
            ("row_scale", Box::new(|t| t[0].row_scale(&t[1]).mul(&t[0].row_scale(&t[1])).sum_all()), vec![vec![3, 4], vec![3]]),
            ("col_scale", Box::new(|t| t[0].col_scale(&t[1]).mul(&t[0].col_scale(&t[1])).sum_all()), vec![vec![3, 4], vec![4]]),
            ("sum_axis0", Box::new(|t| {
                let s = t[0].sum_axis2d(0);
                s.mul(&s).sum_all()
            }), vec![vec![3, 4]]),
            ("sum_axis1", Box::new(|t| {
                let s = t[0].sum_axis2d(1);
                s.mul(&s).sum_all()
            }), vec![vec![3, 4]]),
            ("l1", Box::new(|t| t[0].l1(&t[1])), vec![vec![3, 4], vec![3, 4]]),
        ];
        for (name, f, shapes) in cases {
            let inputs: Vec<(&str, Vec<usize>, Vec<f64>)> = shapes
                .iter()
                .map(|shape| (name, shape.clone(), randv(&mut rng, shape.iter().product())))
                .collect();
            for report in check_gradients(&inputs, f.as_ref(), h) {
                assert!(
                    report.max_err < tol,
                    "{name}: max grad error {} at coord {} (analytic {}, numeric {})",
                    report.max_err,
                    report.worst_coord,
                    report.analytic,
                    report.numeric
                );
            }
        }
    }

    #[test]
    fn parallel_mode_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randv(&mut rng, 64 * 48);
        let b = randv(&mut rng, 48 * 32);
        let ta = Tensor::from_vec(&[64, 48], a);
        let tb = Tensor::from_vec(&[48, 32], b);
        let serial = ta.matmul(&tb);
        crate::tensor::set_parallel(true);
        let par = ta.matmul(&tb);
        crate::tensor::set_parallel(false);
        assert_eq!(serial.data(), par.data());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 8),
            shift in -10.0f64..10.0,
        ) {
            let t = Tensor::from_vec(&[2, 4], xs.clone());
            let s = t.softmax(1);
            for r in 0..2 {
                let sum: f64 = s.data()[r * 4..(r + 1) * 4].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
            let shifted = Tensor::from_vec(&[2, 4], xs.iter().map(|v| v + shift).collect());
            let s2 = shifted.softmax(1);
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn concat_then_slices_recovers_parts(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 9),
        ) {
            let ta = Tensor::from_vec(&[3, 2], a.clone());
            let tb = Tensor::from_vec(&[3, 3], b.clone());
            let c = Tensor::concat(&[&ta, &tb], 1);
            let left = c.slice_axis(1, 0, 2);
            let right = c.slice_axis(1, 2, 3);
            prop_assert_eq!(left.data(), &a[..]);
            prop_assert_eq!(right.data(), &b[..]);
        }
    }
}
