//! Neural network building blocks on top of the tensor ops: convolution,
//! pooling, fully connected layers, lattice resampling, and point sampling.
//! Feature maps are `[h, w, c]`.

use crate::coords::CoordSpace;
use crate::tensor::{Back, Scalar, Tensor};
use rand::Rng;

/// Border handling for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Zero padding that preserves the spatial extents (odd kernels only).
    Same,
    /// No padding; the output shrinks by k-1 per axis.
    Valid,
}

/// Interpolation kernel for [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Unfolds k-by-k patches into rows: one row per output position, columns
/// ordered tap-major with channels contiguous per tap. Out-of-bounds taps
/// read as zero. Gradients scatter-add back through the table.
pub(crate) fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "im2col: need rank 3, got {:?}", x.shape());
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(
        h + 2 * pad >= k && w + 2 * pad >= k,
        "im2col: kernel {k} exceeds padded input {h}x{w} (pad {pad})"
    );
    assert_eq!(
        (h + 2 * pad - k) % stride,
        0,
        "im2col: height {h} with pad {pad} not compatible with kernel {k} stride {stride}"
    );
    assert_eq!((w + 2 * pad - k) % stride, 0, "im2col: width {w} incompatible");
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let taps = k * k;

    // flat source index per (output position, tap); -1 marks padding
    let mut table = vec![-1i64; oh * ow * taps];
    for oi in 0..oh {
        for oj in 0..ow {
            for ti in 0..k {
                for tj in 0..k {
                    let si = (oi * stride + ti) as i64 - pad as i64;
                    let sj = (oj * stride + tj) as i64 - pad as i64;
                    if si >= 0 && si < h as i64 && sj >= 0 && sj < w as i64 {
                        table[(oi * ow + oj) * taps + ti * k + tj] = si * w as i64 + sj;
                    }
                }
            }
        }
    }

    let xd = x.data();
    let mut out = vec![T::ZERO; oh * ow * taps * c];
    for (row, chunk) in out.chunks_mut(taps * c).enumerate() {
        for t in 0..taps {
            let src = table[row * taps + t];
            if src >= 0 {
                let s = src as usize * c;
                chunk[t * c..(t + 1) * c].copy_from_slice(&xd[s..s + c]);
            }
        }
    }
    Tensor::from_op(
        vec![oh * ow, taps * c],
        out,
        vec![x.clone()],
        Box::new(move |ctx: &Back<T>| {
            ctx.parents[0].acc_grad(|g| {
                for row in 0..oh * ow {
                    for t in 0..taps {
                        let src = table[row * taps + t];
                        if src >= 0 {
                            let s = src as usize * c;
                            let o = (row * taps + t) * c;
                            for ch in 0..c {
                                g[s + ch] += ctx.grad[o + ch];
                            }
                        }
                    }
                }
            });
        }),
    )
}

/// 2D convolution (cross-correlation) with stride 1. Weights are
/// `[k, k, c_in, c_out]`, bias `[c_out]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: Pad) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "conv2d: input must be rank 3, got {:?}", x.shape());
    assert_eq!(w.shape().len(), 4, "conv2d: weights must be rank 4, got {:?}", w.shape());
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, k2, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(k, k2, "conv2d: kernel must be square, got {:?}", w.shape());
    assert_eq!(
        cin, wcin,
        "conv2d: input has {cin} channels but weights expect {wcin}"
    );
    assert_eq!(b.shape(), &[cout], "conv2d: bias shape {:?} vs {cout} outputs", b.shape());

    let wm = w.reshape(&[k * k * cin, cout]);
    if k == 1 {
        let flat = x.reshape(&[h * wd, cin]);
        return flat.matmul(&wm).add_row_vec(b).reshape(&[h, wd, cout]);
    }
    let padn = match pad {
        Pad::Same => {
            assert!(k % 2 == 1, "conv2d: same padding needs an odd kernel, got {k}");
            (k - 1) / 2
        }
        Pad::Valid => 0,
    };
    let (oh, ow) = (h + 2 * padn - k + 1, wd + 2 * padn - k + 1);
    im2col(x, k, 1, padn)
        .matmul(&wm)
        .add_row_vec(b)
        .reshape(&[oh, ow, cout])
}

/// 3x3 max pooling with stride 1. Borders replicate, which is the same as
/// taking the window max over clamped indices. Ties route the gradient to
/// the first element in row-major window order.
pub fn maxpool3x3<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "maxpool3x3: need rank 3, got {:?}", x.shape());
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    let mut argmax = vec![0u32; xd.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut best = T::ZERO;
                let mut best_src = usize::MAX;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        let src = (ii * w + jj) * c + ch;
                        if best_src == usize::MAX || xd[src] > best {
                            best = xd[src];
                            best_src = src;
                        }
                    }
                }
                let dst = (i * w + j) * c + ch;
                out[dst] = best;
                argmax[dst] = best_src as u32;
            }
        }
    }
    Tensor::from_op(
        vec![h, w, c],
        out,
        vec![x.clone()],
        Box::new(move |ctx: &Back<T>| {
            ctx.parents[0].acc_grad(|g| {
                for (dst, &src) in argmax.iter().enumerate() {
                    g[src as usize] += ctx.grad[dst];
                }
            });
        }),
    )
}

/// Fully connected layer over rows: `x . w + b` with x `[rows, d_in]`,
/// w `[d_in, d_out]`, b `[d_out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    x.matmul(w).add_row_vec(b)
}

/// Spatial mean per channel, `[h, w, c]` to `[c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "global_avg_pool: need rank 3, got {:?}", x.shape());
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(&[h * w, c])
        .sum_axis2d(0)
        .scale(T::ONE / T::from_f64((h * w) as f64))
}

fn cubic(x: f64) -> f64 {
    // two-parameter-free cubic kernel, a = -0.5
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Dense interpolation matrix `[n_out, n_in]` for one axis under the
/// align-centers convention: output pixel i reads the continuous source
/// position (i + 0.5) * n_in / n_out - 0.5. Taps clamp at the borders, so
/// rows always sum to 1 and equal extents give the exact identity.
fn axis_weights<T: Scalar>(n_in: usize, n_out: usize, mode: Resample) -> Tensor<T> {
    let mut m = vec![T::ZERO; n_out * n_in];
    let clamp = |i: i64| i.clamp(0, n_in as i64 - 1) as usize;
    for i in 0..n_out {
        let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let row = &mut m[i * n_in..(i + 1) * n_in];
        match mode {
            Resample::Nearest => {
                row[clamp((src + 0.5).floor() as i64)] = T::ONE;
            }
            Resample::Bilinear => {
                let i0 = src.floor();
                let t = src - i0;
                row[clamp(i0 as i64)] += T::from_f64(1.0 - t);
                row[clamp(i0 as i64 + 1)] += T::from_f64(t);
            }
            Resample::Bicubic => {
                let i0 = src.floor();
                let t = src - i0;
                for tap in -1i64..=2 {
                    let wgt = cubic(t - tap as f64);
                    row[clamp(i0 as i64 + tap)] += T::from_f64(wgt);
                }
            }
        }
    }
    Tensor::from_vec(&[n_out, n_in], m)
}

/// Resamples `[h, w, c]` to `[h_out, w_out, c]`, separably per axis.
/// Differentiable with respect to `x`.
pub fn resample<T: Scalar>(x: &Tensor<T>, h_out: usize, w_out: usize, mode: Resample) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "resample: need rank 3, got {:?}", x.shape());
    assert!(h_out > 0 && w_out > 0, "resample: empty target {h_out}x{w_out}");
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rh = axis_weights::<T>(h, h_out, mode);
    let rw = axis_weights::<T>(w, w_out, mode);
    let rows = rh.matmul(&x.reshape(&[h, w * c])).reshape(&[h_out, w, c]);
    rw.matmul(&rows.swap01().reshape(&[w, h_out * c]))
        .reshape(&[w_out, h_out, c])
        .swap01()
}

/// Feature rows at the lattice centers nearest to each query point.
/// Differentiable with respect to `x`; the points are data.
pub fn sample_nearest<T: Scalar>(x: &Tensor<T>, points: &[(f64, f64)]) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "sample_nearest: need rank 3, got {:?}", x.shape());
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let space = CoordSpace::new(h, w);
    let idx: Vec<usize> = points
        .iter()
        .map(|&p| {
            let (i, j) = space.nearest(p);
            space.flat(i, j)
        })
        .collect();
    x.reshape(&[h * w, c]).gather_rows(&idx)
}

/// Bilinear interpolation of an `[h, w, c]` map at continuous points,
/// computed outside the graph. Returns `points.len() * c` values.
pub fn sample_bilinear_values<T: Scalar>(x: &Tensor<T>, points: &[(f64, f64)]) -> Vec<T> {
    assert_eq!(x.shape().len(), 3, "sample_bilinear_values: need rank 3, got {:?}", x.shape());
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = Vec::with_capacity(points.len() * c);
    for &(y, xq) in points {
        let py = (y + 1.0) / 2.0 * h as f64 - 0.5;
        let px = (xq + 1.0) / 2.0 * w as f64 - 0.5;
        let (i0, j0) = (py.floor(), px.floor());
        let (ty, tx) = (py - i0, px - j0);
        let ci = |v: f64| (v.max(0.0) as usize).min(h - 1);
        let cj = |v: f64| (v.max(0.0) as usize).min(w - 1);
        let (ia, ib) = (ci(i0), ci(i0 + 1.0));
        let (ja, jb) = (cj(j0), cj(j0 + 1.0));
        for ch in 0..c {
            let at = |i: usize, j: usize| xd[(i * w + j) * c + ch].to_f64();
            let top = at(ia, ja) * (1.0 - tx) + at(ia, jb) * tx;
            let bot = at(ib, ja) * (1.0 - tx) + at(ib, jb) * tx;
            out.push(T::from_f64(top * (1.0 - ty) + bot * ty));
        }
    }
    out
}

/// Uniform Kaiming initialisation with the ReLU gain: bound sqrt(6/fan_in).
pub fn kaiming_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    assert!(fan_in > 0, "kaiming_uniform: fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::param(shape, data)
}

/// 3x3 / 1x1 convolution layer with same padding and zero bias at init.
pub struct Conv2d<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(rng: &mut impl Rng, k: usize, c_in: usize, c_out: usize) -> Self {
        Conv2d {
            w: kaiming_uniform(rng, &[k, k, c_in, c_out], k * k * c_in),
            b: Tensor::param(&[c_out], vec![T::ZERO; c_out]),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        conv2d(x, &self.w, &self.b, Pad::Same)
    }
}

/// Fully connected layer with zero bias at init.
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: kaiming_uniform(rng, &[d_in, d_out], d_in),
            b: Tensor::param(&[d_out], vec![T::ZERO; d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        linear(x, &self.w, &self.b)
    }
}
