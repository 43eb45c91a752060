//! Single-level 2D Haar transform over feature maps, applied per channel.
//!
//! The 1D analysis filters are L = (1, 1)/sqrt(2) and H = (-1, 1)/sqrt(2).
//! Their outer products give four 2x2 kernels, correlated at stride 2. The
//! first kernel index runs down the rows, so the vertical filter comes
//! first in each name:
//!
//! ```text
//! LL = 1/2 [ 1  1 ]   LH = 1/2 [ -1 -1 ]   HL = 1/2 [ -1  1 ]   HH = 1/2 [  1 -1 ]
//!          [ 1  1 ]            [  1  1 ]            [ -1  1 ]            [ -1  1 ]
//! ```
//!
//! LH is the vertical high-pass (it responds to horizontal edges), HL the
//! horizontal one. The filter bank is orthonormal: energy is preserved
//! across the four subbands and the inverse transform is the transpose.
//!
//! Spatial extents must be even; callers validate before user input ever
//! reaches these functions, so odd extents panic here.

use crate::nn::im2col;
use crate::tensor::{Back, Scalar, Tensor};

/// The four subbands of one analysis level, each `[h/2, w/2, c]`.
pub struct Bands<T: Scalar> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

/// Forward transform of an `[h, w, c]` map with even extents.
pub fn dwt<T: Scalar>(x: &Tensor<T>) -> Bands<T> {
    assert_eq!(x.shape().len(), 3, "dwt: need rank 3, got {:?}", x.shape());
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0, "dwt: height {h} is odd");
    assert!(w % 2 == 0, "dwt: width {w} is odd");

    // rows of blocks: per output position the four taps t00 t01 t10 t11,
    // channels contiguous per tap
    let blocks = im2col(x, 2, 2, 0);
    let tap = |t: usize| blocks.slice_axis(1, t * c, c);
    let (t00, t01, t10, t11) = (tap(0), tap(1), tap(2), tap(3));
    let half = T::from_f64(0.5);
    let shape = [h / 2, w / 2, c];

    let ll = t00.add(&t01).add(&t10).add(&t11).scale(half).reshape(&shape);
    let lh = t10.add(&t11).sub(&t00).sub(&t01).scale(half).reshape(&shape);
    let hl = t01.add(&t11).sub(&t00).sub(&t10).scale(half).reshape(&shape);
    let hh = t00.add(&t11).sub(&t01).sub(&t10).scale(half).reshape(&shape);
    Bands { ll, lh, hl, hh }
}

/// Inverse transform; exact up to rounding because the bank is orthonormal.
pub fn idwt<T: Scalar>(bands: &Bands<T>) -> Tensor<T> {
    let shape = bands.ll.shape().to_vec();
    assert_eq!(shape.len(), 3, "idwt: bands must be rank 3, got {shape:?}");
    for (name, b) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        assert_eq!(b.shape(), &shape[..], "idwt: band {name} shape {:?} vs ll {:?}", b.shape(), shape);
    }
    let (h2, w2, c) = (shape[0], shape[1], shape[2]);
    let n = h2 * w2;
    let half = T::from_f64(0.5);
    let flat = [n, c];
    let (ll, lh, hl, hh) = (
        bands.ll.reshape(&flat),
        bands.lh.reshape(&flat),
        bands.hl.reshape(&flat),
        bands.hh.reshape(&flat),
    );

    // transpose of the analysis bank, one tap per 2x2 corner
    let t00 = ll.sub(&lh).sub(&hl).add(&hh).scale(half);
    let t01 = ll.sub(&lh).add(&hl).sub(&hh).scale(half);
    let t10 = ll.add(&lh).sub(&hl).sub(&hh).scale(half);
    let t11 = ll.add(&lh).add(&hl).add(&hh).scale(half);
    interleave2x2(&t00, &t01, &t10, &t11, h2, w2, c)
}

/// Low band and the channel concatenation of the three high bands,
/// in the order lh, hl, hh.
pub fn split_freq<T: Scalar>(bands: &Bands<T>) -> (Tensor<T>, Tensor<T>) {
    let low = bands.ll.clone();
    let high = Tensor::concat(&[&bands.lh, &bands.hl, &bands.hh], 2);
    (low, high)
}

/// Share of total energy per subband, in the order ll, lh, hl, hh.
/// Sums to 1 unless the input is identically zero.
pub fn energy_shares<T: Scalar>(bands: &Bands<T>) -> [f64; 4] {
    let e = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>();
    let parts = [e(&bands.ll), e(&bands.lh), e(&bands.hl), e(&bands.hh)];
    let total: f64 = parts.iter().sum();
    if total == 0.0 {
        return [0.0; 4];
    }
    parts.map(|p| p / total)
}

/// Reassembles an `[2 h2, 2 w2, c]` map from its four per-corner taps,
/// each given as `[h2 * w2, c]`. A pure permutation.
fn interleave2x2<T: Scalar>(
    t00: &Tensor<T>,
    t01: &Tensor<T>,
    t10: &Tensor<T>,
    t11: &Tensor<T>,
    h2: usize,
    w2: usize,
    c: usize,
) -> Tensor<T> {
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![T::ZERO; h * w * c];
    let taps = [t00, t01, t10, t11];
    for (t, tensor) in taps.iter().enumerate() {
        assert_eq!(tensor.shape(), &[h2 * w2, c], "interleave2x2: tap {t} shape {:?}", tensor.shape());
        let (a, b) = (t / 2, t % 2);
        let d = tensor.data();
        for i in 0..h2 {
            for j in 0..w2 {
                let dst = ((2 * i + a) * w + 2 * j + b) * c;
                let src = (i * w2 + j) * c;
                out[dst..dst + c].copy_from_slice(&d[src..src + c]);
            }
        }
    }
    Tensor::from_op(
        vec![h, w, c],
        out,
        vec![t00.clone(), t01.clone(), t10.clone(), t11.clone()],
        Box::new(move |ctx: &Back<T>| {
            for (t, parent) in ctx.parents.iter().enumerate() {
                let (a, b) = (t / 2, t % 2);
                parent.acc_grad(|g| {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let src = ((2 * i + a) * w + 2 * j + b) * c;
                            let dst = (i * w2 + j) * c;
                            for ch in 0..c {
                                g[dst + ch] += ctx.grad[src + ch];
                            }
                        }
                    }
                });
            }
        }),
    )
}
