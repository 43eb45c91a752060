//! Image quality metrics over `[h, w, c]` tensors in `[0, 1]`.
//!
//! Both metrics clamp their inputs to `[0, 1]` first and accumulate in
//! `f64` regardless of the tensor's scalar type, so scores are stable
//! across the `f32`/`f64` builds.

use crate::tensor::{Scalar, Tensor};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn plane<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, Vec<f64>) {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "metrics expect [h, w, c], got {shape:?}");
    let data = t.data().iter().map(|v| v.to_f64().clamp(0.0, 1.0)).collect();
    (shape[0], shape[1], shape[2], data)
}

/// Peak signal-to-noise ratio in dB against a peak of 1.0, ignoring a
/// border of the given width on every side. Identical images score
/// positive infinity.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr: shape mismatch");
    let (h, w, c, xa) = plane(a);
    let (_, _, _, xb) = plane(b);
    assert!(
        h > 2 * border && w > 2 * border,
        "psnr: border {border} leaves nothing of a {h}x{w} image"
    );
    let mut sum = 0.0;
    for i in border..h - border {
        for j in border..w - border {
            for k in 0..c {
                let d = xa[(i * w + j) * c + k] - xb[(i * w + j) * c + k];
                sum += d * d;
            }
        }
    }
    let mse = sum / ((h - 2 * border) * (w - 2 * border) * c) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Drops a border of the given width from every side, the cropping
/// convention shared by all methods within one evaluation report.
pub fn crop_border<T: Scalar>(t: &Tensor<T>, border: usize) -> Tensor<T> {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "crop_border expects [h, w, c], got {shape:?}");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    assert!(
        h > 2 * border && w > 2 * border,
        "crop_border: border {border} leaves nothing of a {h}x{w} image"
    );
    let data = t.data();
    let mut out = Vec::with_capacity((h - 2 * border) * (w - 2 * border) * c);
    for i in border..h - border {
        for j in border..w - border {
            out.extend_from_slice(&data[(i * w + j) * c..(i * w + j + 1) * c]);
        }
    }
    Tensor::from_vec(&[h - 2 * border, w - 2 * border, c], out)
}

fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *t;
    }
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Valid-mode separable filtering: horizontal pass to [h, w-10], then
/// vertical to [h-10, w-10].
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let wo = w - (WINDOW - 1);
    let ho = h - (WINDOW - 1);
    let mut horiz = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * x[i * w + j + t];
            }
            horiz[i * wo + j] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * horiz[(i + t) * wo + j];
            }
            out[i * wo + j] = acc;
        }
    }
    out
}

/// Mean structural similarity with the usual 11x11 Gaussian window
/// (sigma 1.5, K1 0.01, K2 0.03, peak 1.0), valid windows only,
/// averaged over channels. Identical images score exactly 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim: shape mismatch");
    let (h, w, c, xa) = plane(a);
    let (_, _, _, xb) = plane(b);
    assert!(
        h >= WINDOW && w >= WINDOW,
        "ssim: image {h}x{w} is smaller than the {WINDOW}x{WINDOW} window"
    );
    let taps = gaussian_taps();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = h * w;
    let mut total = 0.0;
    for k in 0..c {
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        for p in 0..n {
            x[p] = xa[p * c + k];
            y[p] = xb[p * c + k];
        }
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(&x, h, w, &taps);
        let mu_y = filter_valid(&y, h, w, &taps);
        let m_xx = filter_valid(&xx, h, w, &taps);
        let m_yy = filter_valid(&yy, h, w, &taps);
        let m_xy = filter_valid(&xy, h, w, &taps);
        let mut sum = 0.0;
        for p in 0..mu_x.len() {
            let var_x = m_xx[p] - mu_x[p] * mu_x[p];
            let var_y = m_yy[p] - mu_y[p] * mu_y[p];
            let cov = m_xy[p] - mu_x[p] * mu_y[p];
            let lum = (2.0 * mu_x[p] * mu_y[p] + c1) / (mu_x[p] * mu_x[p] + mu_y[p] * mu_y[p] + c1);
            let con = (2.0 * cov + c2) / (var_x + var_y + c2);
            sum += lum * con;
        }
        total += sum / mu_x.len() as f64;
    }
    total / c as f64
}
