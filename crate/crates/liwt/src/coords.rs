//! Continuous coordinate conventions shared by sampling, the attention
//! head, and the data pipeline.
//!
//! An h-by-w lattice lives in the square [-1, 1] x [-1, 1]. Pixel (i, j)
//! sits at the center of its cell:
//!
//! ```text
//! y_i = -1 + (2 i + 1) / h        x_j = -1 + (2 j + 1) / w
//! ```
//!
//! The first coordinate runs down the rows. Low-resolution features and
//! high-resolution queries share this square, so a query is decoded against
//! whichever lattice it is paired with.

/// Extents of a lattice over the shared [-1, 1] square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordSpace {
    pub h: usize,
    pub w: usize,
}

impl CoordSpace {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0, "CoordSpace: extents must be positive, got {h}x{w}");
        CoordSpace { h, w }
    }

    /// Continuous center of pixel (i, j).
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            -1.0 + (2 * i + 1) as f64 / self.h as f64,
            -1.0 + (2 * j + 1) as f64 / self.w as f64,
        )
    }

    /// Index of the lattice center nearest to a continuous point. Exact
    /// midpoints resolve toward the larger index.
    pub fn nearest(&self, p: (f64, f64)) -> (usize, usize) {
        (
            nearest_1d(p.0, self.h),
            nearest_1d(p.1, self.w),
        )
    }

    /// Row-major flat index.
    pub fn flat(&self, i: usize, j: usize) -> usize {
        i * self.w + j
    }
}

fn nearest_1d(x: f64, n: usize) -> usize {
    let i = ((x + 1.0) * n as f64 / 2.0).floor();
    i.clamp(0.0, (n - 1) as f64) as usize
}

/// The 3x3 lattice neighborhood around a query point.
///
/// Indices are clamped at the borders, so corner grids repeat edge cells.
/// Deltas are query-minus-center against the clamped centers, with each
/// component scaled by the matching lattice extent; for the true nearest
/// center both scaled components lie in [-1, 1].
#[derive(Debug, Clone)]
pub struct LocalGrid {
    pub center: (usize, usize),
    /// Row-major over rows {i-1, i, i+1} and columns {j-1, j, j+1}.
    pub indices: [(usize, usize); 9],
    pub deltas: [(f64, f64); 9],
}

pub fn local_grid(space: &CoordSpace, q: (f64, f64)) -> LocalGrid {
    let (ci, cj) = space.nearest(q);
    let mut indices = [(0usize, 0usize); 9];
    let mut deltas = [(0.0f64, 0.0f64); 9];
    for (r, di) in (-1i64..=1).enumerate() {
        for (c, dj) in (-1i64..=1).enumerate() {
            let i = (ci as i64 + di).clamp(0, space.h as i64 - 1) as usize;
            let j = (cj as i64 + dj).clamp(0, space.w as i64 - 1) as usize;
            let (cy, cx) = space.center(i, j);
            indices[r * 3 + c] = (i, j);
            deltas[r * 3 + c] = ((q.0 - cy) * space.h as f64, (q.1 - cx) * space.w as f64);
        }
    }
    LocalGrid {
        center: (ci, cj),
        indices,
        deltas,
    }
}

/// Query lattice for upscaling an h-by-w input by (s_h, s_w): the centers
/// of a floor(s_h h) by floor(s_w w) lattice, row-major.
pub fn hr_query_coords(h: usize, w: usize, s_h: f64, s_w: f64) -> (usize, usize, Vec<(f64, f64)>) {
    assert!(s_h > 0.0 && s_w > 0.0, "hr_query_coords: scales must be positive");
    let h_out = (s_h * h as f64).floor() as usize;
    let w_out = (s_w * w as f64).floor() as usize;
    assert!(h_out > 0 && w_out > 0, "hr_query_coords: empty output lattice");
    let space = CoordSpace::new(h_out, w_out);
    let mut coords = Vec::with_capacity(h_out * w_out);
    for i in 0..h_out {
        for j in 0..w_out {
            coords.push(space.center(i, j));
        }
    }
    (h_out, w_out, coords)
}

/// Height and width of one output pixel in the shared square.
pub fn cell(s_h: f64, s_w: f64, h: usize, w: usize) -> (f64, f64) {
    (2.0 / (s_h * h as f64), 2.0 / (s_w * w as f64))
}

/// Cell size scaled by the input lattice extents, the form the decoder
/// consumes. Depends on the scale alone: (2/s_h, 2/s_w).
pub fn cell_scaled(s_h: f64, s_w: f64) -> (f64, f64) {
    (2.0 / s_h, 2.0 / s_w)
}

/// Fourier position encoding of a 2-vector at `levels` octaves:
/// for each frequency 2^l, componentwise sin then cos, 4*levels values.
pub fn gamma(delta: (f64, f64), levels: usize, out: &mut Vec<f64>) {
    let mut f = 1.0f64;
    for _ in 0..levels {
        out.push((f * delta.0).sin());
        out.push((f * delta.0).cos());
        out.push((f * delta.1).sin());
        out.push((f * delta.1).cos());
        f *= 2.0;
    }
}
