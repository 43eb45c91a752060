//! Finite-difference verification of backward rules.
//!
//! All checks run in f64: central differences with step h on the inputs of
//! a scalar-valued function, compared against the gradients produced by
//! [`Tensor::backward`].

use super::Tensor;

/// Central-difference gradient of `f` at `x`, one entry per coordinate.
pub fn numeric_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        g.push((hi - lo) / (2.0 * h));
    }
    g
}

/// Discrepancy measure between an analytic and a numeric derivative.
/// Behaves like a relative error for gradients of ordinary size and like an
/// absolute error below 1e-2, so finite-difference noise on near-zero
/// entries does not drown the signal.
pub fn grad_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-2)
}

/// Outcome of [`check_gradients`] for one input tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_err: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Builds leaf tensors from `inputs`, evaluates `f` to a scalar, and
/// compares every backward gradient entry against central differences.
/// Returns one report per input, in order.
pub fn check_gradients<F>(inputs: &[(&str, Vec<usize>, Vec<f64>)], f: F, h: f64) -> Vec<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(_, shape, data)| Tensor::param(shape, data.clone()))
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.len(), 1, "check_gradients: f must return a scalar");
    loss.backward();

    let eval = |idx: usize, coord: usize, value: f64| -> f64 {
        let probes: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, (_, shape, data))| {
                let mut d = data.clone();
                if i == idx {
                    d[coord] = value;
                }
                Tensor::param(shape, d)
            })
            .collect();
        f(&probes).item()
    };

    inputs
        .iter()
        .enumerate()
        .map(|(idx, (name, _, data))| {
            let analytic = leaves[idx]
                .grad()
                .unwrap_or_else(|| panic!("check_gradients: no gradient reached input {name}"));
            let mut report = GradReport {
                name: (*name).to_string(),
                max_err: 0.0,
                worst_coord: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (coord, &x0) in data.iter().enumerate() {
                let hi = eval(idx, coord, x0 + h);
                let lo = eval(idx, coord, x0 - h);
                let numeric = (hi - lo) / (2.0 * h);
                let err = grad_err(analytic[coord], numeric);
                if err >= report.max_err {
                    report.max_err = err;
                    report.worst_coord = coord;
                    report.analytic = analytic[coord];
                    report.numeric = numeric;
                }
            }
            report
        })
        .collect()
}
