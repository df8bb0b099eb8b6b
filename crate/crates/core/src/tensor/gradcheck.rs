//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use super::Tensor;

/// Denominator floor for [`relative_error`]; below it, errors are measured
/// on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate of
/// every parameter tensor.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], eps: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut work = params.to_vec();
    let mut out: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            out[pi].data_mut()[ci] = central(&mut f, &mut work, pi, ci, eps);
        }
    }
    out
}

/// Central differences for selected `(param, coordinate)` pairs only.
pub fn finite_diff_coords<F>(mut f: F, params: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Vec<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut work = params.to_vec();
    coords
        .iter()
        .map(|&(pi, ci)| central(&mut f, &mut work, pi, ci, eps))
        .collect()
}

fn central<F>(f: &mut F, work: &mut [Tensor], pi: usize, ci: usize, eps: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let orig = work[pi].data()[ci];
    work[pi].data_mut()[ci] = orig + eps;
    let plus = f(work);
    work[pi].data_mut()[ci] = orig - eps;
    let minus = f(work);
    work[pi].data_mut()[ci] = orig;
    (plus - minus) / (2.0 * eps)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
