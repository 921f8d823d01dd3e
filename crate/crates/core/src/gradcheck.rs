//! Central finite differences, the reference that analytic gradients are
//! checked against. Only forward evaluations are used here.

use crate::tensor::Element;

/// Step used by the gradient checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i` in `coords`
/// (all coordinates when `None`). `x` is restored before returning.
pub fn central_difference<T: Element>(
    x: &mut [T],
    step: f64,
    coords: Option<&[usize]>,
    mut f: impl FnMut(&[T]) -> f64,
) -> Vec<f64> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = T::from_f64_lossy(orig.as_f64() + step);
            let plus = f(x);
            x[i] = T::from_f64_lossy(orig.as_f64() - step);
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
