//! Finite-difference helpers for verifying hand-written backward passes.

/// Central difference `(f(x + h) - f(x - h)) / 2h` for a function of one scalar.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Symmetric relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is zero from dividing by
/// rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x * x * x, 2.0, 1e-4);
        assert!(relative_error(12.0, d, 1e-12) < 1e-8);
    }
}
