//! Central finite differences, used as an independent oracle for the tape.

/// Floor applied to the denominator of [`relative_error`]. Below it the
/// comparison is effectively absolute, since float64 central differences
/// carry roughly 1e-10 of rounding noise on O(1) losses.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for coordinate `i`, restoring `x`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let mut x = vec![2.0];
        let d = central_difference(&mut x, 0, 1e-5, |v| v[0].powi(3));
        assert!(relative_error(12.0, d) < 1e-8);
        assert_eq!(x[0], 2.0);
    }

    #[test]
    fn floor_protects_zero_gradients() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(0.0, 1e-12) < 1e-7);
    }
}
