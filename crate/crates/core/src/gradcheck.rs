//! Central finite differences for checking analytic gradients.

use crate::error::Result;
use crate::scalar::Scalar;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_differences<T: Scalar>(
    x: &[T],
    step: T,
    mut f: impl FnMut(&[T]) -> Result<T>,
) -> Result<Vec<T>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (step + step));
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vectors are zero.
pub fn relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a.as_f64() - b.as_f64()));
    let scale = norm(&mut analytic.iter().map(|a| a.as_f64())).max(norm(&mut numeric.iter().map(|b| b.as_f64())));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Step size suited to the scalar's precision for central differences.
pub fn default_step<T: Scalar>() -> T {
    T::epsilon().cbrt()
}
