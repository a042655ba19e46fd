//! Central finite differences, the oracle every analytic gradient is
//! checked against.

use crate::element::Element;
use crate::error::Result;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F: Element>(
    mut f: impl FnMut(&[F]) -> Result<F>,
    x: &[F],
    h: F,
) -> Result<Vec<F>> {
    let mut probe = x.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}

/// Normwise relative error `|a - n|_2 / max(|a|_2, |n|_2)`.
///
/// Two all-zero vectors compare as exactly equal; otherwise the
/// denominator is floored at `1e-12` so vanishing gradients stay finite.
pub fn relative_error<F: Element>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let to = |v: &F| v.to_f64().unwrap_or(f64::NAN);
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| to(a) - to(n)));
    let scale = norm(&mut analytic.iter().map(to)).max(norm(&mut numeric.iter().map(to)));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-12)
    }
}
