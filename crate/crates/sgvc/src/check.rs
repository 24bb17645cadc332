//! Finite-difference utilities used to verify analytic gradients.
//!
//! The central-difference estimate here is the independent reference every
//! backward pass in this crate is checked against; it never calls into the
//! backward code itself.

/// Central difference of `eval` w.r.t. coordinate `i` of `x`, using the
/// realized single-precision step as the denominator.
pub fn central_diff(eval: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], i: usize, h: f32) -> f64 {
    let mut xp = x.to_vec();
    let hi = x[i] + h;
    let lo = x[i] - h;
    xp[i] = hi;
    let fp = eval(&xp);
    xp[i] = lo;
    let fm = eval(&xp);
    (fp - fm) / (hi as f64 - lo as f64)
}

/// Full finite-difference gradient.
pub fn fd_gradient(eval: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], h: f32) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff(eval, x, i, h)).collect()
}

/// Relative error between two gradient vectors:
/// `||a - n|| / max(||a||, ||n||)`, with a small floor against zero vectors.
pub fn vector_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut d2 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut n2 = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let a = *a as f64;
        d2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12)
}

/// Elementwise comparison with an absolute floor; single-precision forward
/// noise makes tiny components unresolvable by finite differences, so those
/// are held to `atol` instead of the relative bound.
pub fn elementwise_ok(analytic: &[f32], numeric: &[f64], rtol: f64, atol: f64) -> bool {
    analytic.iter().zip(numeric.iter()).all(|(a, n)| {
        let a = *a as f64;
        (a - n).abs() <= atol + rtol * a.abs().max(n.abs())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        let x = vec![1.0f32, -2.0, 0.5];
        let mut eval = |v: &[f32]| v.iter().map(|a| (*a as f64) * (*a as f64)).sum::<f64>();
        let analytic: Vec<f32> = x.iter().map(|a| 2.0 * a).collect();
        let numeric = fd_gradient(&mut eval, &x, 1e-3);
        assert!(vector_rel_err(&analytic, &numeric) < 1e-6);
        assert!(elementwise_ok(&analytic, &numeric, 1e-3, 1e-4));
    }
}
