//! Central finite differences for checking analytic gradients in tests.
//!
//! Only forward evaluations are used here, so these helpers stay independent
//! of the reverse-mode path they are checking.

/// Numerical gradient of `f` at `x` with central differences of half-width
/// `step`.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest discrepancy between two gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

/// Checks every entry passes either `|a - n| <= abs_tol` or
/// `|a - n| / max(|a|, |n|) <= rel_tol`. Returns the worst relative
/// discrepancy among failing entries, or `Ok` with the worst overall.
pub fn compare(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Option<Discrepancy>, Discrepancy> {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut worst: Option<Discrepancy> = None;
    let mut worst_fail: Option<Discrepancy> = None;
    for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let relative = if scale > 0.0 { diff / scale } else { 0.0 };
        let d = Discrepancy {
            index,
            analytic: a,
            numeric: n,
            relative,
        };
        if worst.is_none_or(|w| relative > w.relative) {
            worst = Some(d);
        }
        let ok = diff <= abs_tol || relative <= rel_tol;
        if !ok && worst_fail.is_none_or(|w| relative > w.relative) {
            worst_fail = Some(d);
        }
    }
    match worst_fail {
        Some(d) => Err(d),
        None => Ok(worst),
    }
}
