/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const FD_DENOM_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, FD_DENOM_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(FD_DENOM_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub coords_checked: usize,
}

/// Central-difference gradient of `f` at `at`.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, at: &[f64], step: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| central(&mut f, &mut x, i, step))
        .collect()
}

fn central<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &mut [f64], i: usize, step: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let up = f(x);
    x[i] = orig - step;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * step)
}

/// Compares an analytic gradient against central differences of `f`.
///
/// With `max_coords = Some(n)` and more than `n` coordinates, an evenly
/// strided subset of `max(n, 64)` coordinates is checked.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    analytic: &[f64],
    at: &[f64],
    step: f64,
    max_coords: Option<usize>,
) -> FdReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), at.len(), "gradient length differs from point");
    let n = at.len();
    let indices: Vec<usize> = match max_coords {
        Some(m) if n > m.max(64) => {
            let m = m.max(64);
            (0..m).map(|k| k * n / m).collect()
        }
        _ => (0..n).collect(),
    };
    let mut x = at.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        coords_checked: indices.len(),
    };
    for i in indices {
        let numeric = central(&mut f, &mut x, i, step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report
}
