//! Finite-difference oracles shared by unit tests.

pub fn central_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + h;
            let plus = f(&x);
            x[i] = point[i] - h;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}
