//! Central finite differences, used by the test suites as the independent
//! oracle for analytic gradients.

use ndarray::ArrayD;

/// Numerically differentiate `f` at `x`, elementwise.
pub fn finite_diff<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let up = f(&probe);
        probe[&idx] = orig - eps;
        let down = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise relative error between two gradients. The denominator
/// is floored at a fraction of the overall gradient scale so FD rounding
/// noise on near-zero elements does not dominate.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-8);
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs()).max(1e-3 * scale);
            (x - y).abs() / denom
        })
        .fold(0.0, f64::max)
}
