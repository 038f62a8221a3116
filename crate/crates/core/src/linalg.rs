//! Small dense-vector helpers. Everything in this crate is low-dimensional,
//! so plain slices beat pulling in a matrix library.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ||a||` together with the norm.
pub fn normalized(a: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(a);
    (a.iter().map(|v| v / n).collect(), n)
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
