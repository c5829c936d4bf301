use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)`, coordinate by
/// coordinate, and returns the worst relative error.
///
/// Runs in `f64` so that the finite differences are not dominated by
/// rounding.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(point.clone());
        let out = f(&mut g, v)?;
        g.scalar_value(out)
            .ok_or_else(|| TensorError::NonScalarLoss(g.shape(out).to_vec()))
    };

    let mut g = Graph::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let v = g.leaf(leaf);
    let out = f(&mut g, v)?;
    let mut grads = g.backward(out)?;
    let analytic = grads.take(v).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
