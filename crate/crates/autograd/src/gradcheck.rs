//! Central finite differences for validating backward rules.

use crate::tape::Tensor;

/// Numerical gradient of `f` at `x` using central differences with step `h`.
pub fn numeric_gradient<F>(x: &Tensor, h: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.as_standard_layout().into_owned();
    let mut out = Tensor::zeros(x.raw_dim());
    for i in 0..x.len() {
        let orig = probe.as_slice_memory_order().unwrap()[i];
        probe.as_slice_memory_order_mut().unwrap()[i] = orig + h;
        let plus = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig - h;
        let minus = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig;
        out.as_slice_memory_order_mut().unwrap()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest relative error between two gradients, with `floor` guarding the
/// denominator for entries near zero.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
