//! Shared helpers for unit tests.

use autograd::gradcheck::{max_relative_error, numeric_gradient};
use autograd::{ParamId, ParamStore, Tape, Tensor, Var};

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-4;

/// Largest relative gap between the tape gradient of the scalar `f` at `x`
/// and its central difference.
pub fn grad_error(x: &Tensor, f: impl Fn(Var<'_>) -> Var<'_>) -> f64 {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(v);
    let g = tape
        .backward(out)
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.raw_dim()));
    let num = numeric_gradient(x, FD_STEP, |t| {
        let tape = Tape::inference();
        f(tape.constant(t.clone())).item()
    });
    max_relative_error(&g, &num, 1e-6)
}

/// The same comparison for every trainable parameter that reaches the
/// scalar `f`; returns the worst relative error.
pub fn param_grad_error<F>(store: &ParamStore, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
{
    let tape = Tape::new();
    let out = f(&tape, store);
    let analytic: Vec<(ParamId, Tensor)> = tape
        .backward(out)
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.clone()))
        .collect();
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, g) in analytic {
        if !store.get(id).trainable {
            continue;
        }
        let x = store.value(id).clone();
        let num = numeric_gradient(&x, FD_STEP, |t| {
            probe.set(id, t.clone());
            let tape = Tape::inference();
            f(&tape, &probe).item()
        });
        probe.set(id, x);
        worst = worst.max(max_relative_error(&g, &num, 1e-6));
    }
    worst
}
