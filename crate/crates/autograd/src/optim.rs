use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tape::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay,
/// matching the update order `buf = m * buf + (g + wd * p); p -= lr * buf`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, grad) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, store.value(*id));
            }
            let buf = match self.buffers.get_mut(id) {
                Some(buf) => {
                    buf.mapv_inplace(|v| v * self.momentum);
                    *buf += &g;
                    buf
                }
                None => self.buffers.entry(*id).or_insert(g),
            };
            store.value_mut(*id).scaled_add(-lr, buf);
        }
    }

    /// Momentum buffers, sorted by parameter id.
    pub fn buffers(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self.buffers.iter().map(|(k, v)| (*k, v)).collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffers.insert(id, value);
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
