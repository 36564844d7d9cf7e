//! Parameterised layers over the autograd tape.

use autograd::{kaiming_normal, zeros, Conv2dSpec, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(&[cout, cin, k, k], cin * k * k, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), zeros(&[cout])));
        Self { weight, bias, spec }
    }

    /// Biased convolution with weights drawn from N(0, std^2).
    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        spec: Conv2dSpec,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let k = spec.kernel;
        let weight = store.add(format!("{name}.weight"), autograd::normal(&[cout, cin, k, k], std, rng));
        let bias = Some(store.add(format!("{name}.bias"), zeros(&[cout])));
        Self { weight, bias, spec }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        x.conv2d(w, b, self.spec)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        (din, dout): (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_normal(&[dout, din], din, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), zeros(&[dout])));
        Self { weight, bias }
    }

    /// A linear layer with weights drawn from N(0, std^2).
    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        (din, dout): (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), autograd::normal(&[dout, din], std, rng));
        let bias = Some(store.add(format!("{name}.bias"), zeros(&[dout])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        x.linear(w, b)
    }

    pub fn dims(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.value(self.weight).shape();
        (s[1], s[0])
    }
}

/// Batch normalisation with frozen statistics, folded into a per-channel
/// scale and shift.
#[derive(Clone, Debug)]
pub struct FrozenBn {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl FrozenBn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add_frozen(format!("{name}.scale"), autograd::full(&[channels], 1.0)),
            shift: store.add_frozen(format!("{name}.shift"), zeros(&[channels])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.channel_affine(tape.param(store, self.scale), tape.param(store, self.shift))
    }
}

/// Rows of a `[n, d]` tensor as a rank-2 owned array.
pub fn to_array2(t: &Tensor) -> ndarray::Array2<f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 tensor")
        .to_owned()
}
