//! Online instance matching: a lookup table of labeled identity prototypes
//! and a circular queue of unlabeled embeddings.

use autograd::Var;
use ndarray::{Array2, ArrayD, ArrayView1, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::Identity;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OimConfig {
    pub temperature: f64,
    pub momentum: f64,
    /// `None` picks the dataset default.
    pub queue_size: Option<usize>,
}

impl Default for OimConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0 / 30.0,
            momentum: 0.5,
            queue_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OimState {
    /// `[L, D]`, one prototype per labeled identity.
    pub lut: Array2<f64>,
    /// Rows that have received at least one update.
    pub seen: Vec<bool>,
    /// `[Q, D]` ring of unlabeled embeddings.
    pub cq: Array2<f64>,
    /// Number of queue slots written so far, saturating at `Q`.
    pub filled: usize,
    pub pointer: usize,
    pub temperature: f64,
    pub momentum: f64,
}

impl OimState {
    pub fn new(num_labeled: usize, dim: usize, queue_size: usize, temperature: f64, momentum: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("OIM temperature must be positive, got {temperature}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("OIM momentum must lie in [0, 1], got {momentum}")));
        }
        Ok(Self {
            lut: Array2::zeros((num_labeled, dim)),
            seen: vec![false; num_labeled],
            cq: Array2::zeros((queue_size, dim)),
            filled: 0,
            pointer: 0,
            temperature,
            momentum,
        })
    }

    /// A state whose table rows are all given and marked seen.
    pub fn with_lut(lut: Array2<f64>, queue_size: usize, temperature: f64, momentum: f64) -> Result<Self> {
        let mut s = Self::new(lut.nrows(), lut.ncols(), queue_size, temperature, momentum)?;
        s.seen = vec![true; lut.nrows()];
        s.lut = lut;
        Ok(s)
    }

    pub fn num_labeled(&self) -> usize {
        self.lut.nrows()
    }

    pub fn dim(&self) -> usize {
        self.lut.ncols()
    }

    pub fn queue_size(&self) -> usize {
        self.cq.nrows()
    }

    /// Rows taking part in the softmax for a sample of class `target`:
    /// seen table rows plus the target row, then written queue slots.
    /// Returns the rows and the target's position among them.
    fn candidates(&self, target: usize) -> (Vec<ArrayView1<'_, f64>>, usize) {
        let mut rows = Vec::with_capacity(self.num_labeled() + self.filled);
        let mut at = 0;
        for (i, r) in self.lut.rows().into_iter().enumerate() {
            if i == target {
                at = rows.len();
                rows.push(r);
            } else if self.seen[i] {
                rows.push(r);
            }
        }
        rows.extend(self.cq.rows().into_iter().take(self.filled));
        (rows, at)
    }

    fn check(&self, x: &[f64], label: u32) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let l = label as usize;
        if l >= self.num_labeled() {
            return Err(Error::OutOfRange {
                index: l,
                len: self.num_labeled(),
            });
        }
        Ok(l)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn logits(rows: &[ArrayView1<'_, f64>], x: &[f64], tau: f64) -> Vec<f64> {
    rows.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect()
}

/// Softmax over the candidate rows for a labeled sample, target row first
/// among the table entries as in [`OimState::candidates`].
pub fn oim_probabilities(state: &OimState, x: &[f64], label: u32) -> Result<Vec<f64>> {
    let l = state.check(x, label)?;
    let (rows, _) = state.candidates(l);
    Ok(softmax(&logits(&rows, x, state.temperature)))
}

/// Loss and gradient with respect to `x` for one embedding. Unlabeled
/// samples give zero loss and zero gradient.
pub fn oim_forward(state: &OimState, x: &[f64], label: Identity) -> Result<(f64, Vec<f64>)> {
    let Identity::Labeled(label) = label else {
        if x.len() != state.dim() {
            return Err(Error::DimensionMismatch {
                expected: state.dim(),
                got: x.len(),
            });
        }
        return Ok((0.0, vec![0.0; x.len()]));
    };
    let l = state.check(x, label)?;
    let (rows, at) = state.candidates(l);
    let p = softmax(&logits(&rows, x, state.temperature));
    let loss = -p[at].max(f64::MIN_POSITIVE).ln();
    let mut grad = vec![0.0; x.len()];
    for (j, r) in rows.iter().enumerate() {
        let w = (p[j] - (j == at) as u8 as f64) / state.temperature;
        for (g, v) in grad.iter_mut().zip(r.iter()) {
            *g += w * v;
        }
    }
    Ok((loss, grad))
}

/// Mean OIM loss over the labeled rows of `x: [n, D]`; zero when none are
/// labeled. The state is read, not written.
pub fn oim_loss<'t>(state: &OimState, x: Var<'t>, labels: &[Identity]) -> Result<Var<'t>> {
    let v = x.value();
    let s = v.shape().to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: s[0],
        });
    }
    let n_lab = labels.iter().filter(|l| l.is_labeled()).count();
    if n_lab == 0 {
        return Ok(x.tape().scalar(0.0));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(v.len());
    for (row, &label) in v.outer_iter().zip(labels) {
        let xr: Vec<f64> = row.iter().copied().collect();
        let (l, g) = oim_forward(state, &xr, label)?;
        total += l;
        grad.extend(g);
    }
    let inv = 1.0 / n_lab as f64;
    Ok(x.tape().custom(
        &[x],
        ArrayD::from_elem(IxDyn(&[]), total * inv),
        Box::new(move |g| {
            let k = *g.iter().next().unwrap() * inv;
            vec![Some(ArrayD::from_shape_vec(IxDyn(&s), grad.iter().map(|v| v * k).collect()).unwrap())]
        }),
    ))
}

/// Memory update after a step. Labeled: momentum blend into the table row
/// then renormalise (the first sighting copies `x`). Unlabeled: write at
/// the queue pointer and advance it.
pub fn oim_update(state: &mut OimState, x: &[f64], label: Identity) -> Result<()> {
    match label {
        Identity::Labeled(label) => {
            let l = state.check(x, label)?;
            let g = state.momentum;
            let mut row = state.lut.row_mut(l);
            let blended: Vec<f64> = if state.seen[l] {
                row.iter().zip(x).map(|(r, v)| g * r + (1.0 - g) * v).collect()
            } else {
                x.to_vec()
            };
            let norm = blended.iter().map(|v| v * v).sum::<f64>().sqrt();
            let src = if norm > 1e-12 { blended } else { x.to_vec() };
            let norm = if norm > 1e-12 {
                norm
            } else {
                x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
            };
            for (r, v) in row.iter_mut().zip(src) {
                *r = v / norm;
            }
            state.seen[l] = true;
        }
        Identity::Unlabeled => {
            if x.len() != state.dim() {
                return Err(Error::DimensionMismatch {
                    expected: state.dim(),
                    got: x.len(),
                });
            }
            let q = state.queue_size();
            if q == 0 {
                return Ok(());
            }
            let p = state.pointer;
            state.cq.row_mut(p).iter_mut().zip(x).for_each(|(r, v)| *r = *v);
            state.pointer = (p + 1) % q;
            state.filled = (state.filled + 1).min(q);
        }
    }
    Ok(())
}
