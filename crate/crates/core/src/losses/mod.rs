//! Training objectives: box regression, the two person/background
//! classifiers, OIM identification and their weighted sum.

pub mod oim;

use autograd::{sigmoid, Var};
use log::warn;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use oim::{oim_forward, oim_loss, oim_probabilities, oim_update, OimConfig, OimState};

const PROB_EPS: f64 = 1e-7;

/// Element-wise smooth-L1: quadratic below `beta`, linear above.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Sum of smooth-L1 over all entries of `pred: [n, 4]` against `targets`.
pub fn smooth_l1_sum<'t>(pred: Var<'t>, targets: &[[f64; 4]], beta: f64) -> Var<'t> {
    let p = pred.value();
    assert_eq!(p.shape(), &[targets.len(), 4], "smooth_l1: prediction shape");
    let diffs: Vec<f64> = p
        .iter()
        .zip(targets.iter().flatten())
        .map(|(a, b)| a - b)
        .collect();
    let value: f64 = diffs.iter().map(|&d| smooth_l1(d, beta)).sum();
    let shape = p.shape().to_vec();
    pred.tape().custom(
        &[pred],
        ArrayD::from_elem(IxDyn(&[]), value),
        Box::new(move |g| {
            let s = *g.iter().next().unwrap();
            let grad: Vec<f64> = diffs.iter().map(|&d| s * smooth_l1_grad(d, beta)).collect();
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), grad).unwrap())]
        }),
    )
}

/// Box regression loss over positive samples: smooth-L1 (beta 1) summed
/// over the four offsets and averaged over positives. No positives gives 0.
pub fn smooth_l1_reg<'t>(pred: Var<'t>, targets: &[[f64; 4]]) -> Var<'t> {
    if targets.is_empty() {
        warn!("regression loss with no positive samples; using 0");
        return pred.tape().scalar(0.0);
    }
    let n = targets.len() as f64;
    smooth_l1_sum(pred, targets, 1.0).scale(1.0 / n)
}

/// Two-class softmax cross-entropy averaged over samples.
/// `logits: [n, 2]` (background, person); `targets[i]` is 1 for person.
pub fn cls_loss_first<'t>(logits: Var<'t>, targets: &[f64]) -> Var<'t> {
    let z = logits.value();
    let n = targets.len();
    assert_eq!(z.shape(), &[n, 2], "cls_loss_first: logits shape");
    let mut probs = Vec::with_capacity(2 * n);
    let mut value = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let (a, b) = (z[[i, 0]], z[[i, 1]]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let cls = (t >= 0.5) as usize;
        value -= z[[i, cls]] - lse;
        probs.push((a - lse).exp());
        probs.push((b - lse).exp());
    }
    let inv = 1.0 / n.max(1) as f64;
    let targets = targets.to_vec();
    logits.tape().custom(
        &[logits],
        ArrayD::from_elem(IxDyn(&[]), value * inv),
        Box::new(move |g| {
            let s = *g.iter().next().unwrap() * inv;
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d[2 * i + (t >= 0.5) as usize] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= s);
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[targets.len(), 2]), d).unwrap())]
        }),
    )
}

/// Binary cross-entropy on logits, averaged over samples.
pub fn bce_with_logits<'t>(logits: Var<'t>, targets: &[f64]) -> Var<'t> {
    let z = logits.value();
    assert_eq!(z.len(), targets.len(), "bce: one target per logit");
    let n = targets.len().max(1) as f64;
    let value: f64 = z
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    let zs: Vec<f64> = z.iter().copied().collect();
    let shape = z.shape().to_vec();
    let targets = targets.to_vec();
    logits.tape().custom(
        &[logits],
        ArrayD::from_elem(IxDyn(&[]), value / n),
        Box::new(move |g| {
            let s = *g.iter().next().unwrap() / n;
            let d: Vec<f64> = zs.iter().zip(&targets).map(|(&z, &t)| s * (sigmoid(z) - t)).collect();
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), d).unwrap())]
        }),
    )
}

/// How the second-head classification term weighs its samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cls2Form {
    /// Each cross-entropy term is multiplied by its target `p*`, so only
    /// person samples contribute; the sum is still divided by all `N`.
    #[default]
    Literal,
    /// Ordinary binary cross-entropy over every sample.
    Conventional,
}

/// Person/background loss on norm-derived scores in `(0, 1)`.
pub fn cls_loss_second<'t>(scores: Var<'t>, targets: &[f64], form: Cls2Form) -> Var<'t> {
    let s = scores.value();
    assert_eq!(s.len(), targets.len(), "cls_loss_second: one target per score");
    let n = targets.len().max(1) as f64;
    let weight = move |t: f64| match form {
        Cls2Form::Literal => t,
        Cls2Form::Conventional => 1.0,
    };
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let value: f64 = s
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = clamp(p);
            -weight(t) * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    let ps: Vec<f64> = s.iter().copied().collect();
    let shape = s.shape().to_vec();
    let targets = targets.to_vec();
    scores.tape().custom(
        &[scores],
        ArrayD::from_elem(IxDyn(&[]), value / n),
        Box::new(move |g| {
            let k = *g.iter().next().unwrap() / n;
            let d: Vec<f64> = ps
                .iter()
                .zip(&targets)
                .map(|(&p, &t)| {
                    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                        return 0.0;
                    }
                    -k * weight(t) * (t / p - (1.0 - t) / (1.0 - p))
                })
                .collect();
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), d).unwrap())]
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub reg1: f64,
    pub cls1: f64,
    pub reg2: f64,
    pub cls2: f64,
    pub reid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg1: 10.0,
            cls1: 1.0,
            reg2: 1.0,
            cls2: 1.0,
            reid: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be a non-negative real")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("reg1", self.reg1),
            ("cls1", self.cls1),
            ("reg2", self.reg2),
            ("cls2", self.cls2),
            ("reid", self.reid),
        ]
    }
}

/// Values of the five weighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reg1: f64,
    pub cls1: f64,
    pub reg2: f64,
    pub cls2: f64,
    pub reid: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("reg1", self.reg1),
            ("cls1", self.cls1),
            ("reg2", self.reg2),
            ("cls2", self.cls2),
            ("reid", self.reid),
        ]
    }
}

/// Weighted sum of the components. A non-finite component is reported as
/// divergence.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    check_finite(&c.named())?;
    Ok(w.reg1 * c.reg1 + w.cls1 * c.cls1 + w.reg2 * c.reg2 + w.cls2 * c.cls2 + w.reid * c.reid)
}

pub fn check_finite(parts: &[(&str, f64)]) -> Result<()> {
    match parts.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::Divergence {
            component: name.to_string(),
        }),
        None => Ok(()),
    }
}

/// The differentiable counterpart of [`total_loss`] plus any extra
/// unit-weight terms.
pub struct LossTerms<'t> {
    pub reg1: Var<'t>,
    pub cls1: Var<'t>,
    pub reg2: Var<'t>,
    pub cls2: Var<'t>,
    pub reid: Var<'t>,
    pub extra: Vec<(&'static str, Var<'t>)>,
}

impl<'t> LossTerms<'t> {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            reg1: self.reg1.item(),
            cls1: self.cls1.item(),
            reg2: self.reg2.item(),
            cls2: self.cls2.item(),
            reid: self.reid.item(),
        }
    }

    pub fn combine(&self, w: &LossWeights) -> Result<Var<'t>> {
        check_finite(&self.components().named())?;
        let extra: Vec<(&str, f64)> = self.extra.iter().map(|(n, v)| (*n, v.item())).collect();
        check_finite(&extra)?;
        let mut total = self
            .reg1
            .scale(w.reg1)
            .add(self.cls1.scale(w.cls1))
            .add(self.reg2.scale(w.reg2))
            .add(self.cls2.scale(w.cls2))
            .add(self.reid.scale(w.reid));
        for (_, v) in &self.extra {
            total = total.add(*v);
        }
        Ok(total)
    }
}
