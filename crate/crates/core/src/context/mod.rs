//! Context branches and the embedding head: global scene context (GSC),
//! local group context (LGC), squeeze-and-excitation gating, norm-aware
//! embedding (NAE) and the two aggregation variants.

use autograd::{concat, Conv2dSpec, ParamId, ParamStore, Tape, Tensor, Var};
use log::warn;
use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};

pub const CONTEXT_DIM: usize = 128;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Gsc,
    Lgc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeature {
    pub vector: Vec<f64>,
    pub kind: ContextKind,
}

impl ContextFeature {
    pub fn new(vector: Vec<f64>, kind: ContextKind) -> Result<Self> {
        if vector.len() != CONTEXT_DIM {
            return Err(Error::DimensionMismatch {
                expected: CONTEXT_DIM,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite {kind:?} context feature")));
        }
        Ok(Self { vector, kind })
    }
}

/// Unit-norm identity embedding of one detected person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonEmbedding {
    pub vector: Vec<f64>,
    /// Norm-derived person score from the embedding head.
    pub detection_score: f64,
    pub detection: Detection,
}

/// Two 1x1 convolutions (C -> C/2 -> 128) with a ReLU between, then a
/// global max pool. The output layer starts at the same small scale as the
/// identity projections.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    c1: Conv,
    c2: Conv,
}

impl ContextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let mid = (channels / 2).max(1);
        let one = Conv2dSpec::new(1, 1, 0);
        Self {
            c1: Conv::new(store, &format!("{name}.conv1"), (channels, mid), one, true, rng),
            c2: Conv::with_std(store, &format!("{name}.conv2"), (mid, CONTEXT_DIM), one, 0.01, rng),
        }
    }

    /// `[n, C, h, w] -> [n, 128]`
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = self.c1.forward(tape, store, x).relu();
        self.c2.forward(tape, store, y).global_max_pool()
    }
}

/// One scene vector for a whole feature map.
pub fn gsc_encode(enc: &ContextEncoder, store: &ParamStore, map: &FeatureMap) -> ContextFeature {
    let tape = Tape::inference();
    let v = enc.forward(&tape, store, map.to_var(&tape)).value();
    ContextFeature {
        vector: v.iter().copied().collect(),
        kind: ContextKind::Gsc,
    }
}

/// Element-wise max over each group of encoded rows; an empty group yields
/// the zero vector.
pub fn neighbour_max<'t>(encoded: Var<'t>, groups: &[Vec<usize>]) -> Var<'t> {
    encoded.group_max(groups)
}

/// Group context of box `target` among `roi: [n, C, r, r]` region features:
/// every other box is encoded and max-pooled.
pub fn lgc_encode(enc: &ContextEncoder, store: &ParamStore, roi: &Tensor, target: usize) -> Result<ContextFeature> {
    let n = roi.shape()[0];
    if target >= n {
        return Err(Error::OutOfRange { index: target, len: n });
    }
    let tape = Tape::inference();
    let encoded = enc.forward(&tape, store, tape.constant(roi.clone()));
    let group: Vec<usize> = (0..n).filter(|&i| i != target).collect();
    let v = neighbour_max(encoded, &[group]).value();
    ContextFeature::new(v.iter().copied().collect(), ContextKind::Lgc)
}

/// Channel gate `sigmoid(W2 relu(W1 x))` applied multiplicatively.
#[derive(Clone, Debug)]
pub struct SeAttention {
    pub w1: Linear,
    pub w2: Linear,
    dim: usize,
}

impl SeAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (dim / reduction.max(1)).max(1);
        Self {
            w1: Linear::new(store, &format!("{name}.fc1"), (dim, hidden), false, rng),
            w2: Linear::new(store, &format!("{name}.fc2"), (hidden, dim), false, rng),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gate<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let h = self.w1.forward(tape, store, x).relu();
        self.w2.forward(tape, store, h).sigmoid()
    }

    /// `[n, d] -> [n, d]`
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        self.gate(tape, store, x).mul(x)
    }
}

/// Gated copy of a single vector.
pub fn se_attention(se: &SeAttention, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != se.dim {
        return Err(Error::DimensionMismatch {
            expected: se.dim,
            got: x.len(),
        });
    }
    let tape = Tape::inference();
    let v = tape.constant(Tensor::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).unwrap());
    Ok(se.forward(&tape, store, v).value().iter().copied().collect())
}

/// Splits a feature into direction and a person score
/// `sigmoid(a * |x| + b)` with learnable scalars `a`, `b`.
#[derive(Clone, Debug)]
pub struct Nae {
    pub a: ParamId,
    pub b: ParamId,
}

impl Nae {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self {
            a: store.add(format!("{name}.scale"), autograd::full(&[1], 1.0)),
            b: store.add(format!("{name}.shift"), autograd::zeros(&[1])),
        }
    }

    /// `[n, d]` to unit rows `[n, d]` and scores `[n]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let norms = x.row_norms();
        if norms.value().iter().any(|&n| n <= NORM_EPS) {
            warn!("norm-aware embedding of a zero vector; direction floored");
        }
        let score = norms
            .scalar_affine(tape.param(store, self.a), tape.param(store, self.b))
            .sigmoid();
        (x.l2_normalize_rows(NORM_EPS), score)
    }
}

/// Direction and score of one vector. The zero vector has no direction.
pub fn nae_embed(nae: &Nae, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        warn!("norm-aware embedding of a zero vector");
        return Err(Error::Numeric("zero vector has no direction".into()));
    }
    let tape = Tape::inference();
    let v = tape.constant(Tensor::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).unwrap());
    let (d, s) = nae.forward(&tape, store, v);
    Ok((d.value().iter().copied().collect(), s.item()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeaVariant {
    /// Concatenate, gate, then embed.
    #[default]
    Implicit,
    /// Embed each part, concatenate, gate, renormalise.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub gsc: bool,
    pub lgc: bool,
    pub aea: AeaVariant,
    pub se_reduction: usize,
    /// Gate the fused feature; off reduces the head to plain NAE.
    pub se: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            gsc: true,
            lgc: true,
            aea: AeaVariant::Implicit,
            se_reduction: 16,
            se: true,
        }
    }
}

impl ContextConfig {
    pub fn none() -> Self {
        Self {
            gsc: false,
            lgc: false,
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self, reid_dim: usize) -> usize {
        reid_dim + CONTEXT_DIM * (self.gsc as usize + self.lgc as usize)
    }

    fn any(&self) -> bool {
        self.gsc || self.lgc
    }
}

/// Fuses the raw identity feature with the enabled context features into a
/// unit embedding and a person score. Without context it is a plain NAE of
/// the identity feature.
#[derive(Clone, Debug)]
pub struct AeaHead {
    pub config: ContextConfig,
    se: Option<SeAttention>,
    nae: Nae,
    nae_gsc: Option<Nae>,
    nae_lgc: Option<Nae>,
    reid_dim: usize,
    context_dim: usize,
}

impl AeaHead {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ContextConfig, reid_dim: usize, rng: &mut R) -> Self {
        Self::with_dims(store, config, reid_dim, CONTEXT_DIM, rng)
    }

    /// As [`AeaHead::new`] with context parts of width `context_dim`.
    pub fn with_dims<R: Rng>(
        store: &mut ParamStore,
        config: &ContextConfig,
        reid_dim: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dim = reid_dim + context_dim * (config.gsc as usize + config.lgc as usize);
        let se = (config.any() && config.se).then(|| SeAttention::new(store, "aea.se", dim, config.se_reduction, rng));
        let explicit = config.aea == AeaVariant::Explicit;
        Self {
            config: config.clone(),
            se,
            nae: Nae::new(store, "aea.nae"),
            nae_gsc: (explicit && config.gsc).then(|| Nae::new(store, "aea.nae_gsc")),
            nae_lgc: (explicit && config.lgc).then(|| Nae::new(store, "aea.nae_lgc")),
            reid_dim,
            context_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.reid_dim + self.context_dim * (self.config.gsc as usize + self.config.lgc as usize)
    }

    pub fn se(&self) -> Option<&SeAttention> {
        self.se.as_ref()
    }

    /// `f_reid: [n, 256]`, context parts `[n, 128]` (required exactly when
    /// enabled). Returns `([n, D] unit rows, [n] scores)`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        f_reid: Var<'t>,
        f_gsc: Option<Var<'t>>,
        f_lgc: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let check = |v: &Var<'t>, d: usize| {
            let got = v.shape()[1];
            if got == d {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: d, got })
            }
        };
        check(&f_reid, self.reid_dim)?;
        let gsc = self.part(f_gsc, self.config.gsc, "scene")?;
        let lgc = self.part(f_lgc, self.config.lgc, "group")?;
        for v in gsc.iter().chain(lgc.iter()) {
            check(v, self.context_dim)?;
        }
        match self.config.aea {
            AeaVariant::Implicit => {
                let mut parts = vec![f_reid];
                parts.extend(gsc);
                parts.extend(lgc);
                let x = if parts.len() == 1 { f_reid } else { concat(&parts, 1) };
                let x = match &self.se {
                    Some(se) => se.forward(tape, store, x),
                    None => x,
                };
                Ok(self.nae.forward(tape, store, x))
            }
            AeaVariant::Explicit => {
                let (d_reid, score) = self.nae.forward(tape, store, f_reid);
                if !self.config.any() {
                    return Ok((d_reid, score));
                }
                let mut parts = vec![d_reid];
                if let (Some(v), Some(n)) = (gsc, &self.nae_gsc) {
                    parts.push(n.forward(tape, store, v).0);
                }
                if let (Some(v), Some(n)) = (lgc, &self.nae_lgc) {
                    parts.push(n.forward(tape, store, v).0);
                }
                let x = concat(&parts, 1);
                let x = match &self.se {
                    Some(se) => se.forward(tape, store, x),
                    None => x,
                };
                Ok((x.l2_normalize_rows(NORM_EPS), score))
            }
        }
    }

    fn part<'t>(&self, v: Option<Var<'t>>, enabled: bool, what: &str) -> Result<Option<Var<'t>>> {
        match (v, enabled) {
            (Some(v), true) => Ok(Some(v)),
            (None, false) => Ok(None),
            (Some(_), false) => Err(Error::Config(format!("{what} context given but disabled"))),
            (None, true) => Err(Error::Config(format!("{what} context enabled but missing"))),
        }
    }
}

fn row<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(Tensor::from_shape_vec(IxDyn(&[1, v.len()]), v.to_vec()).unwrap())
}

/// Embedding of one person from its three features.
pub fn aea_embed(
    head: &AeaHead,
    store: &ParamStore,
    f_reid: &[f64],
    f_gsc: Option<&[f64]>,
    f_lgc: Option<&[f64]>,
) -> Result<(Vec<f64>, f64)> {
    let tape = Tape::inference();
    let (e, s) = head.forward(
        &tape,
        store,
        row(&tape, f_reid),
        f_gsc.map(|v| row(&tape, v)),
        f_lgc.map(|v| row(&tape, v)),
    )?;
    Ok((e.value().iter().copied().collect(), s.item()))
}

fn require_variant(head: &AeaHead, v: AeaVariant) -> Result<()> {
    if head.config.aea == v {
        Ok(())
    } else {
        Err(Error::Config(format!("head is {:?}, not {v:?}", head.config.aea)))
    }
}

/// Concatenate, gate and embed: `NAE(SE([f_reid, f_gsc, f_lgc]))`.
pub fn aea_implicit(head: &AeaHead, store: &ParamStore, f_reid: &[f64], f_gsc: &[f64], f_lgc: &[f64]) -> Result<(Vec<f64>, f64)> {
    require_variant(head, AeaVariant::Implicit)?;
    aea_embed(head, store, f_reid, Some(f_gsc), Some(f_lgc))
}

/// Embed each part, concatenate, gate and renormalise; the score comes from
/// the identity part.
pub fn aea_explicit(head: &AeaHead, store: &ParamStore, f_reid: &[f64], f_gsc: &[f64], f_lgc: &[f64]) -> Result<(Vec<f64>, f64)> {
    require_variant(head, AeaVariant::Explicit)?;
    aea_embed(head, store, f_reid, Some(f_gsc), Some(f_lgc))
}
