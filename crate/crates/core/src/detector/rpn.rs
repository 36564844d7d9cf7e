//! Region proposal network over the shared feature map.

use autograd::{Conv2dSpec, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::AnchorConfig;
use super::boxes::{iou_matrix, nms, score_order, BoxCoder};
use super::targets::{sample_balanced, Assignment, TargetAssignment};
use crate::data::BBox;
use crate::losses::{bce_with_logits, smooth_l1_sum};
use crate::nn::Conv;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    pub anchors: AnchorConfig,
    pub pre_nms_top_n_train: usize,
    pub post_nms_top_n_train: usize,
    pub pre_nms_top_n_test: usize,
    pub post_nms_top_n_test: usize,
    pub nms_threshold: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
}

impl RpnConfig {
    /// Full-scale settings of the base two-head detector.
    pub fn standard() -> Self {
        Self {
            anchors: AnchorConfig {
                sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
                ratios: vec![0.5, 1.0, 2.0],
            },
            pre_nms_top_n_train: 12000,
            post_nms_top_n_train: 2000,
            pre_nms_top_n_test: 6000,
            post_nms_top_n_test: 300,
            nms_threshold: 0.7,
            fg_iou: 0.7,
            bg_iou: 0.3,
            batch_per_image: 256,
            positive_fraction: 0.5,
        }
    }

    /// Small images with upright persons of roughly 12x26 pixels.
    pub fn toy() -> Self {
        Self {
            anchors: AnchorConfig {
                sizes: vec![16.0, 24.0, 32.0],
                ratios: vec![1.5, 2.5],
            },
            pre_nms_top_n_train: 300,
            post_nms_top_n_train: 64,
            pre_nms_top_n_test: 300,
            post_nms_top_n_test: 32,
            nms_threshold: 0.7,
            fg_iou: 0.7,
            bg_iou: 0.3,
            batch_per_image: 64,
            positive_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rpn {
    conv: Conv,
    cls: Conv,
    reg: Conv,
    pub config: RpnConfig,
    coder: BoxCoder,
}

/// Raw head outputs for one image, flattened in anchor order.
pub struct RpnOutput<'t> {
    /// `[N]` objectness logits.
    pub objectness: Var<'t>,
    /// `[N, 4]` offsets from each anchor.
    pub deltas: Var<'t>,
    pub anchors: Vec<BBox>,
}

/// Scored proposals, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposals {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl Rpn {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, config: &RpnConfig, rng: &mut R) -> Self {
        let a = config.anchors.per_cell();
        Self {
            conv: Conv::with_std(store, "rpn.conv", (channels, channels), Conv2dSpec::new(3, 1, 1), 0.01, rng),
            cls: Conv::with_std(store, "rpn.cls", (channels, a), Conv2dSpec::new(1, 1, 0), 0.01, rng),
            // channel k * A + a holds offset k of template a
            reg: Conv::with_std(store, "rpn.reg", (channels, 4 * a), Conv2dSpec::new(1, 1, 0), 0.01, rng),
            config: config.clone(),
            coder: BoxCoder::new([1.0; 4]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, features: Var<'t>, stride: usize) -> RpnOutput<'t> {
        let s = features.shape();
        let (h, w) = (s[2], s[3]);
        let t = self.conv.forward(tape, store, features).relu();
        let n = self.config.anchors.per_cell() * h * w;
        let objectness = self.cls.forward(tape, store, t).reshape(&[n]);
        let deltas = self.reg.forward(tape, store, t).reshape(&[4, n]).transpose();
        RpnOutput {
            objectness,
            deltas,
            anchors: self.config.anchors.generate(h, w, stride),
        }
    }

    /// Decodes, clips, keeps the top pre-NMS candidates, suppresses at the
    /// configured threshold and returns at most the post-NMS count.
    pub fn proposals(&self, out: &RpnOutput<'_>, image_size: (f64, f64), training: bool) -> Proposals {
        let (pre, post) = if training {
            (self.config.pre_nms_top_n_train, self.config.post_nms_top_n_train)
        } else {
            (self.config.pre_nms_top_n_test, self.config.post_nms_top_n_test)
        };
        let logits = out.objectness.value();
        let deltas = out.deltas.value();
        let scores: Vec<f64> = logits.iter().map(|&z| autograd::sigmoid(z)).collect();
        let mut boxes = Vec::with_capacity(pre);
        let mut kept_scores = Vec::with_capacity(pre);
        for i in score_order(&scores).into_iter().take(pre) {
            let d = [deltas[[i, 0]], deltas[[i, 1]], deltas[[i, 2]], deltas[[i, 3]]];
            let b = self.coder.decode(&out.anchors[i], &d).clip(image_size.0, image_size.1);
            if b.width() >= 1e-3 && b.height() >= 1e-3 {
                boxes.push(b);
                kept_scores.push(scores[i]);
            }
        }
        let keep: Vec<usize> = nms(&boxes, &kept_scores, self.config.nms_threshold)
            .into_iter()
            .take(post)
            .collect();
        Proposals {
            boxes: keep.iter().map(|&i| boxes[i]).collect(),
            scores: keep.iter().map(|&i| kept_scores[i]).collect(),
        }
    }

    /// Anchor labels: positive at IoU >= fg or when an anchor is (one of)
    /// the best for some ground truth, negative below bg.
    pub fn assign(&self, anchors: &[BBox], gts: &[BBox]) -> TargetAssignment {
        let table = iou_matrix(anchors, gts);
        let mut best_for_gt = vec![0.0f64; gts.len()];
        for row in &table {
            for (g, &v) in row.iter().enumerate() {
                best_for_gt[g] = best_for_gt[g].max(v);
            }
        }
        let mut labels = Vec::with_capacity(anchors.len());
        let mut regression = Vec::with_capacity(anchors.len());
        let mut max_iou = Vec::with_capacity(anchors.len());
        for (a, row) in anchors.iter().zip(&table) {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let m = best.map_or(0.0, |b| b.1);
            max_iou.push(m);
            let low_quality = row
                .iter()
                .enumerate()
                .find(|&(g, &v)| v > 0.0 && v == best_for_gt[g])
                .map(|(g, _)| g);
            let label = match (best, low_quality) {
                (Some((g, v)), _) if v >= self.config.fg_iou => Some(g),
                (_, Some(g)) => Some(best.map_or(g, |b| b.0)),
                _ => None,
            };
            match label {
                Some(g) => {
                    labels.push(Assignment::Positive { gt: g });
                    regression.push(self.coder.encode(a, &gts[g]));
                }
                None => {
                    labels.push(if m < self.config.bg_iou {
                        Assignment::Negative
                    } else {
                        Assignment::Ignored
                    });
                    regression.push([0.0; 4]);
                }
            }
        }
        TargetAssignment {
            labels,
            regression,
            max_iou,
        }
    }

    /// Objectness and box losses over a balanced anchor sample. The box
    /// term is smooth-L1 (beta 1/9) summed over positives and divided by the
    /// sample size.
    pub fn loss<'t, R: Rng>(&self, out: &RpnOutput<'t>, gts: &[BBox], rng: &mut R) -> (Var<'t>, Var<'t>) {
        let t = self.assign(&out.anchors, gts);
        let (pos, neg) = sample_balanced(&t, self.config.batch_per_image, self.config.positive_fraction, rng);
        let tape = out.objectness.tape();
        let sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
        if sampled.is_empty() {
            return (tape.scalar(0.0), tape.scalar(0.0));
        }
        let targets: Vec<f64> = sampled.iter().map(|&i| t.labels[i].is_positive() as u8 as f64).collect();
        let cls = bce_with_logits(out.objectness.gather_rows(&sampled), &targets);
        let reg = if pos.is_empty() {
            tape.scalar(0.0)
        } else {
            let tg: Vec<[f64; 4]> = pos.iter().map(|&i| t.regression[i]).collect();
            smooth_l1_sum(out.deltas.gather_rows(&pos), &tg, 1.0 / 9.0).scale(1.0 / sampled.len() as f64)
        };
        (cls, reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::boxes::iou;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(post: usize) -> (ParamStore, Rpn) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = RpnConfig {
            post_nms_top_n_test: post,
            ..RpnConfig::toy()
        };
        let rpn = Rpn::new(&mut store, 8, &cfg, &mut rng);
        (store, rpn)
    }

    #[test]
    fn untrained_gives_exactly_k_clipped_proposals() {
        let (store, rpn) = setup(20);
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = tape.constant(autograd::normal(&[1, 8, 8, 8], 1.0, &mut rng));
        let out = rpn.forward(&tape, &store, f, 8);
        assert_eq!(out.anchors.len(), 6 * 64);
        assert_eq!(out.deltas.shape(), vec![384, 4]);
        let p = rpn.proposals(&out, (64.0, 64.0), false);
        assert_eq!(p.boxes.len(), 20);
        for b in &p.boxes {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0 && b.is_valid());
        }
        assert!(p.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_k_gives_nothing() {
        let (store, rpn) = setup(0);
        let tape = Tape::inference();
        let f = tape.constant(autograd::zeros(&[1, 8, 4, 4]));
        let out = rpn.forward(&tape, &store, f, 8);
        assert!(rpn.proposals(&out, (32.0, 32.0), false).boxes.is_empty());
    }

    #[test]
    fn delta_layout_follows_anchor_order() {
        // Perturb the bias of offset k=2 for template a=1 and check that
        // exactly that template's anchors move.
        let (mut store, rpn) = setup(10);
        let id = store.find("rpn.reg.bias").unwrap();
        store.value_mut(id)[[2 * 6 + 1]] = 0.5;
        let tape = Tape::inference();
        let f = tape.constant(autograd::zeros(&[1, 8, 2, 3]));
        let out = rpn.forward(&tape, &store, f, 8);
        let d = out.deltas.value();
        for i in 0..6 * 6 {
            let expect = if i / 6 == 1 { 0.5 } else { 0.0 };
            assert!((d[[i, 2]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn every_ground_truth_gets_an_anchor() {
        let (_, rpn) = setup(10);
        let anchors = rpn.config.anchors.generate(8, 8, 8);
        let gts = [BBox::new(3.0, 30.0, 14.0, 57.0), BBox::new(40.0, 2.0, 52.0, 27.0)];
        let t = rpn.assign(&anchors, &gts);
        for g in 0..2 {
            assert!(t.labels.iter().any(|l| *l == Assignment::Positive { gt: g }));
        }
        for (i, l) in t.labels.iter().enumerate() {
            if let Assignment::Positive { gt } = l {
                assert!(iou(&anchors[i], &gts[*gt]) > 0.0);
            }
        }
    }

    #[test]
    fn loss_is_finite_and_differentiable() {
        let (store, rpn) = setup(10);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = tape.constant(autograd::normal(&[1, 8, 8, 8], 1.0, &mut rng));
        let out = rpn.forward(&tape, &store, f, 8);
        let (c, r) = rpn.loss(&out, &[BBox::new(3.0, 30.0, 14.0, 57.0)], &mut rng);
        assert!(c.item().is_finite() && r.item() >= 0.0);
        let grads = tape.backward(c.add(r));
        assert!(!grads.param_grads().is_empty());
    }
}
