//! Box geometry: IoU, non-maximum suppression and the offset parameterisation.

use std::cmp::Ordering;

use log::warn;

use crate::data::BBox;

/// Intersection over union. A zero-area box yields 0 with a warning.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        warn!("iou on degenerate box: {a} vs {b}");
        return 0.0;
    }
    iou_unchecked(a, b, aa, ab)
}

#[inline]
fn iou_unchecked(a: &BBox, b: &BBox, aa: f64, ab: f64) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

/// `[a.len()][b.len()]` IoU table. Degenerate boxes give 0 without warning.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| {
            let ax = x.area();
            b.iter()
                .map(|y| {
                    let ay = y.area();
                    if ax <= 0.0 || ay <= 0.0 {
                        0.0
                    } else {
                        iou_unchecked(x, y, ax, ay)
                    }
                })
                .collect()
        })
        .collect()
}

/// Score-descending order, ties by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

fn cmp_coords(a: &BBox, b: &BBox) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Greedy NMS. Returns kept indices in score-descending order; equal
/// scores are ranked by box coordinates, so the kept boxes do not depend on
/// input order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: one score per box");
    let areas: Vec<f64> = boxes.iter().map(|b| b.area()).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then_with(|| cmp_coords(&boxes[i], &boxes[j]))
            .then(i.cmp(&j))
    });
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for (j, s) in suppressed.iter_mut().enumerate() {
            if !*s && j != i {
                let o = if areas[i] <= 0.0 || areas[j] <= 0.0 {
                    0.0
                } else {
                    iou_unchecked(&boxes[i], &boxes[j], areas[i], areas[j])
                };
                if o > iou_threshold {
                    *s = true;
                }
            }
        }
    }
    keep
}

/// Encodes boxes as `(dx, dy, dw, dh)` offsets from a reference box, scaled
/// by per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on `dw`, `dh` before exponentiation.
    pub clip: f64,
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        Self {
            weights,
            clip: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let (tw, th) = (target.width(), target.height());
        let (tx, ty) = target.center();
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BBox, d: &[f64]) -> BBox {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let dx = d[0] / wx;
        let dy = d[1] / wy;
        let dw = (d[2] / ww).min(self.clip);
        let dh = (d[3] / wh).min(self.clip);
        let (cx, cy) = (dx * rw + rx, dy * rh + ry);
        let (w, h) = (dw.exp() * rw, dh.exp() * rh);
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Clips to `[0, width] x [0, height]`.
pub fn clip_boxes(boxes: &mut [BBox], width: f64, height: f64) {
    for b in boxes {
        *b = b.clip(width, height);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference suppressor: a box survives iff no higher-ranked survivor
    /// overlaps it by more than the threshold, evaluated pair by pair.
    fn brute_force_nms(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
        let n = boxes.len();
        let ranks_before = |i: usize, j: usize| {
            let (a, b) = (boxes[i].to_array(), boxes[j].to_array());
            scores[i] > scores[j] || (scores[i] == scores[j] && (a < b || (a == b && i < j)))
        };
        let mut order: Vec<usize> = (0..n).collect();
        // selection sort on the ranking relation
        for a in 0..n {
            for b in a + 1..n {
                if ranks_before(order[b], order[a]) {
                    order.swap(a, b);
                }
            }
        }
        let mut alive = vec![true; n];
        for (pos, &i) in order.iter().enumerate() {
            for &j in &order[..pos] {
                if alive[j] {
                    let inter_w = (boxes[i].x2.min(boxes[j].x2) - boxes[i].x1.max(boxes[j].x1)).max(0.0);
                    let inter_h = (boxes[i].y2.min(boxes[j].y2) - boxes[i].y1.max(boxes[j].y1)).max(0.0);
                    let inter = inter_w * inter_h;
                    let union = boxes[i].area() + boxes[j].area() - inter;
                    if inter / union > t {
                        alive[i] = false;
                        break;
                    }
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).collect()
    }

    pub(crate) fn random_boxes(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> (Vec<BBox>, Vec<f64>) {
        let boxes = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..extent);
                let y = rng.random_range(0.0..extent);
                BBox::new(x, y, x + rng.random_range(1.0..extent / 2.0), y + rng.random_range(1.0..extent / 2.0))
            })
            .collect();
        let scores = (0..n).map(|_| rng.random::<f64>()).collect();
        (boxes, scores)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(0.0, 0.0, 10.0, 20.0)), 0.5);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 5.0, 9.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(1.0, 1.0, 11.0, 11.0);
        assert!((iou(&a, &b) - 81.0 / 119.0).abs() < 1e-12);
        assert_eq!(nms(&[a, b], &[0.9, 0.8], 0.4), vec![0]);
        assert_eq!(nms(&[a], &[0.3], 0.4), vec![0]);
        assert!(nms(&[], &[], 0.5).is_empty());
        // equal scores: smaller coordinates win
        assert_eq!(nms(&[b, a], &[0.5, 0.5], 0.4), vec![1]);
    }

    #[test]
    fn nms_matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let (boxes, mut scores) = random_boxes(&mut rng, 50, 100.0);
            if trial % 4 == 0 {
                // force ties
                scores.iter_mut().for_each(|s| *s = (*s * 4.0).floor());
            }
            for t in [0.3, 0.5, 0.7] {
                assert_eq!(nms(&boxes, &scores, t), brute_force_nms(&boxes, &scores, t));
            }
        }
    }

    #[test]
    fn coder_round_trip_and_identity() {
        let c = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let r = BBox::new(10.0, 20.0, 30.0, 70.0);
        assert_eq!(c.encode(&r, &r), [0.0; 4]);
        let t = BBox::new(12.0, 18.0, 35.0, 64.0);
        let back = c.decode(&r, &c.encode(&r, &t));
        for (x, y) in back.to_array().iter().zip(t.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in (0.0..50.0f64, 0.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64),
                                     b in (0.0..50.0f64, 0.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)) {
            let a = BBox::from_xywh(a.0, a.1, a.2, a.3);
            let b = BBox::from_xywh(b.0, b.1, b.2, b.3);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (boxes, mut scores) = random_boxes(&mut rng, 20, 60.0);
            if seed % 2 == 0 {
                scores.iter_mut().for_each(|s| *s = (*s * 3.0).floor());
            }
            let mut perm: Vec<usize> = (0..20).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
            let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let kept: Vec<BBox> = nms(&boxes, &scores, 0.5).into_iter().map(|i| boxes[i]).collect();
            let kept_p: Vec<BBox> = nms(&pb, &ps, 0.5).into_iter().map(|i| pb[i]).collect();
            prop_assert_eq!(kept, kept_p);
        }

        #[test]
        fn nms_survivors_pairwise_below_threshold(seed in 0u64..500, t in 0.1..0.9f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (boxes, scores) = random_boxes(&mut rng, 30, 60.0);
            let keep = nms(&boxes, &scores, t);
            for (x, &i) in keep.iter().enumerate() {
                for &j in &keep[x + 1..] {
                    prop_assert!(iou(&boxes[i], &boxes[j]) <= t);
                }
            }
        }
    }
}
