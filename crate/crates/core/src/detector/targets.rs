//! Matching proposals to ground truth and sampling training regions.

use rand::seq::index::sample;
use rand::Rng;

use super::boxes::{iou_matrix, BoxCoder};
use crate::data::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Positive { gt: usize },
    Negative,
    Ignored,
}

impl Assignment {
    pub fn is_positive(&self) -> bool {
        matches!(self, Assignment::Positive { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<Assignment>,
    /// Coder offsets to the matched box; zeros for non-positives.
    pub regression: Vec<[f64; 4]>,
    pub max_iou: Vec<f64>,
}

impl TargetAssignment {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_positive()).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == Assignment::Negative)
            .collect()
    }

    /// `p*` per proposal: 1 for positives, 0 otherwise.
    pub fn class_targets(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.is_positive() as u8 as f64).collect()
    }

    pub fn matched_gt(&self, i: usize) -> Option<usize> {
        match self.labels[i] {
            Assignment::Positive { gt } => Some(gt),
            _ => None,
        }
    }
}

/// Single-threshold assignment: positive iff the best IoU reaches `threshold`.
pub fn assign_targets(proposals: &[BBox], gts: &[BBox], threshold: f64, coder: &BoxCoder) -> TargetAssignment {
    assign_targets_with(proposals, gts, threshold, threshold, coder)
}

/// Positive at `max IoU >= fg`, negative below `bg`, ignored in between.
/// The best-matching ground truth wins; ties go to the lower index.
pub fn assign_targets_with(
    proposals: &[BBox],
    gts: &[BBox],
    fg: f64,
    bg: f64,
    coder: &BoxCoder,
) -> TargetAssignment {
    let table = iou_matrix(proposals, gts);
    let mut labels = Vec::with_capacity(proposals.len());
    let mut regression = Vec::with_capacity(proposals.len());
    let mut max_iou = Vec::with_capacity(proposals.len());
    for (p, row) in proposals.iter().zip(&table) {
        let best = best_match(row);
        let m = best.map_or(0.0, |(_, v)| v);
        max_iou.push(m);
        match best {
            Some((g, v)) if v >= fg => {
                labels.push(Assignment::Positive { gt: g });
                regression.push(coder.encode(p, &gts[g]));
            }
            _ => {
                labels.push(if m < bg { Assignment::Negative } else { Assignment::Ignored });
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

fn best_match(row: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best
}

/// Draws up to `batch` indices, at most `batch * positive_fraction` of them
/// positive, the rest negative. Returns `(positives, negatives)`, each in
/// ascending order.
pub fn sample_balanced<R: Rng>(
    t: &TargetAssignment,
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let pos = t.positives();
    let neg = t.negatives();
    let n_pos = pos.len().min((batch as f64 * positive_fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let pick = |from: &[usize], k: usize, rng: &mut R| {
        let mut v: Vec<usize> = sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect();
        v.sort_unstable();
        v
    };
    let p = pick(&pos, n_pos, rng);
    let n = pick(&neg, n_neg, rng);
    (p, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::boxes::tests::random_boxes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coder() -> BoxCoder {
        BoxCoder::new([10.0, 10.0, 5.0, 5.0])
    }

    #[test]
    fn identical_proposal_is_positive_with_zero_target() {
        let g = BBox::new(5.0, 5.0, 25.0, 45.0);
        let t = assign_targets(&[g], &[g], 0.5, &coder());
        assert_eq!(t.labels[0], Assignment::Positive { gt: 0 });
        assert_eq!(t.regression[0], [0.0; 4]);
    }

    #[test]
    fn below_threshold_is_negative() {
        // IoU = 49 / 100
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let p = BBox::new(0.0, 0.0, 10.0, 4.9);
        let t = assign_targets(&[p], &[g], 0.5, &coder());
        assert!((t.max_iou[0] - 0.49).abs() < 1e-12);
        assert_eq!(t.labels[0], Assignment::Negative);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let t = assign_targets(&[BBox::new(0.0, 0.0, 3.0, 3.0); 4], &[], 0.5, &coder());
        assert!(t.labels.iter().all(|l| *l == Assignment::Negative));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (props, _) = random_boxes(&mut rng, 100, 80.0);
            let (gts, _) = random_boxes(&mut rng, 5, 80.0);
            let t = assign_targets(&props, &gts, 0.5, &coder());
            for (i, p) in props.iter().enumerate() {
                // oracle: scan every gt, keep strictly better ones
                let mut best = (usize::MAX, -1.0);
                for (g, gt) in gts.iter().enumerate() {
                    let iw = (p.x2.min(gt.x2) - p.x1.max(gt.x1)).max(0.0);
                    let ih = (p.y2.min(gt.y2) - p.y1.max(gt.y1)).max(0.0);
                    let v = iw * ih / (p.area() + gt.area() - iw * ih);
                    if v > best.1 {
                        best = (g, v);
                    }
                }
                let want = if best.1 >= 0.5 {
                    Assignment::Positive { gt: best.0 }
                } else {
                    Assignment::Negative
                };
                assert_eq!(t.labels[i], want);
            }
        }
    }

    #[test]
    fn ignored_band() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let p = BBox::new(0.0, 0.0, 10.0, 5.0);
        let t = assign_targets_with(&[p], &[g], 0.7, 0.3, &coder());
        assert_eq!(t.labels[0], Assignment::Ignored);
    }

    #[test]
    fn balanced_sampling_respects_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (props, _) = random_boxes(&mut rng, 200, 50.0);
        let (gts, _) = random_boxes(&mut rng, 4, 50.0);
        let t = assign_targets(&props, &gts, 0.5, &coder());
        let (p, n) = sample_balanced(&t, 32, 0.25, &mut rng);
        assert!(p.len() <= 8);
        assert_eq!(p.len() + n.len(), 32.min(t.positives().len().min(8) + t.negatives().len()));
        assert!(p.iter().all(|&i| t.labels[i].is_positive()));
        assert!(n.iter().all(|&i| t.labels[i] == Assignment::Negative));
    }
}
