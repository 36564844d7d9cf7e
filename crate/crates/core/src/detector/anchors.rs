use serde::{Deserialize, Serialize};

use crate::data::BBox;

/// Anchor layout: every feature cell gets one anchor per (size, ratio) pair.
/// `ratio` is height / width; an anchor's area is `size^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    /// Zero-centred `(w, h)` templates in (size, ratio) order.
    fn templates(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.per_cell());
        for &s in &self.sizes {
            for &r in &self.ratios {
                let w = (s / r.sqrt()).round();
                let h = (s * r.sqrt()).round();
                out.push((w, h));
            }
        }
        out
    }

    /// Anchors for an `h x w` feature map with the given stride, ordered
    /// `(template, y, x)`; see [`anchor_index`].
    pub fn generate(&self, h: usize, w: usize, stride: usize) -> Vec<BBox> {
        let t = self.templates();
        let mut out = Vec::with_capacity(h * w * t.len());
        for a in &t {
            for y in 0..h {
                for x in 0..w {
                    let cx = (x * stride) as f64;
                    let cy = (y * stride) as f64;
                    out.push(BBox::new(
                        cx - (a.0 / 2.0).round(),
                        cy - (a.1 / 2.0).round(),
                        cx + (a.0 / 2.0).round(),
                        cy + (a.1 / 2.0).round(),
                    ));
                }
            }
        }
        out
    }
}

/// Position of anchor (template `a`, row `y`, column `x`) in the output of
/// [`AnchorConfig::generate`]; identical to the flat index of a `[A, h, w]`
/// head output.
pub fn anchor_index(a: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (a * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_and_shape() {
        let cfg = AnchorConfig {
            sizes: vec![16.0, 32.0],
            ratios: vec![0.5, 1.0, 2.0],
        };
        let anchors = cfg.generate(3, 4, 8);
        assert_eq!(anchors.len(), 3 * 4 * 6);
        // template (16, 1.0) at cell (y=2, x=1)
        let b = anchors[anchor_index(1, 2, 1, 3, 4)];
        assert_eq!(b, BBox::new(0.0, 8.0, 16.0, 24.0));
        // ratio 2 is tall
        let tall = anchors[anchor_index(2, 0, 0, 3, 4)];
        assert!(tall.height() > tall.width());
    }
}
