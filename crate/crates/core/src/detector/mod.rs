//! Sequential two-head detector: backbone, region proposals, box heads and
//! the box-level primitives shared with the context branches.

pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod heads;
pub mod roi_align;
pub mod rpn;
pub mod targets;

use autograd::{ParamStore, Tape, Tensor, Var};
use image::RgbImage;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::Result;

pub use anchors::AnchorConfig;
pub use backbone::{Backbone, BackboneConfig, HeadStage};
pub use boxes::{iou, iou_matrix, nms, BoxCoder};
pub use heads::{FirstHead, SecondHead};
pub use roi_align::{roi_align, roi_extract, RoiAlignSpec};
pub use rpn::{Rpn, RpnConfig};
pub use targets::{assign_targets, Assignment, TargetAssignment};

/// Backbone output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[channels, h, w]`
    pub data: Tensor,
    /// Input pixels per feature cell.
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// As a `[1, C, h, w]` constant on `tape`.
    pub fn to_var<'t>(&self, tape: &'t Tape) -> Var<'t> {
        let s = self.data.shape();
        tape.constant(
            self.data
                .clone()
                .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
                .unwrap(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    FirstHead,
    SecondHead,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub source: DetectionSource,
}

/// NMS over detections; survivors come back in score order.
pub fn nms_detections(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `[1, 3, H, W]` normalised input tensor.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(IxDyn(&[1, 3, h, w]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[[0, c, y as usize, x as usize]] = (p[c] as f64 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    t
}

/// Runs the shared backbone on one image.
pub fn extract_backbone(backbone: &Backbone, store: &ParamStore, img: &RgbImage) -> Result<FeatureMap> {
    let tape = Tape::inference();
    let x = tape.constant(image_tensor(img));
    let y = backbone.forward(&tape, store, x)?;
    let v = y.value();
    let s = v.shape();
    Ok(FeatureMap {
        data: v.as_ref().clone().into_shape_with_order(IxDyn(&s[1..])).unwrap(),
        stride: backbone.config.stride(),
    })
}
