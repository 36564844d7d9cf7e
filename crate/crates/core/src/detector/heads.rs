//! The two sequential box heads. The first scores and refines proposals;
//! the second produces the raw 256-d identity feature and a second
//! refinement from regions pooled at the first head's boxes.

use autograd::{concat, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, HeadStage};
use super::boxes::BoxCoder;
use super::roi_align::{roi_align, RoiAlignSpec};
use crate::data::BBox;
use crate::nn::Linear;

/// Width of each half of the raw identity feature.
pub const REID_HALF: usize = 128;
pub const REID_DIM: usize = 2 * REID_HALF;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// RoI-Align output side.
    pub roi_output: usize,
    pub sampling_ratio: Option<usize>,
    /// Regions sampled per image for the first head during training.
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub iou_threshold: f64,
}

impl HeadConfig {
    pub fn standard() -> Self {
        Self {
            roi_output: 14,
            sampling_ratio: Some(2),
            batch_per_image: 128,
            positive_fraction: 0.5,
            iou_threshold: 0.5,
        }
    }

    pub fn toy() -> Self {
        Self {
            roi_output: 6,
            sampling_ratio: Some(2),
            batch_per_image: 32,
            positive_fraction: 0.5,
            iou_threshold: 0.5,
        }
    }

    pub fn roi_spec(&self, stride: usize) -> RoiAlignSpec {
        RoiAlignSpec {
            output: self.roi_output,
            spatial_scale: 1.0 / stride as f64,
            sampling_ratio: self.sampling_ratio,
        }
    }
}

pub fn head_coder() -> BoxCoder {
    BoxCoder::new([10.0, 10.0, 5.0, 5.0])
}

#[derive(Clone, Debug)]
pub struct FirstHead {
    stage: HeadStage,
    cls: Linear,
    reg: Linear,
}

pub struct FirstHeadOut<'t> {
    /// `[n, C, r, r]` pooled regions, reused by the context branch.
    pub roi: Var<'t>,
    /// `[n, 2]` background / person logits.
    pub logits: Var<'t>,
    /// `[n, 4]` offsets from the input boxes.
    pub deltas: Var<'t>,
}

impl FirstHead {
    pub fn new<R: Rng>(store: &mut ParamStore, backbone: &BackboneConfig, rng: &mut R) -> Self {
        let c5 = backbone.head_channels();
        Self {
            stage: HeadStage::new(store, "head1.stage", backbone, rng),
            cls: Linear::with_std(store, "head1.cls", (c5, 2), 0.01, rng),
            reg: Linear::with_std(store, "head1.reg", (c5, 4), 0.001, rng),
        }
    }

    /// `features: [1, C, h, w]`; `boxes` must be non-empty.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        features: Var<'t>,
        boxes: &[BBox],
        spec: RoiAlignSpec,
    ) -> FirstHeadOut<'t> {
        let roi = roi_align(features, boxes, spec);
        let pooled = self.stage.forward(tape, store, roi).global_max_pool();
        FirstHeadOut {
            roi,
            logits: self.cls.forward(tape, store, pooled),
            deltas: self.reg.forward(tape, store, pooled),
        }
    }
}

/// Person probabilities from `[n, 2]` logits.
pub fn person_scores(logits: &Tensor) -> Vec<f64> {
    logits
        .outer_iter()
        .map(|r| autograd::sigmoid(r[1] - r[0]))
        .collect()
}

/// Applies `[n, 4]` offsets to `boxes` and clips to the image.
pub fn refine_boxes(coder: &BoxCoder, boxes: &[BBox], deltas: &Tensor, image_size: (f64, f64)) -> Vec<BBox> {
    boxes
        .iter()
        .zip(deltas.outer_iter())
        .map(|(b, d)| {
            let d: Vec<f64> = d.iter().copied().collect();
            coder.decode(b, &d).clip(image_size.0, image_size.1)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SecondHead {
    stage: HeadStage,
    proj_roi: Linear,
    proj_stage: Linear,
    reg: Linear,
}

pub struct SecondHeadOut<'t> {
    /// `[n, 256]` raw identity features.
    pub reid: Var<'t>,
    /// `[n, 4]` offsets from the first-head boxes.
    pub deltas: Var<'t>,
}

impl SecondHead {
    pub fn new<R: Rng>(store: &mut ParamStore, backbone: &BackboneConfig, rng: &mut R) -> Self {
        let c4 = backbone.out_channels();
        let c5 = backbone.head_channels();
        Self {
            stage: HeadStage::new(store, "head2.stage", backbone, rng),
            proj_roi: Linear::with_std(store, "head2.proj_roi", (c4, REID_HALF), 0.01, rng),
            proj_stage: Linear::with_std(store, "head2.proj_stage", (c5, REID_HALF), 0.01, rng),
            reg: Linear::with_std(store, "head2.reg", (c5, 4), 0.001, rng),
        }
    }

    /// `roi: [n, C, r, r]` pooled at the first head's boxes.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, roi: Var<'t>) -> SecondHeadOut<'t> {
        let stage = self.stage.forward(tape, store, roi).global_max_pool();
        let a = self.proj_roi.forward(tape, store, roi.global_max_pool());
        let b = self.proj_stage.forward(tape, store, stage);
        SecondHeadOut {
            reid: concat(&[a, b], 1),
            deltas: self.reg.forward(tape, store, stage),
        }
    }
}
