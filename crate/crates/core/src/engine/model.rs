//! The full network: backbone, proposals, two sequential heads, scene and
//! group context encoders and the aggregation head.

use autograd::{ParamStore, Tape, Tensor, Var};
use image::RgbImage;
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{resize_image, Sample};
use super::config::{ModelConfig, ResizePolicy};
use crate::context::{neighbour_max, AeaHead, ContextEncoder, PersonEmbedding, CONTEXT_DIM};
use crate::data::{BBox, Identity, ImageSample};
use crate::detector::heads::{head_coder, person_scores, refine_boxes, FirstHead, SecondHead, REID_DIM};
use crate::detector::targets::sample_balanced;
use crate::detector::{assign_targets, image_tensor, iou, nms, Backbone, Detection, DetectionSource, RoiAlignSpec, Rpn};
use crate::error::Result;
use crate::evaluation::SearchModel;
use crate::losses::{cls_loss_first, cls_loss_second, oim_loss, smooth_l1_reg, LossTerms, OimState};

#[derive(Clone, Debug)]
pub struct PersonSearchNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Applied to every image before the backbone.
    pub resize: ResizePolicy,
    backbone: Backbone,
    rpn: Rpn,
    head1: FirstHead,
    head2: SecondHead,
    gsc: Option<ContextEncoder>,
    lgc: Option<ContextEncoder>,
    aea: AeaHead,
}

/// Loss terms of one image plus the embeddings that update the OIM memory.
pub struct ImageLosses<'t> {
    pub terms: LossTerms<'t>,
    pub memory: Vec<(Vec<f64>, Identity)>,
}

/// First-stage survivors for one image, in the coordinates of the resized image.
struct FirstStage {
    boxes: Vec<BBox>,
    scores: Vec<f64>,
}

impl PersonSearchNet {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: &ModelConfig, resize: ResizePolicy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = &config.backbone;
        let backbone = Backbone::new(&mut store, bb, &mut rng);
        let rpn = Rpn::new(&mut store, bb.out_channels(), &config.rpn, &mut rng);
        let head1 = FirstHead::new(&mut store, bb, &mut rng);
        let head2 = SecondHead::new(&mut store, bb, &mut rng);
        let ctx = &config.context;
        let gsc = ctx.gsc.then(|| ContextEncoder::new(&mut store, "gsc", bb.out_channels(), &mut rng));
        let lgc = ctx.lgc.then(|| ContextEncoder::new(&mut store, "lgc", bb.out_channels(), &mut rng));
        let aea = AeaHead::new(&mut store, ctx, REID_DIM, &mut rng);
        Self {
            config: config.clone(),
            store,
            resize,
            backbone,
            rpn,
            head1,
            head2,
            gsc,
            lgc,
            aea,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.aea.output_dim()
    }

    fn roi_spec(&self) -> RoiAlignSpec {
        self.config.heads.roi_spec(self.config.backbone.stride())
    }

    fn features<'t>(&self, tape: &'t Tape, image: &RgbImage) -> Result<Var<'t>> {
        self.backbone.forward(tape, &self.store, tape.constant(image_tensor(image)))
    }

    /// Scene and group context rows for `targets`. Group context pools the
    /// encoded `context` boxes that overlap a target less than the
    /// configured IoU; a target without such neighbours gets zeros.
    fn context_parts<'t>(
        &self,
        tape: &'t Tape,
        features: Var<'t>,
        targets: &[BBox],
        context: &[BBox],
    ) -> (Option<Var<'t>>, Option<Var<'t>>) {
        let n = targets.len();
        let gsc = self
            .gsc
            .as_ref()
            .map(|enc| enc.forward(tape, &self.store, features).gather_rows(&vec![0; n]));
        let lgc = self.lgc.as_ref().map(|enc| {
            if context.is_empty() {
                return tape.constant(Tensor::zeros(IxDyn(&[n, CONTEXT_DIM])));
            }
            let encoded = enc.forward(tape, &self.store, crate::detector::roi_align(features, context, self.roi_spec()));
            let thr = self.config.inference.context_iou;
            let groups: Vec<Vec<usize>> = targets
                .iter()
                .map(|t| (0..context.len()).filter(|&j| iou(t, &context[j]) < thr).collect())
                .collect();
            neighbour_max(encoded, &groups)
        });
        (gsc, lgc)
    }

    /// Second head, context and aggregation at `boxes`.
    /// Returns `(embeddings [n, D], nae scores [n], second-head deltas [n, 4])`.
    fn embed_at<'t>(
        &self,
        tape: &'t Tape,
        features: Var<'t>,
        boxes: &[BBox],
        context: &[BBox],
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let roi = crate::detector::roi_align(features, boxes, self.roi_spec());
        let out = self.head2.forward(tape, &self.store, roi);
        let (gsc, lgc) = self.context_parts(tape, features, boxes, context);
        let (emb, score) = self.aea.forward(tape, &self.store, out.reid, gsc, lgc)?;
        Ok((emb, score, out.deltas))
    }

    /// Loss terms for one (already augmented and resized) image.
    pub fn image_losses<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        sample: &Sample,
        oim: &OimState,
        iou_threshold: f64,
        rng: &mut R,
    ) -> Result<ImageLosses<'t>> {
        let size = sample.size();
        let gts = &sample.boxes;
        let features = self.features(tape, &sample.image)?;
        let stride = self.config.backbone.stride();

        let rpn_out = self.rpn.forward(tape, &self.store, features, stride);
        let (rpn_cls, rpn_reg) = self.rpn.loss(&rpn_out, gts, rng);
        let mut candidates = self.rpn.proposals(&rpn_out, size, true).boxes;
        candidates.extend(gts.iter().copied());

        let coder = head_coder();
        let heads = &self.config.heads;
        let t1 = assign_targets(&candidates, gts, iou_threshold, &coder);
        let (pos1, neg1) = sample_balanced(&t1, heads.batch_per_image, heads.positive_fraction, rng);
        let picked: Vec<usize> = pos1.iter().chain(&neg1).copied().collect();
        let boxes1: Vec<BBox> = picked.iter().map(|&i| candidates[i]).collect();
        let h1 = self.head1.forward(tape, &self.store, features, &boxes1, self.roi_spec());
        let all_t1 = t1.class_targets();
        let cls_t1: Vec<f64> = picked.iter().map(|&i| all_t1[i]).collect();
        let cls1 = cls_loss_first(h1.logits, &cls_t1);
        let reg_t1: Vec<[f64; 4]> = pos1.iter().map(|&i| t1.regression[i]).collect();
        let reg1 = smooth_l1_reg(h1.deltas.gather_rows(&(0..pos1.len()).collect::<Vec<_>>()), &reg_t1);

        // second stage at the refined, detached boxes
        let refined: Vec<BBox> = refine_boxes(&coder, &boxes1, &h1.deltas.value(), size)
            .into_iter()
            .zip(&boxes1)
            .map(|(r, b)| if r.is_valid() { r } else { *b })
            .collect();
        let t2 = assign_targets(&refined, gts, iou_threshold, &coder);
        let (emb, score, deltas2) = self.embed_at(tape, features, &refined, gts)?;
        let cls2 = cls_loss_second(score, &t2.class_targets(), self.config.cls2);
        let pos2 = t2.positives();
        let reg_t2: Vec<[f64; 4]> = pos2.iter().map(|&i| t2.regression[i]).collect();
        let reg2 = smooth_l1_reg(deltas2.gather_rows(&pos2), &reg_t2);
        let labels: Vec<Identity> = pos2
            .iter()
            .map(|&i| sample.identities[t2.matched_gt(i).expect("positive has a match")])
            .collect();
        let emb_pos = emb.gather_rows(&pos2);
        let reid = oim_loss(oim, emb_pos, &labels)?;
        let values = emb_pos.value();
        let memory = values
            .outer_iter()
            .zip(labels)
            .map(|(r, l)| (r.iter().copied().collect(), l))
            .collect();
        Ok(ImageLosses {
            terms: LossTerms {
                reg1,
                cls1,
                reg2,
                cls2,
                reid,
                extra: vec![("rpn_cls", rpn_cls), ("rpn_reg", rpn_reg)],
            },
            memory,
        })
    }

    /// Proposals through the first head and NMS.
    fn first_stage(&self, tape: &Tape, features: Var<'_>, size: (f64, f64)) -> FirstStage {
        let inf = &self.config.inference;
        let rpn_out = self.rpn.forward(tape, &self.store, features, self.config.backbone.stride());
        let props = self.rpn.proposals(&rpn_out, size, false);
        if props.boxes.is_empty() {
            return FirstStage {
                boxes: vec![],
                scores: vec![],
            };
        }
        let h1 = self.head1.forward(tape, &self.store, features, &props.boxes, self.roi_spec());
        let scores = person_scores(&h1.logits.value());
        let refined = refine_boxes(&head_coder(), &props.boxes, &h1.deltas.value(), size);
        let (boxes, scores): (Vec<BBox>, Vec<f64>) = refined
            .into_iter()
            .zip(scores)
            .filter(|(b, s)| b.is_valid() && *s >= inf.min_score)
            .unzip();
        let keep = nms(&boxes, &scores, inf.nms_first);
        FirstStage {
            boxes: keep.iter().map(|&i| boxes[i]).collect(),
            scores: keep.iter().map(|&i| scores[i]).collect(),
        }
    }

    fn context_from(&self, stage: &FirstStage) -> Vec<BBox> {
        let thr = self.config.inference.context_score;
        stage
            .boxes
            .iter()
            .zip(&stage.scores)
            .filter(|(_, s)| **s >= thr)
            .map(|(b, _)| *b)
            .collect()
    }

    /// Full inference on one image: detections with embeddings, in score
    /// order, boxes in the image's own coordinates.
    pub fn detect(&self, image: &RgbImage) -> Result<Vec<PersonEmbedding>> {
        let (resized, sx, sy) = resize_image(image, &self.resize);
        let size = (resized.width() as f64, resized.height() as f64);
        let tape = Tape::inference();
        let features = self.features(&tape, &resized)?;
        let stage = self.first_stage(&tape, features, size);
        if stage.boxes.is_empty() {
            return Ok(vec![]);
        }
        let context = self.context_from(&stage);
        let (emb, nae, deltas2) = self.embed_at(&tape, features, &stage.boxes, &context)?;
        let final_boxes: Vec<BBox> = refine_boxes(&head_coder(), &stage.boxes, &deltas2.value(), size)
            .into_iter()
            .zip(&stage.boxes)
            .map(|(r, b)| if r.is_valid() { r } else { *b })
            .collect();
        let keep = nms(&final_boxes, &stage.scores, self.config.inference.nms_final);
        let (emb, nae) = (emb.value(), nae.value());
        let (w, h) = (image.width() as f64, image.height() as f64);
        Ok(keep
            .into_iter()
            .take(self.config.inference.max_detections)
            .map(|i| PersonEmbedding {
                vector: emb.index_axis(ndarray::Axis(0), i).iter().copied().collect(),
                detection_score: nae[i],
                detection: Detection {
                    bbox: final_boxes[i].scale(sx, sy).clip(w, h),
                    score: stage.scores[i],
                    source: DetectionSource::SecondHead,
                },
            })
            .collect())
    }

    /// Embeddings at given boxes. Group context comes from `context` when
    /// given, otherwise from the image's own first-stage detections.
    pub fn embed_boxes_with(&self, image: &RgbImage, boxes: &[BBox], context: Option<&[BBox]>) -> Result<Vec<PersonEmbedding>> {
        if boxes.is_empty() {
            return Ok(vec![]);
        }
        let (resized, sx, sy) = resize_image(image, &self.resize);
        let size = (resized.width() as f64, resized.height() as f64);
        let to_net = |b: &BBox| b.scale(1.0 / sx, 1.0 / sy);
        let tape = Tape::inference();
        let features = self.features(&tape, &resized)?;
        let context: Vec<BBox> = match context {
            Some(c) => c.iter().map(to_net).collect(),
            None if self.lgc.is_some() => {
                let stage = self.first_stage(&tape, features, size);
                self.context_from(&stage)
            }
            None => vec![],
        };
        let net_boxes: Vec<BBox> = boxes.iter().map(to_net).collect();
        let (emb, nae, _) = self.embed_at(&tape, features, &net_boxes, &context)?;
        let (emb, nae) = (emb.value(), nae.value());
        Ok(boxes
            .iter()
            .enumerate()
            .map(|(i, b)| PersonEmbedding {
                vector: emb.index_axis(ndarray::Axis(0), i).iter().copied().collect(),
                detection_score: nae[i],
                detection: Detection {
                    bbox: *b,
                    score: nae[i],
                    source: DetectionSource::GroundTruth,
                },
            })
            .collect())
    }
}

impl SearchModel for PersonSearchNet {
    fn detect_and_embed(&self, image: &ImageSample) -> Result<Vec<PersonEmbedding>> {
        self.detect(image.pixels()?.as_ref())
    }

    /// The boxes double as each other's group context.
    fn embed_boxes(&self, image: &ImageSample, boxes: &[BBox]) -> Result<Vec<PersonEmbedding>> {
        self.embed_boxes_with(image.pixels()?.as_ref(), boxes, Some(boxes))
    }

    /// Group context for a query comes from detections in its image.
    fn embed_query(&self, image: &ImageSample, bbox: &BBox) -> Result<Vec<f64>> {
        let mut out = self.embed_boxes_with(image.pixels()?.as_ref(), std::slice::from_ref(bbox), None)?;
        Ok(out.remove(0).vector)
    }
}
