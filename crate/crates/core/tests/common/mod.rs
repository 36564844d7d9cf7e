//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use image::RgbImage;
use person_search::context::PersonEmbedding;
use person_search::data::{BBox, BoxAnnotation, DatasetIndex, EvalProtocol, GallerySize, Identity, ImageSample, QuerySpec, Split};
use person_search::detector::{Detection, DetectionSource};
use person_search::evaluation::{BoxMode, MatchOptions, ProtocolEmbeddings};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SIDE: u32 = 100;

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

struct Cand {
    image: String,
    index: usize,
    bbox: BBox,
    sim: f64,
}

/// `a` is listed before `b`.
fn ahead(a: &Cand, b: &Cand) -> bool {
    if a.sim != b.sim {
        return a.sim > b.sim;
    }
    if a.image != b.image {
        return a.image < b.image;
    }
    a.index < b.index
}

/// mAP and top-1 by enumeration: each candidate's rank is the number of
/// candidates ahead of it, and precision at every hit is recounted from
/// the ranked flags.
pub fn brute_force_scores(
    protocol: &EvalProtocol,
    index: &DatasetIndex,
    emb: &ProtocolEmbeddings,
    mode: BoxMode,
    opts: &MatchOptions,
) -> (f64, f64) {
    let mut ap_sum = 0.0;
    let mut top1 = 0.0;
    for (qi, q) in protocol.queries.iter().enumerate() {
        let mut cands = Vec::new();
        for image in &protocol.galleries[qi] {
            for (k, d) in emb.gallery[image].iter().enumerate() {
                if mode == BoxMode::Detected && d.detection.score < opts.score_threshold {
                    continue;
                }
                let sim: f64 = d.vector.iter().zip(&emb.queries[qi]).map(|(a, b)| a * b).sum();
                cands.push(Cand { image: image.clone(), index: k, bbox: d.detection.bbox, sim });
            }
        }
        let mut ranked: Vec<Option<&Cand>> = vec![None; cands.len()];
        for c in &cands {
            let r = cands.iter().filter(|o| ahead(o, c)).count();
            ranked[r] = Some(c);
        }
        let gt: Vec<(String, BBox)> = index
            .annotations()
            .iter()
            .filter(|a| a.identity == Identity::Labeled(q.identity) && protocol.galleries[qi].contains(&a.image_id))
            .map(|a| (a.image_id.clone(), a.bbox))
            .collect();
        let mut taken = vec![false; gt.len()];
        let mut flags = Vec::new();
        for c in ranked.into_iter().map(Option::unwrap) {
            let mut best: Option<usize> = None;
            let mut best_iou = f64::NEG_INFINITY;
            for (g, (img, b)) in gt.iter().enumerate() {
                if taken[g] || *img != c.image {
                    continue;
                }
                let thr = if opts.size_adaptive {
                    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
                    opts.iou_threshold.min(w * h / ((w + 10.0) * (h + 10.0)))
                } else {
                    opts.iou_threshold
                };
                let v = overlap(&c.bbox, b);
                if v >= thr && v > best_iou {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            flags.push(best.is_some());
        }
        let mut ap = 0.0;
        for k in 0..flags.len() {
            if flags[k] {
                let hits = flags[..=k].iter().filter(|f| **f).count();
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        ap_sum += ap / gt.len() as f64;
        if flags.first() == Some(&true) {
            top1 += 1.0;
        }
    }
    let n = protocol.queries.len() as f64;
    (ap_sum / n, top1 / n)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(8.0..40.0f64);
    let h = rng.random_range(8.0..60.0f64);
    let x = rng.random_range(0.0..(SIDE as f64 - w));
    let y = rng.random_range(0.0..(SIDE as f64 - h));
    BBox::new(x, y, x + w, y + h)
}

fn jitter(b: &BBox, rng: &mut ChaCha8Rng, amount: f64) -> BBox {
    let mut d = || rng.random_range(-amount..amount);
    let (x1, y1) = ((b.x1 + d()).max(0.0), (b.y1 + d()).max(0.0));
    let (x2, y2) = ((b.x2 + d()).min(SIDE as f64), (b.y2 + d()).min(SIDE as f64));
    if x2 - x1 < 1.0 || y2 - y1 < 1.0 {
        *b
    } else {
        BBox::new(x1, y1, x2, y2)
    }
}

/// A coarse random unit vector; coarse entries make similarity ties common.
fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub struct RandomCase {
    pub index: DatasetIndex,
    pub protocol: EvalProtocol,
    pub embeddings: ProtocolEmbeddings,
    pub mode: BoxMode,
    pub opts: MatchOptions,
}

/// Up to 6 gallery images, up to 4 identities, random detections and
/// embeddings. Returns `None` when the draw has no valid query.
pub fn random_case(rng: &mut ChaCha8Rng) -> Option<RandomCase> {
    let n_images = rng.random_range(2..=7);
    let n_ids = rng.random_range(1..=4u32);
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for i in 0..n_images {
        let id = format!("img{i}");
        images.push(ImageSample::in_memory(id.clone(), RgbImage::new(SIDE, SIDE), None));
        for _ in 0..rng.random_range(0..=3) {
            let identity = if rng.random::<f64>() < 0.8 {
                Identity::Labeled(rng.random_range(0..n_ids))
            } else {
                Identity::Unlabeled
            };
            anns.push(BoxAnnotation { image_id: id.clone(), bbox: random_box(rng), identity });
        }
    }
    let vocab = (0..n_ids).map(|i| format!("p{i}")).collect();
    let index = DatasetIndex::new("random", Split::Test, images, anns, vocab).ok()?;

    let mode = if rng.random::<bool>() { BoxMode::Detected } else { BoxMode::GroundTruth };
    let opts = MatchOptions {
        iou_threshold: [0.3, 0.5, 0.7][rng.random_range(0..3)],
        size_adaptive: rng.random::<f64>() < 0.3,
        score_threshold: 0.5,
    };
    let dim = 3;
    let mut gallery: HashMap<String, Vec<PersonEmbedding>> = HashMap::new();
    for img in index.images() {
        let gts: Vec<&BoxAnnotation> = index.annotations_of(&img.image_id);
        let mut dets = Vec::new();
        match mode {
            BoxMode::GroundTruth => {
                for a in gts {
                    dets.push((a.bbox, 1.0, DetectionSource::GroundTruth));
                }
            }
            BoxMode::Detected => {
                for a in gts {
                    for _ in 0..rng.random_range(0..=2) {
                        dets.push((jitter(&a.bbox, rng, 6.0), rng.random::<f64>(), DetectionSource::SecondHead));
                    }
                }
                for _ in 0..rng.random_range(0..=2) {
                    dets.push((random_box(rng), rng.random::<f64>(), DetectionSource::SecondHead));
                }
            }
        }
        let embs = dets
            .into_iter()
            .map(|(bbox, score, source)| PersonEmbedding {
                vector: random_unit(rng, dim),
                detection_score: score,
                detection: Detection { bbox, score, source },
            })
            .collect();
        gallery.insert(img.image_id.clone(), embs);
    }

    // queries: labeled annotations whose identity also appears elsewhere
    let mut queries = Vec::new();
    let mut galleries = Vec::new();
    for a in index.annotations() {
        let Identity::Labeled(l) = a.identity else { continue };
        let holders: Vec<&str> = index
            .annotations()
            .iter()
            .filter(|b| b.identity == a.identity && b.image_id != a.image_id)
            .map(|b| b.image_id.as_str())
            .collect();
        if holders.is_empty() || rng.random::<f64>() < 0.3 {
            continue;
        }
        let g: Vec<String> = index
            .images()
            .iter()
            .map(|i| i.image_id.clone())
            .filter(|i| *i != a.image_id && (holders.contains(&i.as_str()) || rng.random::<bool>()))
            .collect();
        queries.push(QuerySpec { image_id: a.image_id.clone(), bbox: a.bbox, identity: l });
        galleries.push(g);
    }
    if queries.is_empty() {
        return None;
    }
    let embeddings = ProtocolEmbeddings {
        queries: queries.iter().map(|_| random_unit(rng, dim)).collect(),
        gallery,
    };
    let protocol = EvalProtocol { queries, galleries, gallery_size: GallerySize::All };
    Some(RandomCase { index, protocol, embeddings, mode, opts })
}

/// Reference NMS: rank by the pairwise "outranks" relation, then suppress
/// any box overlapping a surviving box ranked above it.
pub fn brute_force_nms(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
    let n = boxes.len();
    let outranks = |i: usize, j: usize| {
        let (a, b) = (boxes[i].to_array(), boxes[j].to_array());
        scores[i] > scores[j] || (scores[i] == scores[j] && (a < b || (a == b && i < j)))
    };
    let mut order = vec![0; n];
    for i in 0..n {
        order[(0..n).filter(|&j| outranks(j, i)).count()] = i;
    }
    let mut alive = vec![true; n];
    for (pos, &i) in order.iter().enumerate() {
        if order[..pos].iter().any(|&j| alive[j] && overlap(&boxes[i], &boxes[j]) > t) {
            alive[i] = false;
        }
    }
    order.into_iter().filter(|&i| alive[i]).collect()
}

pub fn random_box_set(rng: &mut ChaCha8Rng, n: usize) -> (Vec<BBox>, Vec<f64>) {
    let boxes = (0..n).map(|_| random_box(rng)).collect();
    let coarse = rng.random::<bool>();
    let scores = (0..n)
        .map(|_| {
            let s = rng.random::<f64>();
            if coarse {
                (s * 4.0).floor() / 4.0
            } else {
                s
            }
        })
        .collect();
    (boxes, scores)
}
