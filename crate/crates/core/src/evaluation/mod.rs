//! Person-search evaluation: rank gallery detections by cosine similarity to
//! each query, match them greedily to ground truth, and score mAP and top-1.

mod report;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::context::PersonEmbedding;
use crate::data::{build_protocol, BBox, DatasetIndex, EvalProtocol, GallerySize, Identity, ImageSample};
use crate::detector::iou;
use crate::error::{Error, Result};

pub use report::{read_rows, write_rows, MetricsReport, MetricsRow, SizeRow, REPORT_SCHEMA};

/// Where gallery boxes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    Detected,
    GroundTruth,
}

impl std::fmt::Display for BoxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoxMode::Detected => "det",
            BoxMode::GroundTruth => "gt",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    pub iou_threshold: f64,
    /// Legacy rule: a ground-truth box of size `w x h` uses
    /// `min(iou_threshold, w*h / ((w+10)*(h+10)))`.
    pub size_adaptive: bool,
    /// Detections scoring below this are dropped before ranking. Ignored in
    /// ground-truth mode.
    pub score_threshold: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            size_adaptive: false,
            score_threshold: 0.5,
        }
    }
}

impl MatchOptions {
    pub fn threshold_for(&self, gt: &BBox) -> f64 {
        if self.size_adaptive {
            let (w, h) = (gt.width(), gt.height());
            self.iou_threshold.min(w * h / ((w + 10.0) * (h + 10.0)))
        } else {
            self.iou_threshold
        }
    }
}

/// A trained model as seen by the evaluator.
pub trait SearchModel {
    /// Detects persons in a whole image and embeds each detection.
    fn detect_and_embed(&self, image: &ImageSample) -> Result<Vec<PersonEmbedding>>;

    /// Embeds the given boxes of one image, skipping detection.
    fn embed_boxes(&self, image: &ImageSample, boxes: &[BBox]) -> Result<Vec<PersonEmbedding>>;

    /// Embeds a query box.
    fn embed_query(&self, image: &ImageSample, bbox: &BBox) -> Result<Vec<f64>> {
        let mut out = self.embed_boxes(image, std::slice::from_ref(bbox))?;
        out.pop()
            .map(|e| e.vector)
            .ok_or_else(|| Error::Protocol(format!("model returned no embedding for query in {}", image.image_id)))
    }
}

/// One gallery box offered for ranking.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub image_id: &'a str,
    /// Position of the box within its image's detection list.
    pub box_index: usize,
    pub bbox: BBox,
    pub embedding: &'a [f64],
}

/// Index into the candidate slice plus its similarity to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub candidate: usize,
    pub similarity: f64,
}

/// Sorts candidates by inner product with `query`, descending; ties go to
/// the smaller image id, then the smaller box index.
pub fn rank_gallery(query: &[f64], gallery: &[Candidate<'_>]) -> Result<Vec<Ranked>> {
    let mut out = Vec::with_capacity(gallery.len());
    for (i, c) in gallery.iter().enumerate() {
        if c.embedding.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                got: c.embedding.len(),
            });
        }
        let similarity = query.iter().zip(c.embedding).map(|(a, b)| a * b).sum();
        out.push(Ranked { candidate: i, similarity });
    }
    out.sort_by(|a, b| {
        let (ca, cb) = (&gallery[a.candidate], &gallery[b.candidate]);
        // equal similarities (0.0 and -0.0 included) fall through to the ids
        let by_sim = if a.similarity == b.similarity {
            std::cmp::Ordering::Equal
        } else {
            b.similarity.total_cmp(&a.similarity)
        };
        by_sim
            .then_with(|| ca.image_id.cmp(cb.image_id))
            .then_with(|| ca.box_index.cmp(&cb.box_index))
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub box_index: usize,
    pub bbox: BBox,
    pub similarity: f64,
    pub matched: bool,
    /// Annotation index (within the whole test index) claimed by this entry.
    pub claimed: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query: usize,
    pub query_image_id: String,
    pub identity: u32,
    pub entries: Vec<RankedEntry>,
    /// Ground-truth instances of the query identity in its gallery.
    pub num_gt: usize,
    pub average_precision: f64,
}

impl SearchResult {
    pub fn top1(&self) -> bool {
        self.entries.first().is_some_and(|e| e.matched)
    }
}

/// Embeddings for a protocol: one vector per query, and each gallery image's
/// scored boxes.
#[derive(Clone, Debug, Default)]
pub struct ProtocolEmbeddings {
    pub queries: Vec<Vec<f64>>,
    pub gallery: HashMap<String, Vec<PersonEmbedding>>,
}

/// Average precision with the ground-truth count as recall denominator:
/// the sum of precision at each true positive, divided by `num_gt`.
pub fn average_precision(matched: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &m) in matched.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / num_gt as f64
}

/// Scores every query of `protocol`. Ground truth comes from `index`.
pub fn match_and_score(
    protocol: &EvalProtocol,
    index: &DatasetIndex,
    embeddings: &ProtocolEmbeddings,
    mode: BoxMode,
    opts: &MatchOptions,
) -> Result<(MetricsReport, Vec<SearchResult>)> {
    if protocol.queries.is_empty() {
        return Err(Error::Protocol("empty query set".into()));
    }
    if protocol.galleries.len() != protocol.queries.len() || embeddings.queries.len() != protocol.queries.len() {
        return Err(Error::Protocol(format!(
            "{} queries but {} galleries and {} query embeddings",
            protocol.queries.len(),
            protocol.galleries.len(),
            embeddings.queries.len()
        )));
    }
    // annotation positions per image, for claim bookkeeping
    let mut ann_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, a) in index.annotations().iter().enumerate() {
        ann_pos.entry(a.image_id.as_str()).or_default().push(i);
    }

    let mut results = Vec::with_capacity(protocol.queries.len());
    for (qi, (query, gallery)) in protocol.queries.iter().zip(&protocol.galleries).enumerate() {
        let mut gt: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut num_gt = 0;
        for image_id in gallery {
            let list: Vec<usize> = ann_pos
                .get(image_id.as_str())
                .map(|v| {
                    v.iter()
                        .copied()
                        .filter(|&a| index.annotations()[a].identity == Identity::Labeled(query.identity))
                        .collect()
                })
                .unwrap_or_default();
            num_gt += list.len();
            gt.insert(image_id.as_str(), list);
        }
        if num_gt == 0 {
            return Err(Error::Protocol(format!(
                "identity {} of query {} ({}) is absent from its gallery",
                query.identity, qi, query.image_id
            )));
        }

        let mut candidates = Vec::new();
        for image_id in gallery {
            let dets = embeddings
                .gallery
                .get(image_id)
                .ok_or_else(|| Error::Protocol(format!("no embeddings for gallery image {image_id}")))?;
            for (bi, d) in dets.iter().enumerate() {
                if mode == BoxMode::Detected && d.detection.score < opts.score_threshold {
                    continue;
                }
                candidates.push(Candidate {
                    image_id,
                    box_index: bi,
                    bbox: d.detection.bbox,
                    embedding: &d.vector,
                });
            }
        }
        let ranked = rank_gallery(&embeddings.queries[qi], &candidates)?;

        let mut claimed: BTreeSet<usize> = BTreeSet::new();
        let mut entries = Vec::with_capacity(ranked.len());
        for r in ranked {
            let c = &candidates[r.candidate];
            let mut best: Option<(usize, f64)> = None;
            for &a in &gt[c.image_id] {
                if claimed.contains(&a) {
                    continue;
                }
                let g = &index.annotations()[a].bbox;
                let v = iou(&c.bbox, g);
                if v >= opts.threshold_for(g) && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((a, v));
                }
            }
            if let Some((a, _)) = best {
                claimed.insert(a);
            }
            entries.push(RankedEntry {
                image_id: c.image_id.to_string(),
                box_index: c.box_index,
                bbox: c.bbox,
                similarity: r.similarity,
                matched: best.is_some(),
                claimed: best.map(|(a, _)| a),
            });
        }
        let flags: Vec<bool> = entries.iter().map(|e| e.matched).collect();
        results.push(SearchResult {
            query: qi,
            query_image_id: query.image_id.clone(),
            identity: query.identity,
            average_precision: average_precision(&flags, num_gt),
            entries,
            num_gt,
        });
    }

    let n = results.len() as f64;
    let map = results.iter().map(|r| r.average_precision).sum::<f64>() / n;
    let top1 = results.iter().filter(|r| r.top1()).count() as f64 / n;
    let report = MetricsReport::single(
        index.name(),
        mode,
        SizeRow {
            gallery_size: protocol.gallery_size,
            map,
            top1,
            num_queries: results.len(),
        },
    );
    Ok((report, results))
}

/// Computes embeddings lazily and remembers them, so sweeps over gallery
/// sizes touch every image once.
pub struct EmbeddingCache<'a, M: SearchModel + ?Sized> {
    model: &'a M,
    index: &'a DatasetIndex,
    mode: BoxMode,
    gallery: HashMap<String, Vec<PersonEmbedding>>,
    queries: HashMap<(String, [u64; 4]), Vec<f64>>,
}

impl<'a, M: SearchModel + ?Sized> EmbeddingCache<'a, M> {
    pub fn new(model: &'a M, index: &'a DatasetIndex, mode: BoxMode) -> Self {
        Self {
            model,
            index,
            mode,
            gallery: HashMap::new(),
            queries: HashMap::new(),
        }
    }

    fn image(&self, image_id: &str) -> Result<&'a ImageSample> {
        self.index
            .image(image_id)
            .ok_or_else(|| Error::Protocol(format!("image {image_id} not in index {}", self.index.name())))
    }

    fn gt_embeddings(&mut self, image_id: &str) -> Result<&Vec<PersonEmbedding>> {
        if !self.gallery.contains_key(image_id) {
            let image = self.image(image_id)?;
            let boxes: Vec<BBox> = self.index.annotations_of(image_id).iter().map(|a| a.bbox).collect();
            let embs = if boxes.is_empty() {
                Vec::new()
            } else {
                self.model.embed_boxes(image, &boxes)?
            };
            self.gallery.insert(image_id.to_string(), embs);
        }
        Ok(&self.gallery[image_id])
    }

    /// In ground-truth mode a query shares the embedding pass of its image's
    /// annotated boxes, so its group context matches the gallery's.
    fn query_embedding(&mut self, image_id: &str, bbox: &BBox) -> Result<Vec<f64>> {
        if self.mode == BoxMode::GroundTruth {
            let annotated = self.index.annotations_of(image_id).iter().position(|a| a.bbox == *bbox);
            if let Some(i) = annotated {
                return Ok(self.gt_embeddings(image_id)?[i].vector.clone());
            }
            let mut boxes: Vec<BBox> = self.index.annotations_of(image_id).iter().map(|a| a.bbox).collect();
            boxes.push(*bbox);
            let mut embs = self.model.embed_boxes(self.image(image_id)?, &boxes)?;
            return embs
                .pop()
                .map(|e| e.vector)
                .ok_or_else(|| Error::Protocol(format!("model returned no embedding for query in {image_id}")));
        }
        self.model.embed_query(self.image(image_id)?, bbox)
    }

    pub fn protocol_embeddings(&mut self, protocol: &EvalProtocol) -> Result<ProtocolEmbeddings> {
        let mut out = ProtocolEmbeddings::default();
        for q in &protocol.queries {
            let key = (q.image_id.clone(), q.bbox.to_array().map(f64::to_bits));
            if !self.queries.contains_key(&key) {
                let v = self.query_embedding(&q.image_id, &q.bbox)?;
                self.queries.insert(key.clone(), v);
            }
            out.queries.push(self.queries[&key].clone());
        }
        for image_id in protocol.galleries.iter().flatten() {
            if out.gallery.contains_key(image_id) {
                continue;
            }
            let embs = match self.mode {
                BoxMode::Detected => {
                    if !self.gallery.contains_key(image_id) {
                        let embs = self.model.detect_and_embed(self.image(image_id)?)?;
                        self.gallery.insert(image_id.clone(), embs);
                    }
                    self.gallery[image_id].clone()
                }
                BoxMode::GroundTruth => self.gt_embeddings(image_id)?.clone(),
            };
            out.gallery.insert(image_id.clone(), embs);
        }
        Ok(out)
    }
}

/// Runs the model over a protocol and scores it.
pub fn evaluate<M: SearchModel + ?Sized>(
    model: &M,
    index: &DatasetIndex,
    protocol: &EvalProtocol,
    mode: BoxMode,
    opts: &MatchOptions,
) -> Result<(MetricsReport, Vec<SearchResult>)> {
    if protocol.queries.is_empty() {
        return Err(Error::Protocol("empty query set".into()));
    }
    let embeddings = EmbeddingCache::new(model, index, mode).protocol_embeddings(protocol)?;
    match_and_score(protocol, index, &embeddings, mode, opts)
}

/// Scores with gallery embeddings taken at the annotated boxes.
pub fn evaluate_gt_boxes<M: SearchModel + ?Sized>(
    model: &M,
    index: &DatasetIndex,
    protocol: &EvalProtocol,
    opts: &MatchOptions,
) -> Result<MetricsReport> {
    evaluate(model, index, protocol, BoxMode::GroundTruth, opts).map(|(r, _)| r)
}

/// One row per distinct gallery size, in the order first requested.
pub fn gallery_sweep<M: SearchModel + ?Sized>(
    model: &M,
    index: &DatasetIndex,
    sizes: &[GallerySize],
    seed: u64,
    mode: BoxMode,
    opts: &MatchOptions,
) -> Result<MetricsReport> {
    let mut unique = Vec::new();
    for s in sizes {
        if !unique.contains(s) {
            unique.push(*s);
        }
    }
    if unique.is_empty() {
        return Err(Error::Config("no gallery sizes to sweep".into()));
    }
    let mut cache = EmbeddingCache::new(model, index, mode);
    let mut report: Option<MetricsReport> = None;
    for size in unique {
        let protocol = build_protocol(index, size, seed)?;
        let embeddings = cache.protocol_embeddings(&protocol)?;
        let (r, _) = match_and_score(&protocol, index, &embeddings, mode, opts)?;
        match &mut report {
            None => report = Some(r),
            Some(rep) => rep.table.extend(r.table),
        }
    }
    Ok(report.expect("at least one size"))
}

/// Ordinary evaluation on a target protocol, tagged with the dataset the
/// model was trained on.
pub fn cross_dataset_eval<M: SearchModel + ?Sized>(
    model: &M,
    source_dataset: &str,
    index: &DatasetIndex,
    protocol: &EvalProtocol,
    mode: BoxMode,
    opts: &MatchOptions,
) -> Result<MetricsReport> {
    let (mut report, _) = evaluate(model, index, protocol, mode, opts)?;
    report.source_dataset = Some(source_dataset.to_string());
    Ok(report)
}

/// Ground-truth claims must be unique within each result.
pub fn claims_are_unique(results: &[SearchResult]) -> bool {
    results.iter().all(|r| {
        let mut seen = BTreeSet::new();
        r.entries.iter().filter_map(|e| e.claimed).all(|a| seen.insert(a))
    })
}

#[cfg(test)]
mod tests;
