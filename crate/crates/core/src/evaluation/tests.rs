use super::*;
use crate::data::{make_synthetic, BoxAnnotation, QuerySpec, Split, SyntheticSpec};
use crate::detector::{Detection, DetectionSource};
use image::RgbImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn emb(bbox: BBox, score: f64, vector: Vec<f64>) -> PersonEmbedding {
    PersonEmbedding {
        vector,
        detection_score: score,
        detection: Detection {
            bbox,
            score,
            source: DetectionSource::SecondHead,
        },
    }
}

/// Three 100x100 images: `q` holds the query, `g1` and `g2` are gallery.
fn tiny_index(gallery_anns: &[(&str, BBox, Identity)]) -> DatasetIndex {
    let images = ["q", "g1", "g2"]
        .iter()
        .map(|id| ImageSample::in_memory(*id, RgbImage::new(100, 100), None))
        .collect();
    let mut anns = vec![BoxAnnotation {
        image_id: "q".into(),
        bbox: BBox::new(10.0, 10.0, 30.0, 60.0),
        identity: Identity::Labeled(0),
    }];
    anns.extend(gallery_anns.iter().map(|(img, b, id)| BoxAnnotation {
        image_id: img.to_string(),
        bbox: *b,
        identity: *id,
    }));
    DatasetIndex::new("tiny", Split::Test, images, anns, vec!["a".into(), "b".into()]).unwrap()
}

fn tiny_protocol() -> EvalProtocol {
    EvalProtocol {
        queries: vec![QuerySpec {
            image_id: "q".into(),
            bbox: BBox::new(10.0, 10.0, 30.0, 60.0),
            identity: 0,
        }],
        galleries: vec![vec!["g1".into(), "g2".into()]],
        gallery_size: GallerySize::Fixed(2),
    }
}

const GT_A: BBox = BBox {
    x1: 20.0,
    y1: 20.0,
    x2: 40.0,
    y2: 80.0,
};
const GT_B: BBox = BBox {
    x1: 60.0,
    y1: 10.0,
    x2: 80.0,
    y2: 70.0,
};

fn score_one(
    index: &DatasetIndex,
    gallery: Vec<(&str, Vec<PersonEmbedding>)>,
    opts: &MatchOptions,
    mode: BoxMode,
) -> Result<(MetricsReport, Vec<SearchResult>)> {
    let embeddings = ProtocolEmbeddings {
        queries: vec![vec![1.0, 0.0]],
        gallery: gallery.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    match_and_score(&tiny_protocol(), index, &embeddings, mode, opts)
}

#[test]
fn own_copy_ranks_first() {
    let q = unit(vec![0.3, -0.2, 0.9]);
    let other = unit(vec![0.2, 0.3, 0.0]);
    let gallery = [
        Candidate {
            image_id: "a",
            box_index: 0,
            bbox: GT_A,
            embedding: &other,
        },
        Candidate {
            image_id: "b",
            box_index: 0,
            bbox: GT_A,
            embedding: &q,
        },
    ];
    let r = rank_gallery(&q, &gallery).unwrap();
    assert_eq!(r[0].candidate, 1);
    assert!((r[0].similarity - 1.0).abs() < 1e-12);
    assert!(r[1].similarity.abs() < 1e-12);
    assert!(rank_gallery(&q, &[]).unwrap().is_empty());
}

#[test]
fn ranking_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = ["a", "b", "c", "d"];
    for _ in 0..50 {
        let q = unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        // coarse values force ties
        let vecs: Vec<Vec<f64>> = (0..20)
            .map(|_| unit((0..6).map(|_| rng.random_range(-2..=2) as f64 + 0.01).collect()))
            .collect();
        let cands: Vec<Candidate> = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| Candidate {
                image_id: ids[rng.random_range(0..4)],
                box_index: i % 3,
                bbox: GT_A,
                embedding: v,
            })
            .collect();
        let got: Vec<usize> = rank_gallery(&q, &cands).unwrap().iter().map(|r| r.candidate).collect();
        // oracle: a candidate's rank is the number of candidates that beat it
        let sim = |i: usize| q.iter().zip(&vecs[i]).map(|(a, b)| a * b).sum::<f64>();
        let beats = |j: usize, i: usize| {
            let (sj, si) = (sim(j), sim(i));
            sj > si
                || (sj == si && cands[j].image_id < cands[i].image_id)
                || (sj == si && cands[j].image_id == cands[i].image_id && cands[j].box_index < cands[i].box_index)
                || (sj == si && cands[j].image_id == cands[i].image_id && cands[j].box_index == cands[i].box_index && j < i)
        };
        let mut want = vec![0; cands.len()];
        for i in 0..cands.len() {
            let pos = (0..cands.len()).filter(|&j| j != i && beats(j, i)).count();
            want[pos] = i;
        }
        assert_eq!(got, want);
    }
}

#[test]
fn ties_break_on_image_then_box() {
    let v = vec![1.0, 0.0];
    let mk = |image_id, box_index| Candidate {
        image_id,
        box_index,
        bbox: GT_A,
        embedding: &v,
    };
    let cands = [mk("b", 0), mk("a", 2), mk("a", 1)];
    let order: Vec<usize> = rank_gallery(&v, &cands).unwrap().iter().map(|r| r.candidate).collect();
    assert_eq!(order, vec![2, 1, 0]);
}

#[test]
fn correct_then_wrong_and_wrong_then_correct() {
    let index = tiny_index(&[("g1", GT_A, Identity::Labeled(0)), ("g2", GT_B, Identity::Labeled(1))]);
    let opts = MatchOptions::default();
    let good = |s| emb(GT_A, 0.9, unit(vec![1.0, s]));
    let bad = |s| emb(GT_B, 0.9, unit(vec![1.0, s]));

    let (rep, res) = score_one(&index, vec![("g1", vec![good(0.1)]), ("g2", vec![bad(0.5)])], &opts, BoxMode::Detected).unwrap();
    assert_eq!((rep.map, rep.top1), (1.0, 1.0));
    assert!(res[0].entries[0].matched && !res[0].entries[1].matched);

    let (rep, _) = score_one(&index, vec![("g1", vec![good(0.5)]), ("g2", vec![bad(0.1)])], &opts, BoxMode::Detected).unwrap();
    assert_eq!((rep.map, rep.top1), (0.5, 0.0));
}

#[test]
fn ground_truth_is_claimed_once_and_misses_cost_recall() {
    let index = tiny_index(&[("g1", GT_A, Identity::Labeled(0)), ("g2", GT_B, Identity::Labeled(0))]);
    // two detections on the same ground truth, none on the second instance
    let dets = vec![emb(GT_A, 0.9, vec![1.0, 0.0]), emb(GT_A, 0.9, unit(vec![1.0, 0.2]))];
    let (rep, res) = score_one(&index, vec![("g1", dets), ("g2", vec![])], &MatchOptions::default(), BoxMode::Detected).unwrap();
    let flags: Vec<bool> = res[0].entries.iter().map(|e| e.matched).collect();
    assert_eq!(flags, vec![true, false]);
    assert!(claims_are_unique(&res));
    assert_eq!(res[0].num_gt, 2);
    assert_eq!(rep.map, 0.5);
}

#[test]
fn absent_identity_is_a_protocol_error() {
    let index = tiny_index(&[("g1", GT_A, Identity::Labeled(1)), ("g2", GT_B, Identity::Unlabeled)]);
    let err = score_one(&index, vec![("g1", vec![]), ("g2", vec![])], &MatchOptions::default(), BoxMode::Detected);
    assert!(matches!(err, Err(Error::Protocol(_))));
}

#[test]
fn missing_gallery_embeddings_are_an_error() {
    let index = tiny_index(&[("g1", GT_A, Identity::Labeled(0))]);
    let err = score_one(&index, vec![("g1", vec![])], &MatchOptions::default(), BoxMode::Detected);
    assert!(matches!(err, Err(Error::Protocol(_))));
}

#[test]
fn size_adaptive_threshold_loosens_small_boxes() {
    let small = BBox::new(50.0, 50.0, 60.0, 60.0);
    let index = tiny_index(&[("g1", small, Identity::Labeled(0))]);
    // IoU 1/3 with the 10x10 ground truth, whose adaptive threshold is 0.25
    let det = BBox::new(50.0, 50.0, 60.0, 80.0);
    assert!((iou(&det, &small) - 1.0 / 3.0).abs() < 1e-12);
    let run = |adaptive| {
        let opts = MatchOptions {
            size_adaptive: adaptive,
            ..MatchOptions::default()
        };
        assert_eq!(opts.threshold_for(&small), if adaptive { 0.25 } else { 0.5 });
        score_one(&index, vec![("g1", vec![emb(det, 0.9, vec![1.0, 0.0])]), ("g2", vec![])], &opts, BoxMode::Detected)
            .unwrap()
            .0
            .map
    };
    assert_eq!(run(false), 0.0);
    assert_eq!(run(true), 1.0);
    // large boxes keep the plain threshold
    let opts = MatchOptions {
        size_adaptive: true,
        ..MatchOptions::default()
    };
    assert_eq!(opts.threshold_for(&BBox::new(0.0, 0.0, 100.0, 200.0)), 0.5);
}

#[test]
fn low_scores_are_dropped_only_for_detections() {
    let index = tiny_index(&[("g1", GT_A, Identity::Labeled(0))]);
    let gallery = || vec![("g1", vec![emb(GT_A, 0.2, vec![1.0, 0.0])]), ("g2", vec![])];
    let opts = MatchOptions::default();
    let (det, res) = score_one(&index, gallery(), &opts, BoxMode::Detected).unwrap();
    assert!(res[0].entries.is_empty());
    assert_eq!(det.map, 0.0);
    let (gt, _) = score_one(&index, gallery(), &opts, BoxMode::GroundTruth).unwrap();
    assert_eq!(gt.map, 1.0);
}

#[test]
fn average_precision_by_hand() {
    assert_eq!(average_precision(&[true, false, true], 2), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(average_precision(&[false, false], 3), 0.0);
    assert_eq!(average_precision(&[true], 4), 0.25);
}

/// Embeds every box by the identity of the annotation it overlaps most,
/// as a one-hot vector, optionally blurred by seeded noise.
struct OracleModel<'a> {
    index: &'a DatasetIndex,
    noise: f64,
    seed: u64,
}

impl OracleModel<'_> {
    fn vector(&self, image: &ImageSample, b: &BBox) -> Vec<f64> {
        let dim = self.index.num_identities() + 1;
        let best = self
            .index
            .annotations_of(&image.image_id)
            .into_iter()
            .max_by(|x, y| iou(&x.bbox, b).total_cmp(&iou(&y.bbox, b)))
            .filter(|a| iou(&a.bbox, b) > 0.0);
        let mut v = vec![0.0; dim];
        match best.map(|a| a.identity) {
            Some(Identity::Labeled(l)) => v[l as usize] = 1.0,
            _ => v[dim - 1] = 1.0,
        }
        let h = image.image_id.bytes().fold(self.seed, |h, c| h.wrapping_mul(31).wrapping_add(c as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ b.x1.to_bits() ^ b.y1.to_bits().rotate_left(7));
        for x in &mut v {
            *x += self.noise * rng.random_range(-1.0..1.0);
        }
        unit(v)
    }
}

impl SearchModel for OracleModel<'_> {
    fn detect_and_embed(&self, image: &ImageSample) -> Result<Vec<PersonEmbedding>> {
        let boxes: Vec<BBox> = self.index.annotations_of(&image.image_id).iter().map(|a| a.bbox).collect();
        self.embed_boxes(image, &boxes)
    }

    fn embed_boxes(&self, image: &ImageSample, boxes: &[BBox]) -> Result<Vec<PersonEmbedding>> {
        Ok(boxes.iter().map(|b| emb(*b, 1.0, self.vector(image, b))).collect())
    }
}

fn synthetic_test(seed: u64) -> DatasetIndex {
    let spec = SyntheticSpec {
        num_identities: 6,
        instances_per_identity: 4,
        seed,
        ..SyntheticSpec::default()
    };
    make_synthetic(&spec).unwrap().1
}

#[test]
fn perfect_embeddings_saturate_in_gt_mode() {
    let index = synthetic_test(1);
    let model = OracleModel {
        index: &index,
        noise: 0.0,
        seed: 0,
    };
    let protocol = build_protocol(&index, GallerySize::All, 0).unwrap();
    let rep = evaluate_gt_boxes(&model, &index, &protocol, &MatchOptions::default()).unwrap();
    assert_eq!((rep.map, rep.top1), (1.0, 1.0));
    assert_eq!(rep.mode, BoxMode::GroundTruth);
}

#[test]
fn empty_query_set_is_rejected() {
    let index = synthetic_test(1);
    let model = OracleModel {
        index: &index,
        noise: 0.0,
        seed: 0,
    };
    let protocol = EvalProtocol {
        queries: vec![],
        galleries: vec![],
        gallery_size: GallerySize::All,
    };
    assert!(evaluate_gt_boxes(&model, &index, &protocol, &MatchOptions::default()).is_err());
}

#[test]
fn sweep_collapses_duplicates_and_all_uses_whole_set() {
    let index = synthetic_test(2);
    let model = OracleModel {
        index: &index,
        noise: 0.3,
        seed: 1,
    };
    let opts = MatchOptions::default();
    let sizes = [GallerySize::Fixed(4), GallerySize::All, GallerySize::Fixed(4)];
    let rep = gallery_sweep(&model, &index, &sizes, 0, BoxMode::Detected, &opts).unwrap();
    let got: Vec<GallerySize> = rep.table.iter().map(|r| r.gallery_size).collect();
    assert_eq!(got, vec![GallerySize::Fixed(4), GallerySize::All]);
    assert_eq!((rep.map, rep.top1), (rep.table[0].map, rep.table[0].top1));

    let all = gallery_sweep(&model, &index, &[GallerySize::All], 0, BoxMode::Detected, &opts).unwrap();
    assert_eq!(all.table.len(), 1);
    let protocol = build_protocol(&index, GallerySize::All, 0).unwrap();
    assert!(protocol.galleries.iter().all(|g| g.len() == index.images().len() - 1));
    let (direct, _) = evaluate(&model, &index, &protocol, BoxMode::Detected, &opts).unwrap();
    assert_eq!(direct.table, all.table);
}

#[test]
fn larger_galleries_are_harder_on_average() {
    let (mut small, mut large) = (0.0, 0.0);
    for seed in 0..10 {
        let index = synthetic_test(100 + seed);
        let model = OracleModel {
            index: &index,
            noise: 0.6,
            seed,
        };
        let sizes = [GallerySize::Fixed(3), GallerySize::All];
        let rep = gallery_sweep(&model, &index, &sizes, seed, BoxMode::GroundTruth, &MatchOptions::default()).unwrap();
        small += rep.table[0].map;
        large += rep.table[1].map;
    }
    assert!(large <= small, "mean mAP {} (all) vs {} (3)", large / 10.0, small / 10.0);
}

#[test]
fn cross_dataset_tags_and_same_dataset_parity() {
    let index = synthetic_test(3);
    let model = OracleModel {
        index: &index,
        noise: 0.4,
        seed: 2,
    };
    let protocol = build_protocol(&index, GallerySize::Fixed(5), 0).unwrap();
    let opts = MatchOptions::default();
    let cross = cross_dataset_eval(&model, "synthetic", &index, &protocol, BoxMode::Detected, &opts).unwrap();
    let (plain, _) = evaluate(&model, &index, &protocol, BoxMode::Detected, &opts).unwrap();
    assert_eq!(cross.source_dataset.as_deref(), Some("synthetic"));
    assert_eq!(cross.target_dataset, "synthetic");
    assert_eq!(cross.table, plain.table);
    assert!(cross.to_string().contains("synthetic -> synthetic"));
}

#[test]
fn evaluation_is_deterministic() {
    let index = synthetic_test(4);
    let model = OracleModel {
        index: &index,
        noise: 0.5,
        seed: 3,
    };
    let protocol = build_protocol(&index, GallerySize::All, 0).unwrap();
    let a = evaluate(&model, &index, &protocol, BoxMode::Detected, &MatchOptions::default()).unwrap();
    let b = evaluate(&model, &index, &protocol, BoxMode::Detected, &MatchOptions::default()).unwrap();
    assert_eq!(a, b);
    assert!(claims_are_unique(&a.1));
}

#[test]
fn metric_rows_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/rows.jsonl");
    let mut rep = MetricsReport::single(
        "prw",
        BoxMode::Detected,
        SizeRow {
            gallery_size: GallerySize::All,
            map: 0.25,
            top1: 0.5,
            num_queries: 3,
        },
    );
    rep.table.push(SizeRow {
        gallery_size: GallerySize::Fixed(100),
        map: 0.3,
        top1: 0.6,
        num_queries: 3,
    });
    write_rows(&path, &[rep.clone()]).unwrap();
    write_rows(&path, &[rep.clone()]).unwrap();
    let rows = read_rows(&path).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[..2], rep.rows()[..]);
    assert_eq!(rows[1].gallery_size, GallerySize::Fixed(100));

    std::fs::write(&path, serde_json::to_string(&MetricsRow { schema_version: 99, ..rows[0].clone() }).unwrap()).unwrap();
    assert!(read_rows(&path).is_err());
    assert!(matches!(read_rows(&dir.path().join("none")), Err(Error::MissingFile(_))));
}

proptest! {
    #[test]
    fn ap_is_a_probability(flags in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let hits = flags.iter().filter(|f| **f).count();
        let ap = average_precision(&flags, hits + extra);
        prop_assert!((0.0..=1.0).contains(&ap));
        if extra == 0 && hits > 0 && flags.iter().take(hits).all(|f| *f) {
            prop_assert!((ap - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn map_is_the_mean_of_query_aps(seed in 0u64..40) {
        let index = synthetic_test(seed);
        let model = OracleModel { index: &index, noise: 0.8, seed };
        let protocol = build_protocol(&index, GallerySize::Fixed(4), seed).unwrap();
        let (rep, res) = evaluate(&model, &index, &protocol, BoxMode::Detected, &MatchOptions::default()).unwrap();
        let mean = res.iter().map(|r| r.average_precision).sum::<f64>() / res.len() as f64;
        prop_assert!((rep.map - mean).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&rep.map) && (0.0..=1.0).contains(&rep.top1));
        for r in &res {
            prop_assert!(r.entries.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        }
        prop_assert!(claims_are_unique(&res));
    }
}
