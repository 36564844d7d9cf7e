//! Query/gallery protocols over a test index.

use std::collections::{BTreeSet, HashMap};

use log::warn;
use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetIndex, EvalProtocol, GallerySize, Identity, QuerySpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolOptions {
    /// Use the dataset's published queries when the index carries them.
    pub official_queries: bool,
    /// Without official queries: every labeled instance becomes a query
    /// instead of one seeded instance per identity.
    pub all_instances: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            official_queries: true,
            all_instances: false,
        }
    }
}

/// Builds per-query galleries: every other image holding the query identity,
/// topped up with seeded distractors to `gallery_size`.
pub fn build_protocol(index: &DatasetIndex, gallery_size: GallerySize, seed: u64) -> Result<EvalProtocol> {
    build_protocol_with(index, gallery_size, seed, &ProtocolOptions::default())
}

pub fn build_protocol_with(
    index: &DatasetIndex,
    gallery_size: GallerySize,
    seed: u64,
    opts: &ProtocolOptions,
) -> Result<EvalProtocol> {
    let n_images = index.images().len();
    if n_images < 2 {
        return Err(Error::Protocol("a protocol needs at least two test images".into()));
    }
    // identity -> image positions holding it
    let mut holders: HashMap<u32, BTreeSet<usize>> = HashMap::new();
    for i in 0..n_images {
        for a in index.annotations_at(i) {
            if let Identity::Labeled(l) = a.identity {
                holders.entry(l).or_default().insert(i);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = select_queries(index, &holders, &mut rng, opts);
    if queries.is_empty() {
        return Err(Error::Protocol(
            "no identity appears in two different images; nothing to query".into(),
        ));
    }

    let mut galleries = Vec::with_capacity(queries.len());
    for q in &queries {
        let qi = index
            .image_index(&q.image_id)
            .ok_or_else(|| Error::Protocol(format!("query image {} not in index", q.image_id)))?;
        let target = match gallery_size {
            GallerySize::All => n_images - 1,
            GallerySize::Fixed(s) => s.min(n_images - 1),
        };
        let positives: BTreeSet<usize> = holders
            .get(&q.identity)
            .map(|s| s.iter().copied().filter(|&i| i != qi).collect())
            .unwrap_or_default();
        let chosen: BTreeSet<usize> = if target == n_images - 1 {
            (0..n_images).filter(|&i| i != qi).collect()
        } else if positives.len() >= target {
            if positives.len() > target {
                warn!(
                    "query {} ({}): {} positive images exceed gallery size {target}; using all positives",
                    q.image_id,
                    q.identity,
                    positives.len()
                );
            }
            positives
        } else {
            let distractors: Vec<usize> = (0..n_images)
                .filter(|&i| i != qi && !positives.contains(&i))
                .collect();
            let k = target - positives.len();
            let mut out = positives;
            out.extend(index::sample(&mut rng, distractors.len(), k).into_iter().map(|j| distractors[j]));
            out
        };
        galleries.push(
            chosen
                .into_iter()
                .map(|i| index.images()[i].image_id.clone())
                .collect(),
        );
    }
    Ok(EvalProtocol {
        queries,
        galleries,
        gallery_size,
    })
}

fn select_queries(
    index: &DatasetIndex,
    holders: &HashMap<u32, BTreeSet<usize>>,
    rng: &mut ChaCha8Rng,
    opts: &ProtocolOptions,
) -> Vec<QuerySpec> {
    if opts.official_queries && !index.queries().is_empty() {
        return index.queries().to_vec();
    }
    let searchable = |l: u32| holders.get(&l).is_some_and(|s| s.len() >= 2);
    let mut per_identity: Vec<Vec<QuerySpec>> = vec![Vec::new(); index.num_identities()];
    for a in index.annotations() {
        if let Identity::Labeled(l) = a.identity {
            if searchable(l) {
                per_identity[l as usize].push(QuerySpec {
                    image_id: a.image_id.clone(),
                    bbox: a.bbox,
                    identity: l,
                });
            }
        }
    }
    if opts.all_instances {
        return per_identity.into_iter().flatten().collect();
    }
    per_identity
        .iter()
        .filter_map(|cands| cands.choose(rng).cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, BoxAnnotation, ImageSample, Split};
    use image::RgbImage;
    use proptest::prelude::*;

    /// `layout[i]` lists the identities (None = unlabeled) in image i.
    fn index_from(layout: &[Vec<Option<u32>>], n_ids: usize) -> DatasetIndex {
        let mut images = Vec::new();
        let mut anns = Vec::new();
        for (i, people) in layout.iter().enumerate() {
            let id = format!("img{i}");
            images.push(ImageSample::in_memory(&id, RgbImage::new(40, 40), None));
            for (j, p) in people.iter().enumerate() {
                let x = j as f64 * 8.0;
                anns.push(BoxAnnotation {
                    image_id: id.clone(),
                    bbox: BBox::new(x, 0.0, x + 6.0, 30.0),
                    identity: p.map_or(Identity::Unlabeled, Identity::Labeled),
                });
            }
        }
        let vocab = (0..n_ids).map(|i| format!("id{i}")).collect();
        DatasetIndex::new("t", Split::Test, images, anns, vocab).unwrap()
    }

    fn layout_strategy() -> impl Strategy<Value = Vec<Vec<Option<u32>>>> {
        prop::collection::vec(prop::collection::vec(prop::option::weighted(0.8, 0u32..4), 0..4), 2..12)
    }

    proptest! {
        #[test]
        fn positives_included_query_excluded(layout in layout_strategy(), size in 1usize..10, seed in 0u64..50) {
            let index = index_from(&layout, 4);
            let Ok(p) = build_protocol(&index, GallerySize::Fixed(size), seed) else {
                return Ok(());
            };
            for (q, g) in p.queries.iter().zip(&p.galleries) {
                prop_assert!(!g.contains(&q.image_id));
                // exhaustive scan for positives
                for (i, people) in layout.iter().enumerate() {
                    let id = format!("img{i}");
                    if id != q.image_id && people.contains(&Some(q.identity)) {
                        prop_assert!(g.contains(&id));
                    }
                }
                let n_pos = layout.iter().enumerate()
                    .filter(|(i, ps)| format!("img{i}") != q.image_id && ps.contains(&Some(q.identity)))
                    .count();
                prop_assert_eq!(g.len(), size.min(layout.len() - 1).max(n_pos));
                let unique: BTreeSet<_> = g.iter().collect();
                prop_assert_eq!(unique.len(), g.len());
            }
            let again = build_protocol(&index, GallerySize::Fixed(size), seed).unwrap();
            prop_assert_eq!(again, p);
        }
    }

    #[test]
    fn all_and_saturated_sizes_take_every_other_image() {
        let layout = vec![vec![Some(0)], vec![Some(0), None], vec![None], vec![Some(1)], vec![Some(1)]];
        let index = index_from(&layout, 2);
        for size in [GallerySize::All, GallerySize::Fixed(4), GallerySize::Fixed(100)] {
            let p = build_protocol(&index, size, 1).unwrap();
            for (q, g) in p.queries.iter().zip(&p.galleries) {
                assert_eq!(g.len(), 4);
                assert!(!g.contains(&q.image_id));
            }
        }
    }

    #[test]
    fn positives_override_small_gallery() {
        let layout = vec![vec![Some(0)], vec![Some(0)], vec![Some(0)], vec![Some(0)], vec![None]];
        let index = index_from(&layout, 1);
        let p = build_protocol(&index, GallerySize::Fixed(1), 0).unwrap();
        assert_eq!(p.galleries[0].len(), 3);
    }

    #[test]
    fn all_instances_mode_queries_every_searchable_box() {
        let layout = vec![vec![Some(0), Some(1)], vec![Some(0)], vec![Some(2)]];
        let index = index_from(&layout, 3);
        let opts = ProtocolOptions {
            official_queries: true,
            all_instances: true,
        };
        let p = build_protocol_with(&index, GallerySize::All, 0, &opts).unwrap();
        assert_eq!(p.queries.len(), 2);
        assert!(p.queries.iter().all(|q| q.identity == 0));
    }

    #[test]
    fn official_queries_take_precedence() {
        let layout = vec![vec![Some(0)], vec![Some(0)], vec![None]];
        let official = vec![QuerySpec {
            image_id: "img1".into(),
            bbox: BBox::new(0.0, 0.0, 6.0, 30.0),
            identity: 0,
        }];
        let index = index_from(&layout, 1).with_queries(official.clone()).unwrap();
        let p = build_protocol(&index, GallerySize::Fixed(1), 0).unwrap();
        assert_eq!(p.queries, official);
        assert_eq!(p.galleries[0], vec!["img0".to_string()]);
    }
}
