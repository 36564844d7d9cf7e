//! MovieNet-CS: character-search splits rebuilt from MovieNet body annotations.
//!
//! Layout under `root`:
//!
//! ```text
//! annotation/<movie>.json       {"cast": [{"pid", "shot_idx", "img_idx", "body": {"bbox": [x1,y1,x2,y2]}}]}
//! keyframes/<movie>/shot_XXXX_img_Y.jpg
//! ```
//!
//! Cast entries with pid `"others"` are unlabeled. Identities are split by
//! a seeded shuffle; training identities are capped at `cap_n` instances by
//! seeded subsampling. Every other box becomes unlabeled.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{image_dims, ingest_box, require};
use super::{BBox, BoxAnnotation, DatasetIndex, Identity, ImageSample, ImageSource, Split};
use crate::error::{Error, Result};

pub const PUBLISHED_CAPS: [usize; 3] = [10, 30, 70];
pub const UNLABELED_PID: &str = "others";

#[derive(Clone, Debug)]
pub struct MovieNetOptions {
    /// Seed for the identity split and the per-identity subsampling.
    pub seed: u64,
    /// Number of identities held out for testing.
    pub test_identities: usize,
    /// Identities with fewer labeled instances are left out of both splits.
    pub min_instances: usize,
    /// Accept caps outside the published settings.
    pub allow_custom_cap: bool,
}

impl Default for MovieNetOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            test_identities: 1000,
            min_instances: 1,
            allow_custom_cap: false,
        }
    }
}

#[derive(Deserialize)]
struct MovieFile {
    #[serde(default)]
    cast: Vec<CastEntry>,
}

#[derive(Deserialize)]
struct CastEntry {
    pid: Option<String>,
    shot_idx: u32,
    img_idx: u32,
    body: Option<Body>,
}

#[derive(Deserialize)]
struct Body {
    bbox: Vec<f64>,
}

struct Instance {
    image: usize,
    bbox: BBox,
    pid: Option<String>,
}

pub fn check_cap(cap_n: usize, opts: &MovieNetOptions) -> Result<()> {
    if cap_n == 0 || (!PUBLISHED_CAPS.contains(&cap_n) && !opts.allow_custom_cap) {
        return Err(Error::Config(format!(
            "cap_n {cap_n} is not one of the published settings {PUBLISHED_CAPS:?}; pass the override flag to use it"
        )));
    }
    Ok(())
}

pub fn build_movienet_cs(root: &Path, cap_n: usize, opts: &MovieNetOptions) -> Result<(DatasetIndex, DatasetIndex)> {
    check_cap(cap_n, opts)?;
    let ann_dir = root.join("annotation");
    require(&ann_dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ann_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingestion {
            path: ann_dir,
            msg: "no movie annotation files".into(),
        });
    }

    let mut images: Vec<ImageSample> = Vec::new();
    let mut image_slot: BTreeMap<String, usize> = BTreeMap::new();
    let mut instances: Vec<Instance> = Vec::new();
    for file in &files {
        let movie = file.file_stem().unwrap().to_string_lossy().to_string();
        let parsed: MovieFile = serde_json::from_str(&std::fs::read_to_string(file)?).map_err(|e| Error::Ingestion {
            path: file.clone(),
            msg: e.to_string(),
        })?;
        for c in parsed.cast {
            let Some(body) = c.body else { continue };
            let rel = format!("{movie}/shot_{:04}_img_{}.jpg", c.shot_idx, c.img_idx);
            let slot = match image_slot.get(&rel) {
                Some(&s) => s,
                None => {
                    let path = root.join("keyframes").join(&rel);
                    let (width, height) = image_dims(&path)?;
                    images.push(ImageSample {
                        image_id: rel.clone(),
                        source: ImageSource::File(path),
                        width,
                        height,
                        scene_tag: Some(movie.clone()),
                    });
                    image_slot.insert(rel.clone(), images.len() - 1);
                    images.len() - 1
                }
            };
            if body.bbox.len() != 4 {
                return Err(Error::Annotation {
                    image_id: rel,
                    msg: format!("body box has {} values", body.bbox.len()),
                });
            }
            let img = &images[slot];
            let raw = BBox::new(body.bbox[0], body.bbox[1], body.bbox[2], body.bbox[3]);
            let bbox = ingest_box(&img.image_id, raw, img.width, img.height)?;
            let pid = c.pid.filter(|p| p != UNLABELED_PID && !p.is_empty());
            instances.push(Instance { image: slot, bbox, pid });
        }
    }
    split_instances(images, instances, cap_n, opts)
}

fn split_instances(
    images: Vec<ImageSample>,
    instances: Vec<Instance>,
    cap_n: usize,
    opts: &MovieNetOptions,
) -> Result<(DatasetIndex, DatasetIndex)> {
    let mut by_pid: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if let Some(p) = &inst.pid {
            by_pid.entry(p.as_str()).or_default().push(i);
        }
    }
    let mut eligible: Vec<&str> = by_pid
        .iter()
        .filter(|(_, v)| v.len() >= opts.min_instances)
        .map(|(k, _)| *k)
        .collect();
    if eligible.len() <= opts.test_identities {
        return Err(Error::Config(format!(
            "{} eligible identities cannot supply {} test identities and a training set",
            eligible.len(),
            opts.test_identities
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    eligible.shuffle(&mut rng);
    let (test_ids, train_ids) = eligible.split_at(opts.test_identities);
    let mut test_vocab = test_ids.to_vec();
    test_vocab.sort_unstable();
    let mut train_vocab = train_ids.to_vec();
    train_vocab.sort_unstable();

    let mut test_label = BTreeMap::new();
    let mut test_images = BTreeSet::new();
    for (l, pid) in test_vocab.iter().enumerate() {
        test_label.insert(*pid, l as u32);
        for &i in &by_pid[pid] {
            test_images.insert(instances[i].image);
        }
    }
    // Subsampling walks identities in vocabulary order so it does not depend
    // on the shuffle beyond the split itself.
    let mut train_label = BTreeMap::new();
    let mut train_images = BTreeSet::new();
    for (l, pid) in train_vocab.iter().enumerate() {
        let all = &by_pid[pid];
        let picked: Vec<usize> = if all.len() > cap_n {
            let mut idx = index::sample(&mut rng, all.len(), cap_n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| all[k]).collect()
        } else {
            all.clone()
        };
        for i in picked {
            if !test_images.contains(&instances[i].image) {
                train_label.insert(i, l as u32);
                train_images.insert(instances[i].image);
            }
        }
    }

    let assemble = |split: Split, chosen: &BTreeSet<usize>, vocab: Vec<&str>| -> Result<DatasetIndex> {
        let mut anns = Vec::new();
        for (i, inst) in instances.iter().enumerate() {
            if !chosen.contains(&inst.image) {
                continue;
            }
            let label = match split {
                Split::Test => inst.pid.as_deref().and_then(|p| test_label.get(p)).copied(),
                Split::Train => train_label.get(&i).copied(),
            };
            anns.push(BoxAnnotation {
                image_id: images[inst.image].image_id.clone(),
                bbox: inst.bbox,
                identity: label.map_or(Identity::Unlabeled, Identity::Labeled),
            });
        }
        let imgs = chosen.iter().map(|&s| images[s].clone()).collect();
        DatasetIndex::new(
            "movienet-cs",
            split,
            imgs,
            anns,
            vocab.into_iter().map(str::to_string).collect(),
        )
    };
    let train = assemble(Split::Train, &train_images, train_vocab)?;
    let test = assemble(Split::Test, &test_images, test_vocab)?;
    Ok((train, test))
}

/// Number of labeled boxes per identity label.
pub fn instance_counts(index: &DatasetIndex) -> Vec<usize> {
    let mut counts = vec![0; index.num_identities()];
    for a in index.annotations() {
        if let Identity::Labeled(l) = a.identity {
            counts[l as usize] += 1;
        }
    }
    counts
}

/// Images of `index` that contain at least one labeled box.
pub fn labeled_images(index: &DatasetIndex) -> HashSet<&str> {
    index
        .annotations()
        .iter()
        .filter(|a| a.identity.is_labeled())
        .map(|a| a.image_id.as_str())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;
    use serde_json::json;

    /// Two movies, `n_ids` characters each appearing in `per_id` frames.
    fn write_fixture(root: &Path, n_ids: usize, per_id: usize) {
        for movie in ["tt01", "tt02"] {
            let dir = root.join("keyframes").join(movie);
            std::fs::create_dir_all(&dir).unwrap();
            let mut cast = Vec::new();
            for shot in 0..per_id {
                RgbImage::new(64, 48).save(dir.join(format!("shot_{shot:04}_img_0.jpg"))).unwrap();
                for id in 0..n_ids {
                    let x = (id * 6) as f64;
                    cast.push(json!({
                        "pid": format!("nm{movie}{id}"),
                        "shot_idx": shot, "img_idx": 0,
                        "body": {"bbox": [x, 2.0, x + 5.0, 40.0]}
                    }));
                }
                cast.push(json!({"pid": "others", "shot_idx": shot, "img_idx": 0,
                    "body": {"bbox": [50.0, 1.0, 60.0, 45.0]}}));
                cast.push(json!({"pid": "nmx", "shot_idx": shot, "img_idx": 0, "body": null}));
            }
            std::fs::create_dir_all(root.join("annotation")).unwrap();
            std::fs::write(
                root.join(format!("annotation/{movie}.json")),
                json!({ "cast": cast }).to_string(),
            )
            .unwrap();
        }
    }

    fn opts(test_identities: usize) -> MovieNetOptions {
        MovieNetOptions {
            seed: 3,
            test_identities,
            min_instances: 2,
            allow_custom_cap: true,
        }
    }

    #[test]
    fn caps_are_validated() {
        assert!(check_cap(10, &MovieNetOptions::default()).is_ok());
        assert!(matches!(check_cap(20, &MovieNetOptions::default()), Err(Error::Config(_))));
        assert!(check_cap(20, &opts(1)).is_ok());
        assert!(check_cap(0, &opts(1)).is_err());
    }

    #[test]
    fn split_respects_cap_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 6);
        let (train, test) = build_movienet_cs(dir.path(), 2, &opts(2)).unwrap();
        assert_eq!(test.num_identities(), 2);
        assert_eq!(train.num_identities(), 4);
        assert!(instance_counts(&train).iter().all(|&c| c <= 2));
        let counts = instance_counts(&test);
        assert!(counts.iter().all(|&c| c == 6), "{counts:?}");
        for img in train.images() {
            assert!(test.image(&img.image_id).is_none());
        }
        let unlabeled = test.annotations().iter().filter(|a| !a.identity.is_labeled()).count();
        assert!(unlabeled >= 6);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 6);
        let a = build_movienet_cs(dir.path(), 2, &opts(2)).unwrap();
        let b = build_movienet_cs(dir.path(), 2, &opts(2)).unwrap();
        assert_eq!(a.0.annotations(), b.0.annotations());
        assert_eq!(a.1.identities(), b.1.identities());
    }

    #[test]
    fn too_few_identities_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 1, 3);
        assert!(build_movienet_cs(dir.path(), 10, &opts(5)).is_err());
    }
}
