//! CUHK-SYSU loader.
//!
//! Expected layout under `root`:
//!
//! ```text
//! Image/SSM/*.jpg
//! annotation/Images.mat                 Img(i).imname / .box(j).idlocate
//! annotation/pool.mat                   pool: test image names
//! annotation/test/train_test/Train.mat  Train{k}.idname / .scene(j).imname, .idlocate
//! annotation/test/train_test/TestG50.mat (and TestG100 ... TestG4000)
//! ```

use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::warn;

use super::mat::{read_mat, MatValue};
use super::{image_dims, ingest_xywh, require};
use super::{BoxAnnotation, DatasetIndex, EvalProtocol, GallerySize, Identity, ImageSample, ImageSource, QuerySpec, Split};
use crate::error::{Error, Result};

pub const GALLERY_SIZES: [usize; 6] = [50, 100, 500, 1000, 2000, 4000];

type BoxKey = (String, [i64; 4]);

fn key(imname: &str, xywh: &[f64]) -> BoxKey {
    let mut k = [0i64; 4];
    for (dst, v) in k.iter_mut().zip(xywh) {
        *dst = v.round() as i64;
    }
    (imname.to_string(), k)
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn var<'a>(file: &'a super::mat::MatFile, path: &Path, name: &str) -> Result<&'a MatValue> {
    file.get(name)
        .ok_or_else(|| bad(path, format!("variable {name} not found")))
}

fn string_field(v: &MatValue, i: usize, name: &str, path: &Path) -> Result<String> {
    v.field(i, name)
        .and_then(|f| f.as_string())
        .ok_or_else(|| bad(path, format!("element {i}: missing text field {name}")))
}

fn numeric_field<'a>(v: &'a MatValue, i: usize, name: &str, path: &Path) -> Result<&'a [f64]> {
    v.field(i, name)
        .and_then(|f| f.as_numeric())
        .ok_or_else(|| bad(path, format!("element {i}: missing numeric field {name}")))
}

/// Struct elements of `v`, unwrapping a 1x1 cell when present.
fn as_struct(v: &MatValue) -> Option<&MatValue> {
    match v {
        MatValue::Struct { .. } => Some(v),
        MatValue::Cell { items, .. } if items.len() == 1 => as_struct(&items[0]),
        _ => None,
    }
}

struct Scene {
    image: ImageSample,
    boxes: Vec<[f64; 4]>,
}

/// Loads the train and test splits with their published identity labels.
/// The test index carries the official queries.
pub fn load_cuhk_sysu(root: &Path) -> Result<(DatasetIndex, DatasetIndex)> {
    let ann = root.join("annotation");
    let images_path = ann.join("Images.mat");
    let pool_path = ann.join("pool.mat");
    let train_path = ann.join("test/train_test/Train.mat");
    let query_path = ann.join("test/train_test/TestG50.mat");
    for p in [&images_path, &pool_path, &train_path, &query_path] {
        require(p)?;
    }
    let image_dir = root.join("Image/SSM");

    let images_mat = read_mat(&images_path)?;
    let img = var(&images_mat, &images_path, "Img")?;
    let n = img
        .struct_len()
        .ok_or_else(|| bad(&images_path, "Img is not a struct array"))?;
    let mut scenes: Vec<Scene> = Vec::with_capacity(n);
    for i in 0..n {
        let imname = string_field(img, i, "imname", &images_path)?;
        let path = image_dir.join(&imname);
        let (width, height) = image_dims(&path)?;
        let mut boxes = Vec::new();
        if let Some(b) = img.field(i, "box").and_then(as_struct) {
            for j in 0..b.struct_len().unwrap_or(0) {
                let loc = numeric_field(b, j, "idlocate", &images_path)?;
                if loc.len() != 4 {
                    return Err(Error::Annotation {
                        image_id: imname.clone(),
                        msg: format!("idlocate has {} values", loc.len()),
                    });
                }
                boxes.push([loc[0], loc[1], loc[2], loc[3]]);
            }
        }
        scenes.push(Scene {
            image: ImageSample {
                image_id: imname,
                source: ImageSource::File(path),
                width,
                height,
                scene_tag: None,
            },
            boxes,
        });
    }

    let pool_mat = read_mat(&pool_path)?;
    let pool: HashSet<String> = var(&pool_mat, &pool_path, "pool")?
        .cells()
        .ok_or_else(|| bad(&pool_path, "pool is not a cell array"))?
        .iter()
        .filter_map(|c| c.as_string())
        .collect();

    // Labeled training boxes.
    let train_mat = read_mat(&train_path)?;
    let train_cells = var(&train_mat, &train_path, "Train")?
        .cells()
        .ok_or_else(|| bad(&train_path, "Train is not a cell array"))?;
    let mut train_vocab = Vec::with_capacity(train_cells.len());
    let mut train_labels: HashMap<BoxKey, u32> = HashMap::new();
    for (k, cell) in train_cells.iter().enumerate() {
        let s = as_struct(cell).ok_or_else(|| bad(&train_path, format!("Train{{{k}}} is not a struct")))?;
        train_vocab.push(string_field(s, 0, "idname", &train_path)?);
        let scene = s
            .field(0, "scene")
            .and_then(as_struct)
            .ok_or_else(|| bad(&train_path, format!("Train{{{k}}} has no scene")))?;
        for j in 0..scene.struct_len().unwrap_or(0) {
            let imname = string_field(scene, j, "imname", &train_path)?;
            let loc = numeric_field(scene, j, "idlocate", &train_path)?;
            train_labels.insert(key(&imname, loc), k as u32);
        }
    }

    // Test identities come from the query list; one identity per query.
    let query_mat = read_mat(&query_path)?;
    let protocol = var(&query_mat, &query_path, "TestG50")?;
    let (queries_raw, gallery_labels, test_vocab) = parse_test_protocol(protocol, &query_path)?;

    let mut train_images = Vec::new();
    let mut train_anns = Vec::new();
    let mut test_images = Vec::new();
    let mut test_anns = Vec::new();
    let mut used_train = HashSet::new();
    let mut used_test = HashSet::new();
    for scene in scenes {
        let id = scene.image.image_id.clone();
        let is_test = pool.contains(&id);
        let (labels, used, anns, images) = if is_test {
            (&gallery_labels, &mut used_test, &mut test_anns, &mut test_images)
        } else {
            (&train_labels, &mut used_train, &mut train_anns, &mut train_images)
        };
        for b in &scene.boxes {
            let k = key(&id, b);
            let identity = match labels.get(&k) {
                Some(&l) => {
                    used.insert(k);
                    Identity::Labeled(l)
                }
                None => Identity::Unlabeled,
            };
            anns.push(BoxAnnotation {
                image_id: id.clone(),
                bbox: ingest_xywh(&id, b, scene.image.width, scene.image.height)?,
                identity,
            });
        }
        images.push(scene.image);
    }
    for (labels, used, split) in [(&train_labels, &used_train, "train"), (&gallery_labels, &used_test, "test")] {
        let missing = labels.keys().filter(|k| !used.contains(*k)).count();
        if missing > 0 {
            warn!("{missing} labeled {split} boxes have no matching box in Images.mat");
        }
    }

    let train = DatasetIndex::new("cuhk-sysu", Split::Train, train_images, train_anns, train_vocab)?;
    let test = DatasetIndex::new("cuhk-sysu", Split::Test, test_images, test_anns, test_vocab)?;
    let mut queries = Vec::with_capacity(queries_raw.len());
    for (label, (imname, loc)) in queries_raw.into_iter().enumerate() {
        let img = test.image(&imname).ok_or_else(|| Error::Annotation {
            image_id: imname.clone(),
            msg: "query image missing from the test pool".into(),
        })?;
        let bbox = ingest_xywh(&imname, &loc, img.width, img.height)?;
        queries.push(QuerySpec {
            image_id: imname,
            bbox,
            identity: label as u32,
        });
    }
    let test = test.with_queries(queries)?;
    Ok((train, test))
}

type RawQueries = Vec<(String, Vec<f64>)>;

fn parse_test_protocol(
    protocol: &MatValue,
    path: &Path,
) -> Result<(RawQueries, HashMap<BoxKey, u32>, Vec<String>)> {
    let n = protocol
        .struct_len()
        .ok_or_else(|| bad(path, "protocol is not a struct array"))?;
    let mut queries = Vec::with_capacity(n);
    let mut labels = HashMap::new();
    let mut vocab = Vec::with_capacity(n);
    for i in 0..n {
        let q = protocol
            .field(i, "Query")
            .and_then(as_struct)
            .ok_or_else(|| bad(path, format!("entry {i} has no Query")))?;
        let imname = string_field(q, 0, "imname", path)?;
        let loc = numeric_field(q, 0, "idlocate", path)?.to_vec();
        let idname = q
            .field(0, "idname")
            .and_then(|v| v.as_string())
            .unwrap_or_else(|| format!("q{i}"));
        vocab.push(idname);
        labels.insert(key(&imname, &loc), i as u32);
        queries.push((imname, loc));
        if let Some(g) = protocol.field(i, "Gallery").and_then(as_struct) {
            for j in 0..g.struct_len().unwrap_or(0) {
                let loc = numeric_field(g, j, "idlocate", path)?;
                if loc.len() == 4 {
                    let name = string_field(g, j, "imname", path)?;
                    labels.insert(key(&name, loc), i as u32);
                }
            }
        }
    }
    Ok((queries, labels, vocab))
}

/// Reads the official query/gallery lists for one of the published gallery
/// sizes (`TestG<size>.mat`).
pub fn load_cuhk_protocol(root: &Path, test: &DatasetIndex, gallery_size: GallerySize) -> Result<EvalProtocol> {
    let GallerySize::Fixed(size) = gallery_size else {
        return Err(Error::Protocol(
            "CUHK-SYSU publishes fixed gallery sizes only; use build_protocol for ALL".into(),
        ));
    };
    if !GALLERY_SIZES.contains(&size) {
        return Err(Error::Protocol(format!(
            "no official CUHK-SYSU gallery of size {size}; published sizes are {GALLERY_SIZES:?}"
        )));
    }
    let name = format!("TestG{size}");
    let path = root.join(format!("annotation/test/train_test/{name}.mat"));
    let mat = read_mat(&path)?;
    let protocol = var(&mat, &path, &name)?;
    let n = protocol
        .struct_len()
        .ok_or_else(|| bad(&path, "protocol is not a struct array"))?;
    if n != test.queries().len() {
        return Err(bad(
            &path,
            format!("{n} queries but the test index has {}", test.queries().len()),
        ));
    }
    let mut galleries = Vec::with_capacity(n);
    for i in 0..n {
        let g = protocol
            .field(i, "Gallery")
            .and_then(as_struct)
            .ok_or_else(|| bad(&path, format!("entry {i} has no Gallery")))?;
        let mut list = Vec::with_capacity(size);
        for j in 0..g.struct_len().unwrap_or(0) {
            let imname = string_field(g, j, "imname", &path)?;
            if test.image_index(&imname).is_none() {
                return Err(Error::Annotation {
                    image_id: imname,
                    msg: "gallery image missing from the test pool".into(),
                });
            }
            list.push(imname);
        }
        galleries.push(list);
    }
    Ok(EvalProtocol {
        queries: test.queries().to_vec(),
        galleries,
        gallery_size,
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_fixture_tree() {
        let dir = tempfile::tempdir().unwrap();
        fixture::write(dir.path());
        let (train, test) = load_cuhk_sysu(dir.path()).unwrap();
        assert_eq!(train.images().len(), 2);
        assert_eq!(test.images().len(), 2);
        assert_eq!(train.identities(), &["p1".to_string()]);
        let s1 = train.annotations_of("s1.jpg");
        assert_eq!(s1[0].identity, Identity::Labeled(0));
        assert_eq!(s1[1].identity, Identity::Unlabeled);
        // 50 + 30 exceeds the 80-pixel height and is clipped.
        assert_eq!(s1[1].bbox.y2, 80.0);
        assert_eq!(test.queries().len(), 1);
        assert_eq!(test.annotations_of("s4.jpg")[0].identity, Identity::Labeled(0));
        assert_eq!(test.annotations_of("s3.jpg")[1].identity, Identity::Unlabeled);

        let p = load_cuhk_protocol(dir.path(), &test, GallerySize::Fixed(100)).unwrap();
        assert_eq!(p.galleries, vec![vec!["s4.jpg".to_string()]]);
        assert!(load_cuhk_protocol(dir.path(), &test, GallerySize::Fixed(77)).is_err());
    }

    #[test]
    fn empty_directory_names_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cuhk_sysu(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert!(err.to_string().contains("Images.mat"));
    }

    #[test]
    fn malformed_box_reports_image() {
        let err = ingest_xywh("s7.jpg", &[5.0, 5.0, -3.0, 10.0], 100, 100).unwrap_err();
        assert!(matches!(err, Error::Annotation { ref image_id, .. } if image_id == "s7.jpg"));
    }
}
