//! PRW loader.
//!
//! Expected layout under `root`:
//!
//! ```text
//! frames/<name>.jpg
//! annotations/<name>.jpg.mat   box_new | anno_file | anno_previous: rows [id, x, y, w, h]
//! frame_train.mat              img_index_train
//! frame_test.mat               img_index_test
//! query_info.txt               "pid x y w h name" per line
//! ```
//!
//! Person id `-2` marks an unlabeled pedestrian.

use std::collections::BTreeMap;
use std::path::Path;

use super::mat::{read_mat, MatValue};
use super::{image_dims, ingest_xywh, require};
use super::{BoxAnnotation, DatasetIndex, Identity, ImageSample, ImageSource, QuerySpec, Split};
use crate::error::{Error, Result};

const BOX_KEYS: [&str; 3] = ["box_new", "anno_file", "anno_previous"];

fn frame_list(path: &Path, var: &str) -> Result<Vec<String>> {
    require(path)?;
    let mat = read_mat(path)?;
    let v = mat.get(var).ok_or_else(|| Error::Ingestion {
        path: path.to_path_buf(),
        msg: format!("variable {var} not found"),
    })?;
    let names: Option<Vec<String>> = match v {
        MatValue::Cell { items, .. } => items.iter().map(|c| c.as_string()).collect(),
        MatValue::Char { dims, text } if dims.len() == 2 && dims[0] > 0 => {
            // A char matrix with one name per row.
            let (rows, cols) = (dims[0], dims[1]);
            Some(
                (0..rows)
                    .map(|r| (0..cols).map(|c| text[c * rows + r]).collect::<String>().trim().to_string())
                    .collect(),
            )
        }
        _ => None,
    };
    names.ok_or_else(|| Error::Ingestion {
        path: path.to_path_buf(),
        msg: format!("{var} is not a list of frame names"),
    })
}

/// Camera tag ("c3") from a frame name such as `c3s2_012345`.
fn camera_of(name: &str) -> Option<String> {
    let end = name.find('s')?;
    name.starts_with('c').then(|| name[..end].to_string())
}

struct Frame {
    image: ImageSample,
    rows: Vec<(i64, [f64; 4])>,
}

fn load_frame(root: &Path, name: &str) -> Result<Frame> {
    let file = format!("{name}.jpg");
    let path = root.join("frames").join(&file);
    let (width, height) = image_dims(&path)?;
    let ann_path = root.join("annotations").join(format!("{file}.mat"));
    require(&ann_path)?;
    let mat = read_mat(&ann_path)?;
    let table = BOX_KEYS
        .iter()
        .find_map(|k| mat.get(*k))
        .ok_or_else(|| Error::Ingestion {
            path: ann_path.clone(),
            msg: format!("none of {BOX_KEYS:?} present"),
        })?;
    let rows = table.as_rows().ok_or_else(|| Error::Annotation {
        image_id: file.clone(),
        msg: "box table is not numeric".into(),
    })?;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        if r.len() != 5 {
            return Err(Error::Annotation {
                image_id: file.clone(),
                msg: format!("box row has {} columns, expected 5", r.len()),
            });
        }
        out.push((r[0] as i64, [r[1], r[2], r[3], r[4]]));
    }
    Ok(Frame {
        image: ImageSample {
            image_id: file,
            source: ImageSource::File(path),
            width,
            height,
            scene_tag: camera_of(name),
        },
        rows: out,
    })
}

fn build_split(root: &Path, names: &[String], split: Split) -> Result<(DatasetIndex, BTreeMap<i64, u32>)> {
    let frames: Vec<Frame> = names.iter().map(|n| load_frame(root, n)).collect::<Result<_>>()?;
    // Vocabulary in ascending person-id order.
    let mut pids = BTreeMap::new();
    for f in &frames {
        for &(pid, _) in &f.rows {
            if pid >= 0 {
                pids.insert(pid, 0u32);
            }
        }
    }
    for (i, v) in pids.values_mut().enumerate() {
        *v = i as u32;
    }
    let vocab: Vec<String> = pids.keys().map(|p| p.to_string()).collect();
    let mut images = Vec::with_capacity(frames.len());
    let mut anns = Vec::new();
    for f in frames {
        let id = &f.image.image_id;
        for (pid, xywh) in &f.rows {
            let identity = match pids.get(pid) {
                Some(&l) => Identity::Labeled(l),
                None => Identity::Unlabeled,
            };
            anns.push(BoxAnnotation {
                image_id: id.clone(),
                bbox: ingest_xywh(id, xywh, f.image.width, f.image.height)?,
                identity,
            });
        }
        images.push(f.image);
    }
    Ok((DatasetIndex::new("prw", split, images, anns, vocab)?, pids))
}

/// Loads the train and test splits; the test index carries the official
/// queries from `query_info.txt`.
pub fn load_prw(root: &Path) -> Result<(DatasetIndex, DatasetIndex)> {
    let train_names = frame_list(&root.join("frame_train.mat"), "img_index_train")?;
    let test_names = frame_list(&root.join("frame_test.mat"), "img_index_test")?;
    let query_path = root.join("query_info.txt");
    require(&query_path)?;
    let (train, _) = build_split(root, &train_names, Split::Train)?;
    let (test, test_pids) = build_split(root, &test_names, Split::Test)?;

    let text = std::fs::read_to_string(&query_path)?;
    let mut queries = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = || Error::Ingestion {
            path: query_path.clone(),
            msg: format!("line {}: expected 'pid x y w h name'", line_no + 1),
        };
        if fields.len() != 6 {
            return Err(parse_err());
        }
        let nums: Vec<f64> = fields[..5]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err())?;
        let image_id = format!("{}.jpg", fields[5]);
        let img = test.image(&image_id).ok_or_else(|| Error::Annotation {
            image_id: image_id.clone(),
            msg: "query frame is not in the test split".into(),
        })?;
        let identity = *test_pids.get(&(nums[0] as i64)).ok_or_else(|| Error::Annotation {
            image_id: image_id.clone(),
            msg: format!("query person {} not annotated in the test split", nums[0]),
        })?;
        let bbox = ingest_xywh(&image_id, &nums[1..], img.width, img.height)?;
        queries.push(QuerySpec {
            image_id,
            bbox,
            identity,
        });
    }
    let test = test.with_queries(queries)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mat::write_mat;
    use image::RgbImage;

    fn write_fixture(root: &Path) {
        std::fs::create_dir_all(root.join("frames")).unwrap();
        std::fs::create_dir_all(root.join("annotations")).unwrap();
        let frames: [(&str, &str, Vec<Vec<f64>>); 3] = [
            ("c1s1_000001", "box_new", vec![vec![5., 10., 10., 20., 40.], vec![-2., 50., 5., 20., 30.]]),
            ("c2s1_000002", "anno_file", vec![vec![5., 0., 0., 15., 15.]]),
            ("c3s2_000003", "anno_previous", vec![vec![7., 20., 20., 20., 30.], vec![8., 60., 20., 20., 30.]]),
        ];
        for (name, key, rows) in frames {
            RgbImage::new(96, 64).save(root.join(format!("frames/{name}.jpg"))).unwrap();
            write_mat(
                &root.join(format!("annotations/{name}.jpg.mat")),
                &[(key, MatValue::matrix(&rows))],
                false,
            )
            .unwrap();
        }
        let cell = |v: &[&str]| MatValue::column_cell(v.iter().map(|s| MatValue::string(s)).collect());
        write_mat(&root.join("frame_train.mat"), &[("img_index_train", cell(&["c1s1_000001", "c2s1_000002"]))], true)
            .unwrap();
        write_mat(&root.join("frame_test.mat"), &[("img_index_test", cell(&["c3s2_000003"]))], true).unwrap();
        std::fs::write(root.join("query_info.txt"), "8 60 20 20 30 c3s2_000003\n").unwrap();
    }

    #[test]
    fn loads_fixture_tree() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let (train, test) = load_prw(dir.path()).unwrap();
        assert_eq!(train.images().len(), 2);
        assert_eq!(train.identities(), &["5".to_string()]);
        assert_eq!(train.num_boxes(), 3);
        assert_eq!(train.annotations()[1].identity, Identity::Unlabeled);
        assert_eq!(train.images()[1].scene_tag.as_deref(), Some("c2"));
        assert_eq!(test.identities().len(), 2);
        assert_eq!(test.queries()[0].identity, 1);
        assert_eq!(test.queries()[0].bbox.x2, 80.0);
    }

    #[test]
    fn empty_directory_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_prw(dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame_train.mat"));
    }

    #[test]
    fn camera_tags() {
        assert_eq!(camera_of("c6s2_112233").as_deref(), Some("c6"));
        assert_eq!(camera_of("frame"), None);
    }
}
