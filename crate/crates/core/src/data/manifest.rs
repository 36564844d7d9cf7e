//! Split manifests: JSON lines, one header record then one record per image.
//!
//! ```text
//! {"schema_version":1,"dataset":"prw","split":"test","identities":[...],"queries":[...],"seed":0,"cap_n":null}
//! {"image_id":"c1s1_000151.jpg","path":"/data/prw/frames/c1s1_000151.jpg","width":1920,"height":1080,
//!  "scene_tag":"c1","boxes":[{"box":[x1,y1,x2,y2],"identity":3},{"box":[...],"identity":null}]}
//! ```
//!
//! Images held in memory are written as PNG files into `<manifest>.images/`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BBox, BoxAnnotation, DatasetIndex, Identity, ImageSample, ImageSource, QuerySpec, Split};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Provenance recorded in the header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: Option<u64>,
    pub cap_n: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    dataset: String,
    split: Split,
    identities: Vec<String>,
    #[serde(default)]
    queries: Vec<QuerySpec>,
    #[serde(flatten)]
    meta: ManifestMeta,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    identity: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    image_id: String,
    path: PathBuf,
    width: u32,
    height: u32,
    scene_tag: Option<String>,
    boxes: Vec<BoxRecord>,
}

fn image_dir(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".images");
    manifest.with_file_name(name)
}

pub fn write_manifest(path: &Path, index: &DatasetIndex, meta: &ManifestMeta) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        dataset: index.name().to_string(),
        split: index.split(),
        identities: index.identities().to_vec(),
        queries: index.queries().to_vec(),
        meta: meta.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (i, img) in index.images().iter().enumerate() {
        let stored = match &img.source {
            ImageSource::File(p) => p.clone(),
            ImageSource::Memory(px) => {
                let dir = image_dir(path);
                std::fs::create_dir_all(&dir)?;
                let file = dir.join(format!("{}.png", img.image_id.replace('/', "_")));
                px.save(&file)?;
                file
            }
        };
        let record = ImageRecord {
            image_id: img.image_id.clone(),
            path: stored,
            width: img.width,
            height: img.height,
            scene_tag: img.scene_tag.clone(),
            boxes: index
                .annotations_at(i)
                .map(|a| BoxRecord {
                    bbox: a.bbox.to_array(),
                    identity: a.identity.label(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(DatasetIndex, ManifestMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bad = |line: usize, msg: String| Error::Ingestion {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(bad(
            1,
            format!("schema version {} (expected {SCHEMA_VERSION})", header.schema_version),
        ));
    }
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ImageRecord = serde_json::from_str(&line).map_err(|e| bad(n + 2, e.to_string()))?;
        for b in r.boxes {
            anns.push(BoxAnnotation {
                image_id: r.image_id.clone(),
                bbox: BBox::from_array(b.bbox),
                identity: b.identity.map_or(Identity::Unlabeled, Identity::Labeled),
            });
        }
        images.push(ImageSample {
            image_id: r.image_id,
            source: ImageSource::File(r.path),
            width: r.width,
            height: r.height,
            scene_tag: r.scene_tag,
        });
    }
    let index = DatasetIndex::new(header.dataset, header.split, images, anns, header.identities)?
        .with_queries(header.queries)?;
    Ok((index, header.meta))
}
