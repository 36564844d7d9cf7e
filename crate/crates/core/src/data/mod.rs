//! Domain types, dataset loaders, evaluation protocols and the synthetic
//! benchmark generator.

pub mod cuhk;
pub mod manifest;
pub mod mat;
pub mod movienet;
pub mod protocol;
pub mod prw;
pub mod synthetic;
mod types;

pub use cuhk::{load_cuhk_protocol, load_cuhk_sysu};
pub use manifest::{read_manifest, write_manifest, ManifestMeta, SCHEMA_VERSION};
pub use movienet::{build_movienet_cs, MovieNetOptions};
pub use protocol::{build_protocol, build_protocol_with, ProtocolOptions};
pub use prw::load_prw;
pub use synthetic::{make_synthetic, SyntheticSpec};
pub use types::*;

use std::path::Path;

use crate::error::{Error, Result};

/// Converts an `[x, y, w, h]` annotation into a clipped corner box.
pub(crate) fn ingest_xywh(image_id: &str, xywh: &[f64], width: u32, height: u32) -> Result<BBox> {
    if xywh.len() < 4 {
        return Err(Error::Annotation {
            image_id: image_id.to_string(),
            msg: format!("box has {} coordinates, expected 4", xywh.len()),
        });
    }
    let raw = BBox::from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]);
    ingest_box(image_id, raw, width, height)
}

pub(crate) fn ingest_box(image_id: &str, raw: BBox, width: u32, height: u32) -> Result<BBox> {
    if !raw.is_valid() {
        return Err(Error::Annotation {
            image_id: image_id.to_string(),
            msg: format!("malformed box {raw}"),
        });
    }
    let clipped = raw.clip(width as f64, height as f64);
    if !clipped.is_valid() {
        return Err(Error::Annotation {
            image_id: image_id.to_string(),
            msg: format!("box {raw} lies outside the {width}x{height} image"),
        });
    }
    Ok(clipped)
}

/// Reads width and height from the image header without decoding pixels.
pub(crate) fn image_dims(path: &Path) -> Result<(u32, u32)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::image_dimensions(path)?)
}

pub(crate) fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}
