use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// From a top-left corner plus width and height.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Strictly positive width and height, all coordinates finite.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Mirror across the vertical centre line of an image of the given width.
    pub fn hflip(&self, image_width: f64) -> Self {
        Self::new(image_width - self.x2, self.y1, image_width - self.x1, self.y2)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:.1}, {:.1}, {:.1}, {:.1})",
            self.x1, self.y1, self.x2, self.y2
        )
    }
}

/// Identity label of an annotated person. Labeled values index the split's
/// identity vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Identity {
    Labeled(u32),
    Unlabeled,
}

impl Identity {
    pub fn label(&self) -> Option<u32> {
        match self {
            Identity::Labeled(l) => Some(*l),
            Identity::Unlabeled => None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self, Identity::Labeled(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub bbox: BBox,
    pub identity: Identity,
}

impl BoxAnnotation {
    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

/// Where an image's pixels come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

/// A whole, uncropped scene image.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image_id: String,
    pub source: ImageSource,
    pub width: u32,
    pub height: u32,
    /// Camera, movie or scene identifier when the dataset provides one.
    pub scene_tag: Option<String>,
}

impl ImageSample {
    pub fn in_memory(image_id: impl Into<String>, pixels: RgbImage, scene_tag: Option<String>) -> Self {
        let (width, height) = pixels.dimensions();
        Self {
            image_id: image_id.into(),
            source: ImageSource::Memory(Arc::new(pixels)),
            width,
            height,
            scene_tag,
        }
    }

    /// Decodes (or shares) the pixels.
    pub fn pixels(&self) -> Result<Arc<RgbImage>> {
        match &self.source {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(path) => {
                if !path.exists() {
                    return Err(Error::MissingFile(path.clone()));
                }
                Ok(Arc::new(image::open(path)?.to_rgb8()))
            }
        }
    }

    pub fn source_path(&self) -> Option<&PathBuf> {
        match &self.source {
            ImageSource::File(p) => Some(p),
            ImageSource::Memory(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A query person: the box to search for and its identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub image_id: String,
    pub bbox: BBox,
    pub identity: u32,
}

/// Images, annotations and identity vocabulary for one split of a dataset.
///
/// Immutable once built; [`DatasetIndex::new`] checks every invariant.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    name: String,
    split: Split,
    images: Vec<ImageSample>,
    annotations: Vec<BoxAnnotation>,
    identities: Vec<String>,
    queries: Vec<QuerySpec>,
    image_lookup: HashMap<String, usize>,
    by_image: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Vec<ImageSample>,
        annotations: Vec<BoxAnnotation>,
        identities: Vec<String>,
    ) -> Result<Self> {
        let mut image_lookup = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Annotation {
                    image_id: img.image_id.clone(),
                    msg: "image has zero extent".into(),
                });
            }
            if image_lookup.insert(img.image_id.clone(), i).is_some() {
                return Err(Error::Annotation {
                    image_id: img.image_id.clone(),
                    msg: "duplicate image id".into(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(identities.len());
        for name in &identities {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate identity {name} in vocabulary")));
            }
        }
        let mut by_image = vec![Vec::new(); images.len()];
        for (ai, ann) in annotations.iter().enumerate() {
            let Some(&ii) = image_lookup.get(&ann.image_id) else {
                return Err(Error::Annotation {
                    image_id: ann.image_id.clone(),
                    msg: "annotation references unknown image".into(),
                });
            };
            if !ann.bbox.is_valid() {
                return Err(Error::Annotation {
                    image_id: ann.image_id.clone(),
                    msg: format!("invalid box {}", ann.bbox),
                });
            }
            let img = &images[ii];
            let b = ann.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > img.width as f64 || b.y2 > img.height as f64 {
                return Err(Error::Annotation {
                    image_id: ann.image_id.clone(),
                    msg: format!("box {} outside {}x{} image", b, img.width, img.height),
                });
            }
            if let Identity::Labeled(l) = ann.identity {
                if l as usize >= identities.len() {
                    return Err(Error::Annotation {
                        image_id: ann.image_id.clone(),
                        msg: format!("identity {l} not in vocabulary of size {}", identities.len()),
                    });
                }
            }
            by_image[ii].push(ai);
        }
        Ok(Self {
            name: name.into(),
            split,
            images,
            annotations,
            identities,
            queries: Vec::new(),
            image_lookup,
            by_image,
        })
    }

    /// Attaches an official query list. Every query must resolve to an image
    /// of this index and a vocabulary entry.
    pub fn with_queries(mut self, queries: Vec<QuerySpec>) -> Result<Self> {
        for q in &queries {
            if !self.image_lookup.contains_key(&q.image_id) {
                return Err(Error::Annotation {
                    image_id: q.image_id.clone(),
                    msg: "query image not in index".into(),
                });
            }
            if q.identity as usize >= self.identities.len() {
                return Err(Error::Annotation {
                    image_id: q.image_id.clone(),
                    msg: format!("query identity {} not in vocabulary", q.identity),
                });
            }
        }
        self.queries = queries;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &[ImageSample] {
        &self.images
    }

    pub fn annotations(&self) -> &[BoxAnnotation] {
        &self.annotations
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.queries
    }

    pub fn image_index(&self, image_id: &str) -> Option<usize> {
        self.image_lookup.get(image_id).copied()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageSample> {
        self.image_index(image_id).map(|i| &self.images[i])
    }

    /// Annotations of the image at position `index`.
    pub fn annotations_at(&self, index: usize) -> impl Iterator<Item = &BoxAnnotation> {
        self.by_image[index].iter().map(|&a| &self.annotations[a])
    }

    pub fn annotations_of(&self, image_id: &str) -> Vec<&BoxAnnotation> {
        match self.image_index(image_id) {
            Some(i) => self.annotations_at(i).collect(),
            None => Vec::new(),
        }
    }

    /// Number of annotated boxes, labeled or not.
    pub fn num_boxes(&self) -> usize {
        self.annotations.len()
    }
}

/// Number of gallery images per query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GallerySize {
    Fixed(usize),
    All,
}

impl fmt::Display for GallerySize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GallerySize::All => f.write_str("all"),
            GallerySize::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for GallerySize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(GallerySize::All);
        }
        let n: usize = s
            .trim_end_matches(['k', 'K'])
            .parse()
            .map_err(|_| Error::Config(format!("invalid gallery size {s:?}")))?;
        let n = if s.ends_with(['k', 'K']) { n * 1000 } else { n };
        if n == 0 {
            return Err(Error::Config("gallery size must be positive".into()));
        }
        Ok(GallerySize::Fixed(n))
    }
}

impl Serialize for GallerySize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GallerySize::All => s.serialize_str("all"),
            GallerySize::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for GallerySize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) if n > 0 => Ok(GallerySize::Fixed(n as usize)),
            Raw::N(_) => Err(serde::de::Error::custom("gallery size must be positive")),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Queries plus, for each query, the ordered list of gallery image ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub queries: Vec<QuerySpec>,
    pub galleries: Vec<Vec<String>>,
    pub gallery_size: GallerySize,
}
