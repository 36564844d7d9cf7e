//! Training samples, horizontal flips and resizing.

use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ResizePolicy;
use crate::data::{BBox, DatasetIndex, Identity};
use crate::error::Result;

/// One image with its annotated persons, ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Arc<RgbImage>,
    pub boxes: Vec<BBox>,
    pub identities: Vec<Identity>,
}

impl Sample {
    pub fn load(index: &DatasetIndex, position: usize) -> Result<Self> {
        let meta = &index.images()[position];
        let anns: Vec<_> = index.annotations_at(position).collect();
        Ok(Self {
            image: meta.pixels()?,
            boxes: anns.iter().map(|a| a.bbox).collect(),
            identities: anns.iter().map(|a| a.identity).collect(),
        })
    }

    pub fn size(&self) -> (f64, f64) {
        (self.image.width() as f64, self.image.height() as f64)
    }

    /// Mirror image and boxes left to right.
    pub fn hflip(&self) -> Self {
        let w = self.image.width() as f64;
        Self {
            image: Arc::new(imageops::flip_horizontal(self.image.as_ref())),
            boxes: self.boxes.iter().map(|b| b.hflip(w)).collect(),
            identities: self.identities.clone(),
        }
    }

    pub fn resized(&self, policy: &ResizePolicy) -> Self {
        let (w, h) = self.image.dimensions();
        let (tw, th) = policy.target(w, h);
        if (tw, th) == (w, h) {
            return self.clone();
        }
        let (sx, sy) = (tw as f64 / w as f64, th as f64 / h as f64);
        Self {
            image: Arc::new(imageops::resize(self.image.as_ref(), tw, th, FilterType::Triangle)),
            boxes: self.boxes.iter().map(|b| b.scale(sx, sy)).collect(),
            identities: self.identities.clone(),
        }
    }
}

/// Flips with probability `prob`, decided by `seed` alone.
pub fn augment(sample: &Sample, seed: u64, prob: f64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(prob) {
        sample.hflip()
    } else {
        sample.clone()
    }
}

/// Scales `image` by `policy`, returning the factors that map resized
/// coordinates back to the original.
pub fn resize_image(image: &RgbImage, policy: &ResizePolicy) -> (RgbImage, f64, f64) {
    let (w, h) = image.dimensions();
    let (tw, th) = policy.target(w, h);
    if (tw, th) == (w, h) {
        return (image.clone(), 1.0, 1.0);
    }
    let out = imageops::resize(image, tw, th, FilterType::Triangle);
    (out, w as f64 / tw as f64, h as f64 / th as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn sample() -> Sample {
        let mut img = RgbImage::new(100, 50);
        img.put_pixel(0, 0, Rgb([255, 0, 0]));
        Sample {
            image: Arc::new(img),
            boxes: vec![BBox::new(10.0, 5.0, 30.0, 40.0)],
            identities: vec![Identity::Labeled(3)],
        }
    }

    #[test]
    fn reflection_arithmetic_and_involution() {
        let s = sample();
        let f = s.hflip();
        assert_eq!(f.boxes[0], BBox::new(70.0, 5.0, 90.0, 40.0));
        assert_eq!(f.image.get_pixel(99, 0), &Rgb([255, 0, 0]));
        let back = f.hflip();
        assert_eq!(back.boxes, s.boxes);
        assert_eq!(back.image.as_ref(), s.image.as_ref());
    }

    #[test]
    fn flips_are_seeded_and_roughly_fair() {
        let s = sample();
        let flipped = |seed| augment(&s, seed, 0.5).boxes[0] != s.boxes[0];
        let decisions: Vec<bool> = (0..400).map(flipped).collect();
        assert_eq!(decisions, (0..400).map(flipped).collect::<Vec<_>>());
        let n = decisions.iter().filter(|d| **d).count();
        assert!((150..250).contains(&n), "{n} flips of 400");
        assert_eq!(augment(&s, 1, 0.0).boxes, s.boxes);
        assert_eq!(augment(&s, 9, 1.0).boxes[0], BBox::new(70.0, 5.0, 90.0, 40.0));
    }

    #[test]
    fn resize_scales_boxes() {
        let s = sample().resized(&ResizePolicy::ShortLong { short: 100, long: 300 });
        assert_eq!(s.image.dimensions(), (200, 100));
        assert_eq!(s.boxes[0], BBox::new(20.0, 10.0, 60.0, 80.0));
        let (img, sx, sy) = resize_image(&sample().image, &ResizePolicy::ShortLong { short: 100, long: 300 });
        assert_eq!((img.width(), sx, sy), (200, 0.5, 0.5));
    }
}
