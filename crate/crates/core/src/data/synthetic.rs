//! Deterministic synthetic person-search scenes.
//!
//! Each identity belongs to one of `num_clusters` clusters and every image
//! shows 1-4 persons of a single cluster. A "person" is a bright, textured,
//! tall rectangle standing on a neutral ground strip. The upper band of the
//! image is the scene colour: with probability `scene_correlation` it is the
//! cluster's palette colour, otherwise a uniformly drawn palette colour.
//!
//! The ground strip keeps the scene colour away from the persons, so the only
//! route from scene colour to identity is through whole-image context.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, BoxAnnotation, DatasetIndex, Identity, ImageSample, Split};
use crate::error::{Error, Result};

/// Smallest side length that still fits a person of a few pixels.
pub const MIN_IMAGE_SIZE: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    /// Labeled boxes per identity in each split.
    pub instances_per_identity: usize,
    /// Side length of the square images.
    pub image_size: usize,
    pub scene_correlation: f64,
    pub seed: u64,
    pub num_clusters: usize,
    /// Identities of different clusters share appearance (`id / num_clusters`)
    /// and differ only in their cluster.
    pub lookalike: bool,
    /// Seed for identity appearance; `None` reuses `seed`.
    pub palette_seed: Option<u64>,
    /// Approximate number of images per split; `None` packs 1-4 persons at random.
    pub images_per_split: Option<usize>,
    /// Probability that an image gets one extra unlabeled person.
    pub unlabeled_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 8,
            instances_per_identity: 5,
            image_size: 64,
            scene_correlation: 1.0,
            seed: 0,
            num_clusters: 4,
            lookalike: false,
            palette_seed: None,
            images_per_split: None,
            unlabeled_prob: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.num_identities == 0 || self.instances_per_identity == 0 {
            return fail("need at least one identity and one instance".into());
        }
        if self.num_clusters == 0 {
            return fail("num_clusters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.scene_correlation) {
            return fail(format!("scene_correlation {} outside [0, 1]", self.scene_correlation));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_prob) {
            return fail(format!("unlabeled_prob {} outside [0, 1]", self.unlabeled_prob));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return fail(format!(
                "image size {} cannot hold a person (minimum {MIN_IMAGE_SIZE})",
                self.image_size
            ));
        }
        Ok(())
    }

    pub fn cluster_of(&self, identity: usize) -> usize {
        identity % self.num_clusters
    }

    pub fn appearance_of(&self, identity: usize) -> usize {
        if self.lookalike {
            identity / self.num_clusters
        } else {
            identity
        }
    }

    /// Number of scene colours; one per cluster.
    pub fn palette_len(&self) -> usize {
        self.num_clusters
    }
}

const GROUND: [u8; 3] = [96, 96, 96];

/// Scene colours on an evenly spaced hue wheel, kept darker than persons.
pub fn scene_colour(index: usize, n: usize) -> [u8; 3] {
    let h = index as f64 / n.max(1) as f64;
    hsv(h, 0.85, 0.55)
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

#[derive(Clone, Copy, Debug)]
struct Appearance {
    top: [u8; 3],
    bottom: [u8; 3],
    pattern: u8,
}

fn appearance(palette_seed: u64, index: u64) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(palette_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
    let colour = |rng: &mut ChaCha8Rng| hsv(rng.random::<f64>(), rng.random_range(0.5..1.0), rng.random_range(0.8..1.0));
    Appearance {
        top: colour(&mut rng),
        bottom: colour(&mut rng),
        pattern: rng.random_range(0..4),
    }
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).clamp(0.0, 255.0) as u8)
}

fn draw_person(img: &mut RgbImage, b: BBox, look: Appearance, brightness: f64) {
    let (x1, y1, x2, y2) = (b.x1 as u32, b.y1 as u32, b.x2 as u32, b.y2 as u32);
    let split = y1 + ((y2 - y1) as f64 * 0.45) as u32;
    for y in y1..y2 {
        for x in x1..x2 {
            let (dx, dy) = (x - x1, y - y1);
            let base = if y < split { look.top } else { look.bottom };
            let dark = match look.pattern {
                1 => (dy / 2) % 2 == 1,
                2 => (dx / 2) % 2 == 1,
                3 => ((dx / 2) + (dy / 2)) % 2 == 1,
                _ => false,
            };
            let f = if dark { 0.6 } else { 1.0 } * brightness;
            img.put_pixel(x, y, Rgb(shade(base, f)));
        }
    }
}

struct Person {
    identity: Identity,
    look: Appearance,
}

/// Draws one scene and returns its boxes in person order.
fn render(
    spec: &SyntheticSpec,
    people: &[Person],
    scene: [u8; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, Vec<BBox>)> {
    let s = spec.image_size as f64;
    let size = spec.image_size as u32;
    let band = (0.25 * s).round() as u32;
    let mut img = RgbImage::new(size, size);
    for (_, y, p) in img.enumerate_pixels_mut() {
        let jitter = rng.random_range(-6i16..=6);
        let base = if y < band { scene } else { GROUND };
        *p = Rgb(base.map(|v| (v as i16 + jitter).clamp(0, 255) as u8));
    }
    let widths: Vec<f64> = people
        .iter()
        .map(|_| (rng.random_range(0.17..0.22) * s).round())
        .collect();
    let free = s - 2.0 - widths.iter().sum::<f64>();
    if free < 0.0 {
        return Err(Error::Generation(format!(
            "{} persons do not fit side by side in a {size}px image",
            people.len()
        )));
    }
    let mut gaps: Vec<f64> = (0..=people.len()).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = gaps.iter().sum();
    gaps.iter_mut().for_each(|g| *g = (*g / total * free).floor());
    let mut boxes = Vec::with_capacity(people.len());
    let mut x = 1.0;
    for (i, p) in people.iter().enumerate() {
        x += gaps[i];
        let h = (rng.random_range(0.36..0.45) * s).round();
        let y2 = (rng.random_range(0.88..0.97) * s).round().min(s);
        let b = BBox::new(x, y2 - h, x + widths[i], y2);
        draw_person(&mut img, b, p.look, rng.random_range(0.92..1.0));
        boxes.push(b);
        x += widths[i];
    }
    Ok((img, boxes))
}

/// Partitions per-identity quotas of one cluster into images of 1-4 distinct
/// identities. Returns member lists (identities) per image.
fn pack(
    quotas: &mut [(usize, usize)],
    n_images: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut remaining_images = n_images.unwrap_or(0);
    loop {
        let left: usize = quotas.iter().map(|q| q.1).sum();
        if left == 0 {
            break;
        }
        let live = quotas.iter().filter(|q| q.1 > 0).count();
        let cap = live.min(4);
        let k = if remaining_images > 0 {
            let want = left as f64 / remaining_images as f64;
            let k = want.floor() as usize + usize::from(rng.random::<f64>() < want.fract());
            remaining_images -= 1;
            k.clamp(1, cap)
        } else {
            rng.random_range(1..=cap)
        };
        // Largest remaining quota first keeps the packing feasible.
        quotas.shuffle(rng);
        quotas.sort_by(|a, b| b.1.cmp(&a.1));
        let members: Vec<usize> = quotas[..k].iter().map(|q| q.0).collect();
        for q in quotas[..k].iter_mut() {
            q.1 -= 1;
        }
        out.push(members);
    }
    out
}

fn make_split(spec: &SyntheticSpec, split: Split) -> Result<DatasetIndex> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let palette_seed = spec.palette_seed.unwrap_or(spec.seed);
    let looks: Vec<Appearance> = (0..spec.num_identities)
        .map(|i| appearance(palette_seed, spec.appearance_of(i) as u64))
        .collect();
    let total = spec.num_identities * spec.instances_per_identity;

    // (cluster, members) per image, clusters interleaved by a shuffle.
    let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
    for c in 0..spec.num_clusters {
        let mut quotas: Vec<(usize, usize)> = (0..spec.num_identities)
            .filter(|&i| spec.cluster_of(i) == c)
            .map(|i| (i, spec.instances_per_identity))
            .collect();
        if quotas.is_empty() {
            continue;
        }
        let share = spec.images_per_split.map(|n| {
            let t = quotas.len() * spec.instances_per_identity;
            ((n as f64 * t as f64 / total as f64).round() as usize).max(1)
        });
        for members in pack(&mut quotas, share, &mut rng) {
            plan.push((c, members));
        }
    }
    plan.shuffle(&mut rng);

    let palette = spec.palette_len();
    let mut images = Vec::with_capacity(plan.len());
    let mut anns = Vec::with_capacity(total);
    for (n, (cluster, mut members)) in plan.into_iter().enumerate() {
        members.shuffle(&mut rng);
        let colour_idx = if rng.random::<f64>() < spec.scene_correlation {
            cluster
        } else {
            rng.random_range(0..palette)
        };
        let mut people: Vec<Person> = members
            .iter()
            .map(|&m| Person {
                identity: Identity::Labeled(m as u32),
                look: looks[m],
            })
            .collect();
        if people.len() < 4 && rng.random::<f64>() < spec.unlabeled_prob {
            let stranger = appearance(palette_seed ^ 0xdead_beef, rng.random::<u64>());
            let at = rng.random_range(0..=people.len());
            people.insert(
                at,
                Person {
                    identity: Identity::Unlabeled,
                    look: stranger,
                },
            );
        }
        let (img, boxes) = render(spec, &people, scene_colour(colour_idx, palette), &mut rng)?;
        let image_id = format!("{split}_{n:05}");
        for (p, b) in people.iter().zip(boxes) {
            anns.push(BoxAnnotation {
                image_id: image_id.clone(),
                bbox: b,
                identity: p.identity,
            });
        }
        images.push(ImageSample::in_memory(image_id, img, Some(format!("bg{colour_idx}"))));
    }
    let vocab = (0..spec.num_identities).map(|i| format!("id{i:03}")).collect();
    DatasetIndex::new("synthetic", split, images, anns, vocab)
}

/// Generates a train split and a test split of new images of the same
/// identities.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(DatasetIndex, DatasetIndex)> {
    spec.validate()?;
    Ok((make_split(spec, Split::Train)?, make_split(spec, Split::Test)?))
}

/// Palette index recorded in a synthetic image's scene tag.
pub fn background_index(sample: &ImageSample) -> Option<usize> {
    sample.scene_tag.as_deref()?.strip_prefix("bg")?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn pixels_of(index: &DatasetIndex) -> Vec<Vec<u8>> {
        index
            .images()
            .iter()
            .map(|s| s.pixels().unwrap().as_raw().clone())
            .collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec {
            seed: 7,
            unlabeled_prob: 0.3,
            ..Default::default()
        };
        let (a, at) = make_synthetic(&spec).unwrap();
        let (b, bt) = make_synthetic(&spec).unwrap();
        assert_eq!(pixels_of(&a), pixels_of(&b));
        assert_eq!(pixels_of(&at), pixels_of(&bt));
        assert_eq!(a.annotations(), b.annotations());
        let (c, _) = make_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(pixels_of(&a), pixels_of(&c));
    }

    #[test]
    fn counts_match_quota() {
        let spec = SyntheticSpec::default();
        let (train, test) = make_synthetic(&spec).unwrap();
        for index in [&train, &test] {
            assert_eq!(index.num_identities(), 8);
            assert!(index.num_boxes() >= 40);
            let mut per = vec![0; 8];
            for a in index.annotations() {
                per[a.identity.label().unwrap() as usize] += 1;
            }
            assert_eq!(per, vec![5; 8]);
            for i in 0..index.images().len() {
                let n = index.annotations_at(i).count();
                assert!((1..=4).contains(&n));
            }
        }
    }

    #[test]
    fn image_target_is_respected() {
        let spec = SyntheticSpec {
            images_per_split: Some(20),
            ..Default::default()
        };
        let (train, _) = make_synthetic(&spec).unwrap();
        assert_eq!(train.images().len(), 20);
        assert_eq!(train.num_boxes(), 40);
    }

    #[test]
    fn full_correlation_background_is_cluster_function() {
        let spec = SyntheticSpec {
            num_identities: 12,
            instances_per_identity: 10,
            scene_correlation: 1.0,
            seed: 3,
            ..Default::default()
        };
        let (train, test) = make_synthetic(&spec).unwrap();
        for index in [&train, &test] {
            for (i, img) in index.images().iter().enumerate() {
                let bg = background_index(img).unwrap();
                for a in index.annotations_at(i) {
                    assert_eq!(spec.cluster_of(a.identity.label().unwrap() as usize), bg);
                }
                // the band pixels agree with the recorded colour
                let px = img.pixels().unwrap().get_pixel(0, 0).0;
                let want = scene_colour(bg, spec.palette_len());
                for ch in 0..3 {
                    assert!((px[ch] as i16 - want[ch] as i16).abs() <= 6);
                }
            }
        }
    }

    /// Pearson chi-square independence test on a brute-force contingency
    /// count of (identity of the first person, background colour).
    #[test]
    fn zero_correlation_background_independent_of_identity() {
        let spec = SyntheticSpec {
            num_identities: 8,
            instances_per_identity: 250,
            scene_correlation: 0.0,
            images_per_split: Some(1000),
            seed: 11,
            ..Default::default()
        };
        let (train, _) = make_synthetic(&spec).unwrap();
        assert!(train.images().len() >= 1000);
        let (rows, cols) = (spec.num_identities, spec.palette_len());
        let mut table = vec![vec![0.0f64; cols]; rows];
        for (i, img) in train.images().iter().enumerate() {
            let first = train.annotations_at(i).next().unwrap();
            table[first.identity.label().unwrap() as usize][background_index(img).unwrap()] += 1.0;
        }
        let n: f64 = table.iter().flatten().sum();
        let row_sum: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let col_sum: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
        let mut stat = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let e = row_sum[r] * col_sum[c] / n;
                stat += (table[r][c] - e).powi(2) / e;
            }
        }
        let dof = ((rows - 1) * (cols - 1)) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat} on {dof} dof, p = {p}");
    }

    #[test]
    fn lookalikes_share_appearance_across_clusters() {
        let spec = SyntheticSpec {
            num_identities: 8,
            lookalike: true,
            ..Default::default()
        };
        assert_eq!(spec.appearance_of(1), spec.appearance_of(3));
        assert_ne!(spec.cluster_of(1), spec.cluster_of(3));
        assert_ne!(spec.appearance_of(3), spec.appearance_of(4));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec { image_size: 16, ..Default::default() },
            SyntheticSpec { scene_correlation: 1.5, ..Default::default() },
            SyntheticSpec { num_identities: 0, ..Default::default() },
        ] {
            assert!(matches!(make_synthetic(&spec), Err(Error::Generation(_))));
        }
    }
}
