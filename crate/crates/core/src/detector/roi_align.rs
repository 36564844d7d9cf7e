//! Bilinear region pooling ("RoI-Align", half-pixel aligned).

use autograd::{Tensor, Var};
use ndarray::{ArrayD, IxDyn};

use super::FeatureMap;
use crate::data::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignSpec {
    /// Output grid side `r`.
    pub output: usize,
    /// Feature cells per input pixel (`1 / stride`).
    pub spatial_scale: f64,
    /// Samples per bin along each axis; `None` adapts to `ceil(bin size)`.
    pub sampling_ratio: Option<usize>,
}

/// Sparse sampling plan of one box: `(bin, cell, weight)` triples.
fn plan(b: &BBox, spec: &RoiAlignSpec, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let r = spec.output;
    let x1 = b.x1 * spec.spatial_scale - 0.5;
    let y1 = b.y1 * spec.spatial_scale - 0.5;
    let roi_w = b.x2 * spec.spatial_scale - 0.5 - x1;
    let roi_h = b.y2 * spec.spatial_scale - 0.5 - y1;
    let bin_w = roi_w / r as f64;
    let bin_h = roi_h / r as f64;
    let gw = spec.sampling_ratio.unwrap_or_else(|| bin_w.ceil().max(1.0) as usize);
    let gh = spec.sampling_ratio.unwrap_or_else(|| bin_h.ceil().max(1.0) as usize);
    let norm = 1.0 / (gw * gh) as f64;
    let mut out = Vec::with_capacity(r * r * gw * gh * 4);
    for py in 0..r {
        for px in 0..r {
            let bin = py * r + px;
            for iy in 0..gh {
                let y = y1 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / gh as f64;
                for ix in 0..gw {
                    let x = x1 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / gw as f64;
                    bilinear_taps(y, x, h, w, |cell, wt| out.push((bin, cell, wt * norm)));
                }
            }
        }
    }
    out
}

/// Emits the (cell, weight) taps of one bilinear sample; out-of-range
/// samples contribute nothing.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, mut emit: impl FnMut(usize, f64)) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut yl, mut xl) = (y.floor() as usize, x.floor() as usize);
    let (yh, xh);
    let (mut y, mut x) = (y, x);
    if yl >= h - 1 {
        yl = h - 1;
        yh = h - 1;
        y = yl as f64;
    } else {
        yh = yl + 1;
    }
    if xl >= w - 1 {
        xl = w - 1;
        xh = w - 1;
        x = xl as f64;
    } else {
        xh = xl + 1;
    }
    let (ly, lx) = (y - yl as f64, x - xl as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    emit(yl * w + xl, hy * hx);
    emit(yl * w + xh, hy * lx);
    emit(yh * w + xl, ly * hx);
    emit(yh * w + xh, ly * lx);
}

/// Pools every box from a `[1, C, H, W]` map into `[n, C, r, r]`.
pub fn roi_align<'t>(features: Var<'t>, boxes: &[BBox], spec: RoiAlignSpec) -> Var<'t> {
    let f = features.value();
    let s = f.shape().to_vec();
    assert!(s.len() == 4 && s[0] == 1, "roi_align expects [1, C, H, W], got {s:?}");
    let (c, h, w) = (s[1], s[2], s[3]);
    let r = spec.output;
    let plans: Vec<Vec<(usize, usize, f64)>> = boxes.iter().map(|b| plan(b, &spec, h, w)).collect();
    let flat = f.as_standard_layout();
    let fs = flat.as_slice().unwrap();
    let mut out = vec![0.0; boxes.len() * c * r * r];
    for (n, p) in plans.iter().enumerate() {
        for ch in 0..c {
            let src = &fs[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[(n * c + ch) * r * r..(n * c + ch + 1) * r * r];
            for &(bin, cell, wt) in p {
                dst[bin] += wt * src[cell];
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[boxes.len(), c, r, r]), out).unwrap();
    features.tape().custom(
        &[features],
        out,
        Box::new(move |g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut df = vec![0.0; c * h * w];
            for (n, p) in plans.iter().enumerate() {
                for ch in 0..c {
                    let src = &gs[(n * c + ch) * r * r..(n * c + ch + 1) * r * r];
                    let dst = &mut df[ch * h * w..(ch + 1) * h * w];
                    for &(bin, cell, wt) in p {
                        dst[cell] += wt * src[bin];
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), df).unwrap())]
        }),
    )
}

/// Region features for boxes given in image pixels. Boxes are clipped to the
/// image first; a box with no area left is an error.
pub fn roi_extract(
    map: &FeatureMap,
    boxes: &[BBox],
    output: usize,
    image_size: (f64, f64),
) -> Result<Vec<Tensor>> {
    let clipped: Vec<BBox> = boxes
        .iter()
        .map(|b| {
            let c = b.clip(image_size.0, image_size.1);
            if c.is_valid() {
                Ok(c)
            } else {
                Err(Error::DegenerateBox(format!("{b} in {}x{} image", image_size.0, image_size.1)))
            }
        })
        .collect::<Result<_>>()?;
    let tape = autograd::Tape::inference();
    let s = map.data.shape();
    let x = tape.constant(map.data.clone().into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]])).unwrap());
    let spec = RoiAlignSpec {
        output,
        spatial_scale: 1.0 / map.stride as f64,
        sampling_ratio: None,
    };
    let pooled = roi_align(x, &clipped, spec).value();
    Ok(pooled.outer_iter().map(|v| v.to_owned()).collect())
}
