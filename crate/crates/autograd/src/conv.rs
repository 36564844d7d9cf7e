//! Spatial operations on `[n, c, h, w]` tensors.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayView3, Axis, Ix4, IxDyn};

use crate::tape::{Tensor, Var};

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output length along one axis: `floor((n + 2p - k) / s) + 1`.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [n, c, h, w], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: ArrayView3<'_, f64>, spec: Conv2dSpec, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let k = spec.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let pad = spec.padding as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: ArrayView2<'_, f64>,
    spec: Conv2dSpec,
    (c, h, w): (usize, usize, usize),
    ho: usize,
    wo: usize,
    out: &mut ndarray::ArrayViewMut3<'_, f64>,
) {
    let k = spec.kernel;
    let pad = spec.padding as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            out[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation. `weight: [o, c, k, k]`, `bias: [o]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv2dSpec) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = dims4(&x);
        let (o, wc, kh, kw) = dims4(&w);
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        assert_eq!((kh, kw), (spec.kernel, spec.kernel), "conv2d: kernel size");
        let ho = spec.output_len(h).expect("conv2d: input smaller than kernel");
        let wo = spec.output_len(wd).expect("conv2d: input smaller than kernel");
        let wmat = w
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = ndarray::Array4::<f64>::zeros((n, o, ho, wo));
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let one_by_one = spec.kernel == 1 && spec.stride == 1 && spec.padding == 0;
        for ni in 0..n {
            let xi = x4.index_axis(Axis(0), ni);
            let y = if one_by_one {
                let flat = xi.to_shape((c, h * wd)).unwrap();
                wmat.dot(&flat)
            } else {
                wmat.dot(&im2col(xi, spec, ho, wo))
            };
            out.index_axis_mut(Axis(0), ni)
                .assign(&y.into_shape_with_order((o, ho, wo)).unwrap());
        }
        if let Some(b) = bias {
            let b = b.value();
            assert_eq!(b.len(), o, "conv2d: bias length");
            for (oi, &bv) in b.iter().enumerate() {
                out.index_axis_mut(Axis(1), oi).mapv_inplace(|v| v + bv);
            }
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.tape.custom(
            &parents,
            out.into_dyn(),
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, wd));
                let mut dw = Array2::<f64>::zeros((o, c * kh * kw));
                for ni in 0..n {
                    let gi = g4.index_axis(Axis(0), ni);
                    let gi = gi.to_shape((o, ho * wo)).unwrap();
                    let xi = x4.index_axis(Axis(0), ni);
                    if one_by_one {
                        let flat = xi.to_shape((c, h * wd)).unwrap();
                        dw += &gi.dot(&flat.t());
                        let dcols = wmat.t().dot(&gi);
                        dx.index_axis_mut(Axis(0), ni)
                            .assign(&dcols.into_shape_with_order((c, h, wd)).unwrap());
                    } else {
                        let cols = im2col(xi, spec, ho, wo);
                        dw += &gi.dot(&cols.t());
                        let dcols = wmat.t().dot(&gi);
                        let mut dxi = dx.index_axis_mut(Axis(0), ni);
                        col2im(dcols.view(), spec, (c, h, wd), ho, wo, &mut dxi);
                    }
                }
                let mut grads = vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap()),
                ];
                if has_bias {
                    grads.push(Some(g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool2d(self, spec: Conv2dSpec) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let ho = spec.output_len(h).expect("max_pool2d: input smaller than window");
        let wo = spec.output_len(w).expect("max_pool2d: input smaller than window");
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = ndarray::Array4::<f64>::zeros((n, c, ho, wo));
        let mut arg = vec![0usize; n * c * ho * wo];
        let pad = spec.padding as isize;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for ky in 0..spec.kernel {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..spec.kernel {
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x4[[ni, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_at = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[ni, ci, oy, ox]] = best;
                        arg[((ni * c + ci) * ho + oy) * wo + ox] = best_at;
                    }
                }
            }
        }
        self.tape.custom(
            &[self],
            out.into_dyn(),
            Box::new(move |g| {
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let gs = g.as_slice().expect("contiguous gradient");
                for ni in 0..n {
                    for ci in 0..c {
                        let mut plane = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                        for o in 0..ho * wo {
                            let flat = ((ni * c + ci) * ho * wo) + o;
                            let at = arg[flat];
                            plane[[at / w, at % w]] += gs[flat];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Adaptive max pooling to a 1x1 grid: `[n, c, h, w] -> [n, c]`.
    pub fn global_max_pool(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let flat = x.view().into_shape_with_order((n, c, h * w)).unwrap();
        let mut out = Array2::<f64>::zeros((n, c));
        let mut arg = vec![0usize; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let lane = flat.slice(ndarray::s![ni, ci, ..]);
                let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                for (i, &v) in lane.iter().enumerate() {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                out[[ni, ci]] = best;
                arg[ni * c + ci] = at;
            }
        }
        self.tape.custom(
            &[self],
            out.into_dyn(),
            Box::new(move |g| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            ds[(ni * c + ci) * h * w + arg[ni * c + ci]] += g[[ni, ci]];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let area = (h * w) as f64;
        let out = x
            .view()
            .into_shape_with_order((n, c, h * w))
            .unwrap()
            .sum_axis(Axis(2))
            / area;
        self.tape.custom(
            &[self],
            out.into_dyn(),
            Box::new(move |g| {
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g[[ni, ci]] / area;
                        dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(v);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Per-channel `scale * x + shift` on `[n, c, h, w]`; `scale`, `shift: [c]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let x = self.value();
        let (s, b) = (scale.value(), shift.value());
        let c = dims4(&x).1;
        assert_eq!(s.len(), c, "channel_affine: scale length");
        assert_eq!(b.len(), c, "channel_affine: shift length");
        let mut out = (*x).clone();
        for ci in 0..c {
            let (sv, bv) = (s[[ci]], b[[ci]]);
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * sv + bv);
        }
        self.tape.custom(
            &[self, scale, shift],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                let mut ds = ArrayD::<f64>::zeros(IxDyn(&[c]));
                let mut db = ArrayD::<f64>::zeros(IxDyn(&[c]));
                for ci in 0..c {
                    let gc = g.index_axis(Axis(1), ci);
                    let xc = x.index_axis(Axis(1), ci);
                    ds[[ci]] = (&gc * &xc).sum();
                    db[[ci]] = gc.sum();
                    let sv = s[[ci]];
                    dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * sv);
                }
                vec![Some(dx), Some(ds), Some(db)]
            }),
        )
    }
}
