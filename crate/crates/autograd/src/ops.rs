//! Element-wise, reduction and structural operations.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use crate::tape::{Tensor, Var};

pub(crate) fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected rank-2 tensor, got {:?}", t.shape()))
}

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "add");
        let out = &*a + &*b;
        self.tape.custom(
            &[self, other],
            out,
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "sub");
        let out = &*a - &*b;
        self.tape.custom(
            &[self, other],
            out,
            Box::new(|g| vec![Some(g.clone()), Some(-g)]),
        )
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "mul");
        let out = &*a * &*b;
        self.tape.custom(
            &[self, other],
            out,
            Box::new(move |g| vec![Some(g * &*b), Some(g * &*a)]),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = &*self.value() * c;
        self.tape
            .custom(&[self], out, Box::new(move |g| vec![Some(g * c)]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = &*self.value() + c;
        self.tape
            .custom(&[self], out, Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.max(0.0));
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(&*x).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().mapv(sigmoid));
        let out = (*y).clone();
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(&*y)
                    .for_each(|d, &s| *d *= s * (1.0 - s));
                vec![Some(dx)]
            }),
        )
    }

    pub fn exp(self) -> Var<'t> {
        let y = Rc::new(self.value().mapv(f64::exp));
        let out = (*y).clone();
        self.tape
            .custom(&[self], out, Box::new(move |g| vec![Some(g * &*y)]))
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(f64::ln);
        self.tape
            .custom(&[self], out, Box::new(move |g| vec![Some(g / &*x)]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                let s = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(shape.clone(), s))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = view2(&a).dot(&view2(&b)).into_dyn();
        self.tape.custom(
            &[self, other],
            out,
            Box::new(move |g| {
                let g2 = view2(g);
                let da = g2.dot(&view2(&b).t()).into_dyn();
                let db = view2(&a).t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Affine map `x W^T + b` with `x: [n, d]`, `W: [o, d]`, `b: [o]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let mut out = view2(&x).dot(&view2(&w).t());
        if let Some(b) = bias {
            let b = b.value();
            assert_eq!(b.len(), out.ncols(), "linear: bias length");
            let b1 = b.view().into_shape_with_order(out.ncols()).unwrap();
            out += &b1;
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
                let g2 = view2(g);
                let dx = g2.dot(&view2(&w)).into_dyn();
                let dw = g2.t().dot(&view2(&x)).into_dyn();
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    grads.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Transpose of a `[m, n]` tensor.
    pub fn transpose(self) -> Var<'t> {
        let out = view2(&self.value()).t().as_standard_layout().into_owned().into_dyn();
        self.tape.custom(
            &[self],
            out,
            Box::new(|g| vec![Some(view2(g).t().as_standard_layout().into_owned().into_dyn())]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&orig))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Selects rows along axis 0. Indices may repeat; gradients accumulate.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let out = x.select(Axis(0), indices);
        let idx = indices.to_vec();
        let shape = x.raw_dim();
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(shape.clone());
                for (row, &src) in idx.iter().enumerate() {
                    let mut dst = dx.index_axis_mut(Axis(0), src);
                    dst += &g.index_axis(Axis(0), row);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Element-wise maximum over row groups of a `[n, d]` tensor.
    ///
    /// Produces one row per group; empty groups yield a zero row. Gradient flows
    /// to the first row attaining the maximum in each column.
    pub fn group_max(self, groups: &[Vec<usize>]) -> Var<'t> {
        let x = self.value();
        let x2 = view2(&x);
        let d = x2.ncols();
        let mut out = Array2::<f64>::zeros((groups.len(), d));
        let mut argmax = vec![usize::MAX; groups.len() * d];
        for (gi, group) in groups.iter().enumerate() {
            for c in 0..d {
                let mut best: Option<(usize, f64)> = None;
                for &r in group {
                    let v = x2[[r, c]];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                if let Some((r, v)) = best {
                    out[[gi, c]] = v;
                    argmax[gi * d + c] = r;
                }
            }
        }
        let shape = x.raw_dim();
        self.tape.custom(
            &[self],
            out.into_dyn(),
            Box::new(move |g| {
                let g2 = view2(g);
                let mut dx = ArrayD::zeros(shape.clone());
                {
                    let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for gi in 0..g2.nrows() {
                        for c in 0..d {
                            let r = argmax[gi * d + c];
                            if r != usize::MAX {
                                dx2[[r, c]] += g2[[gi, c]];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Euclidean norm of every row of `[n, d]`, returned as `[n]`.
    pub fn row_norms(self) -> Var<'t> {
        let x = self.value();
        let norms: Vec<f64> = view2(&x)
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[norms.len()]), norms.clone()).unwrap();
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                let mut dx = (*x).clone();
                for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let n = norms[i];
                    let s = if n > 0.0 { g[[i]] / n } else { 0.0 };
                    row.mapv_inplace(|v| v * s);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scales every row of `[n, d]` to unit length; rows shorter than `eps`
    /// are divided by `eps` instead.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let x2 = view2(&x);
        let norms: Vec<f64> = x2.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut y = x2.to_owned();
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let denom = norms[i].max(eps);
            row.mapv_inplace(|v| v / denom);
        }
        let y = Rc::new(y);
        let out = (*y).clone().into_dyn();
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g| {
                let g2 = view2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let gi = g2.row(i);
                    let yi = y.row(i);
                    let n = norms[i];
                    if n > eps {
                        let proj = yi.dot(&gi);
                        let mut row = dx.row_mut(i);
                        Zip::from(&mut row)
                            .and(&gi)
                            .and(&yi)
                            .for_each(|d, &gv, &yv| *d = (gv - yv * proj) / n);
                    } else {
                        dx.row_mut(i).assign(&(&gi / eps));
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// `a * x + b` where `a` and `b` are single-element tensors.
    pub fn scalar_affine(self, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let x = self.value();
        let (av, bv) = (a.item(), b.item());
        let out = x.mapv(|v| av * v + bv);
        let (ashape, bshape) = (a.value().raw_dim(), b.value().raw_dim());
        self.tape.custom(
            &[self, a, b],
            out,
            Box::new(move |g| {
                let da = (g * &*x).sum();
                let db = g.sum();
                vec![
                    Some(g * av),
                    Some(ArrayD::from_elem(ashape.clone(), da)),
                    Some(ArrayD::from_elem(bshape.clone(), db)),
                ]
            }),
        )
    }
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!vars.is_empty(), "concat of nothing");
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    vars[0].tape.custom(
        vars,
        out,
        Box::new(move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    start += len;
                    Some(part)
                })
                .collect()
        }),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds several rank-0 (or same-shape) variables.
pub fn sum_all<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let mut iter = vars.iter().copied();
    let first = iter.next().expect("sum_all of nothing");
    iter.fold(first, |acc, v| acc.add(v))
}
