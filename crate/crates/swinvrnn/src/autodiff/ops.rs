//! Differentiable operations.
//!
//! Every function computes its value eagerly and records pullback closures
//! on the session tape. Shape contracts are asserted: shape bugs are
//! programming errors, not runtime conditions.

use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3};

use super::{Arr, Edge, Tensor};

fn same_session(a: Tensor<'_>, b: Tensor<'_>) {
    assert!(
        std::ptr::eq(a.sess, b.sess),
        "tensors belong to different sessions"
    );
}

fn edge(parent: Tensor<'_>, pull: impl Fn(&Arr) -> Arr + 'static) -> Edge {
    Edge {
        parent: parent.idx,
        pull: Box::new(pull),
    }
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
    let value = &*va + &*vb;
    a.sess.push(
        value,
        vec![edge(a, |g| g.clone()), edge(b, |g| g.clone())],
    )
}

pub fn sub<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
    let value = &*va - &*vb;
    a.sess.push(
        value,
        vec![edge(a, |g| g.clone()), edge(b, |g| -g)],
    )
}

pub fn mul<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
    let value = &*va * &*vb;
    let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
    a.sess.push(
        value,
        vec![
            edge(a, move |g| g * &*cb),
            edge(b, move |g| g * &*ca),
        ],
    )
}

pub fn div<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
    let value = &*va / &*vb;
    let cy = Rc::new(value.clone());
    let cb = Rc::clone(&vb);
    let cb2 = Rc::clone(&vb);
    a.sess.push(
        value,
        vec![
            edge(a, move |g| g / &*cb),
            edge(b, move |g| -(g * &*cy) / &*cb2),
        ],
    )
}

pub fn neg(a: Tensor<'_>) -> Tensor<'_> {
    let value = -&*a.value();
    a.sess.push(value, vec![edge(a, |g| -g)])
}

pub fn scale(a: Tensor<'_>, c: f64) -> Tensor<'_> {
    let value = &*a.value() * c;
    a.sess.push(value, vec![edge(a, move |g| g * c)])
}

pub fn add_scalar(a: Tensor<'_>, c: f64) -> Tensor<'_> {
    let value = &*a.value() + c;
    a.sess.push(value, vec![edge(a, |g| g.clone())])
}

pub fn square(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let value = va.mapv(|x| x * x);
    let ca = Rc::clone(&va);
    a.sess
        .push(value, vec![edge(a, move |g| g * &(&*ca * 2.0))])
}

pub fn sqrt(a: Tensor<'_>) -> Tensor<'_> {
    let value = a.value().mapv(f64::sqrt);
    let cy = Rc::new(value.clone());
    a.sess
        .push(value, vec![edge(a, move |g| g / &(&*cy * 2.0))])
}

pub fn ln(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let value = va.mapv(f64::ln);
    let ca = Rc::clone(&va);
    a.sess.push(value, vec![edge(a, move |g| g / &*ca)])
}

pub fn exp(a: Tensor<'_>) -> Tensor<'_> {
    let value = a.value().mapv(f64::exp);
    let cy = Rc::new(value.clone());
    a.sess.push(value, vec![edge(a, move |g| g * &*cy)])
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// GELU activation (tanh form).
pub fn gelu(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let value = va.mapv(gelu_scalar);
    let ca = Rc::clone(&va);
    a.sess.push(
        value,
        vec![edge(a, move |g| g * &ca.mapv(gelu_grad_scalar))],
    )
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let value = va.mapv(softplus_scalar);
    let ca = Rc::clone(&va);
    a.sess.push(
        value,
        vec![edge(a, move |g| g * &ca.mapv(sigmoid_scalar))],
    )
}

pub fn sigmoid(a: Tensor<'_>) -> Tensor<'_> {
    let value = a.value().mapv(sigmoid_scalar);
    let cy = Rc::new(value.clone());
    a.sess.push(
        value,
        vec![edge(a, move |g| g * &cy.mapv(|y| y * (1.0 - y)))],
    )
}

pub fn tanh(a: Tensor<'_>) -> Tensor<'_> {
    let value = a.value().mapv(f64::tanh);
    let cy = Rc::new(value.clone());
    a.sess.push(
        value,
        vec![edge(a, move |g| g * &cy.mapv(|y| 1.0 - y * y))],
    )
}

/// Softmax over the last axis (any leading shape).
pub fn softmax_last(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let mut value = (*va).clone();
    let last = value.ndim() - 1;
    for mut lane in value.lanes_mut(Axis(last)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    let cy = Rc::new(value.clone());
    a.sess.push(
        value,
        vec![edge(a, move |g| {
            let mut out = g * &*cy;
            let last = out.ndim() - 1;
            for (mut lane, ylane) in out.lanes_mut(Axis(last)).into_iter().zip(cy.lanes(Axis(last))) {
                let dot: f64 = lane.iter().sum();
                for (o, &y) in lane.iter_mut().zip(ylane.iter()) {
                    *o -= dot * y;
                }
            }
            out
        })],
    )
}

// ---------------------------------------------------------------------------
// reductions and broadcasts
// ---------------------------------------------------------------------------

/// Sum of all elements, returned as a `[1]` tensor.
pub fn sum_all(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let shape = va.raw_dim();
    let value = ArrayD::from_elem(ndarray::IxDyn(&[1]), va.sum());
    a.sess.push(
        value,
        vec![edge(a, move |g| ArrayD::from_elem(shape.clone(), g[[0]]))],
    )
}

/// Mean of all elements, returned as a `[1]` tensor.
pub fn mean_all(a: Tensor<'_>) -> Tensor<'_> {
    let va = a.value();
    let n = va.len() as f64;
    let shape = va.raw_dim();
    let value = ArrayD::from_elem(ndarray::IxDyn(&[1]), va.sum() / n);
    a.sess.push(
        value,
        vec![edge(a, move |g| {
            ArrayD::from_elem(shape.clone(), g[[0]] / n)
        })],
    )
}

/// Mean squared error between two equally shaped tensors.
pub fn mse<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    mean_all(square(sub(a, b)))
}

/// `x + b` where `x` is `[n, c]` and `b` is `[c]`.
pub fn add_row_bias<'a>(x: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(x, b);
    let (vx, vb) = (x.value(), b.value());
    let c = vb.len();
    assert_eq!(vx.shape().last(), Some(&c), "add_row_bias: width mismatch");
    let x2 = vx.view().into_dimensionality::<Ix2>().expect("2-d input");
    let b1 = vb.view().into_shape(c).expect("1-d bias");
    let value = (&x2 + &b1).into_dyn();
    x.sess.push(
        value,
        vec![
            edge(x, |g| g.clone()),
            edge(b, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                g2.sum_axis(Axis(0)).into_dyn()
            }),
        ],
    )
}

/// `x * w` where `x` is `[n, c]` and `w` is `[c]`, broadcast over rows.
pub fn mul_row<'a>(x: Tensor<'a>, w: Tensor<'a>) -> Tensor<'a> {
    same_session(x, w);
    let (vx, vw) = (x.value(), w.value());
    let c = vw.len();
    assert_eq!(vx.shape().last(), Some(&c), "mul_row: width mismatch");
    let x2 = vx.view().into_dimensionality::<Ix2>().expect("2-d input");
    let w1 = vw.view().into_shape(c).expect("1-d weight");
    let value = (&x2 * &w1).into_dyn();
    let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
    x.sess.push(
        value,
        vec![
            edge(x, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let w1 = cw.view().into_shape(cw.len()).expect("1-d weight");
                (&g2 * &w1).into_dyn()
            }),
            edge(w, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let x2 = cx.view().into_dimensionality::<Ix2>().expect("2-d input");
                (&g2 * &x2).sum_axis(Axis(0)).into_dyn()
            }),
        ],
    )
}

/// Per-row mean of `[n, c]`, returned as `[n, 1]`.
pub fn mean_cols(x: Tensor<'_>) -> Tensor<'_> {
    let vx = x.value();
    let x2 = vx.view().into_dimensionality::<Ix2>().expect("2-d input");
    let (n, c) = x2.dim();
    let value = x2
        .mean_axis(Axis(1))
        .expect("nonempty rows")
        .into_shape((n, 1))
        .expect("column shape")
        .into_dyn();
    x.sess.push(
        value,
        vec![edge(x, move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut out = Array2::<f64>::zeros((n, c));
            for (mut row, gv) in out.rows_mut().into_iter().zip(g2.column(0).iter()) {
                row.fill(gv / c as f64);
            }
            out.into_dyn()
        })],
    )
}

fn col_shapes(x: &Arr, s: &Arr) -> (usize, usize) {
    let xs = x.shape();
    let ss = s.shape();
    assert_eq!(xs.len(), 2, "column op: lhs must be 2-d");
    assert_eq!(ss, [xs[0], 1], "column op: rhs must be [n, 1]");
    (xs[0], xs[1])
}

/// `x - s` with `s` `[n, 1]` broadcast over columns.
pub fn sub_col<'a>(x: Tensor<'a>, s: Tensor<'a>) -> Tensor<'a> {
    same_session(x, s);
    let (vx, vs) = (x.value(), s.value());
    col_shapes(&vx, &vs);
    let x2 = vx.view().into_dimensionality::<Ix2>().expect("2-d");
    let s2 = vs.view().into_dimensionality::<Ix2>().expect("2-d");
    let value = (&x2 - &s2).into_dyn();
    x.sess.push(
        value,
        vec![
            edge(x, |g| g.clone()),
            edge(s, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let n = g2.nrows();
                (-g2.sum_axis(Axis(1)))
                    .into_shape((n, 1))
                    .expect("column shape")
                    .into_dyn()
            }),
        ],
    )
}

/// `x / s` with `s` `[n, 1]` broadcast over columns.
pub fn div_col<'a>(x: Tensor<'a>, s: Tensor<'a>) -> Tensor<'a> {
    same_session(x, s);
    let (vx, vs) = (x.value(), s.value());
    col_shapes(&vx, &vs);
    let x2 = vx.view().into_dimensionality::<Ix2>().expect("2-d");
    let s2 = vs.view().into_dimensionality::<Ix2>().expect("2-d");
    let value = (&x2 / &s2).into_dyn();
    let cy = Rc::new(value.clone());
    let cs = Rc::clone(&vs);
    let cs2 = Rc::clone(&vs);
    x.sess.push(
        value,
        vec![
            edge(x, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let s2 = cs.view().into_dimensionality::<Ix2>().expect("2-d");
                (&g2 / &s2).into_dyn()
            }),
            edge(s, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let y2 = cy.view().into_dimensionality::<Ix2>().expect("2-d");
                let s2 = cs2.view().into_dimensionality::<Ix2>().expect("2-d");
                let n = g2.nrows();
                (-(&g2 * &y2 / &s2).sum_axis(Axis(1)))
                    .into_shape((n, 1))
                    .expect("column shape")
                    .into_dyn()
            }),
        ],
    )
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape<'a>(a: Tensor<'a>, shape: &[usize]) -> Tensor<'a> {
    let va = a.value();
    let orig = va.raw_dim();
    assert_eq!(
        va.len(),
        shape.iter().product::<usize>(),
        "reshape: element count mismatch"
    );
    let value = va
        .view()
        .into_shape(ndarray::IxDyn(shape))
        .expect("standard layout")
        .to_owned();
    a.sess.push(
        value,
        vec![edge(a, move |g| {
            g.view()
                .into_shape(orig.clone())
                .expect("standard layout")
                .to_owned()
        })],
    )
}

pub fn permute<'a>(a: Tensor<'a>, axes: &[usize]) -> Tensor<'a> {
    let va = a.value();
    assert_eq!(va.ndim(), axes.len(), "permute: axis count mismatch");
    let value = va
        .view()
        .permuted_axes(ndarray::IxDyn(axes))
        .as_standard_layout()
        .to_owned();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    a.sess.push(
        value,
        vec![edge(a, move |g| {
            g.view()
                .permuted_axes(ndarray::IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()
        })],
    )
}

/// Row gather on a `[n, c]` tensor: output row `r` is input row `idx[r]`.
/// An index of `-1` produces a zero row. The pullback scatter-adds.
pub fn gather_rows(a: Tensor<'_>, idx: Rc<Vec<i64>>) -> Tensor<'_> {
    let va = a.value();
    let x2 = va.view().into_dimensionality::<Ix2>().expect("2-d input");
    let (n, c) = x2.dim();
    let m = idx.len();
    let mut value = Array2::<f64>::zeros((m, c));
    for (r, &i) in idx.iter().enumerate() {
        if i >= 0 {
            debug_assert!((i as usize) < n, "gather index out of range");
            value.row_mut(r).assign(&x2.row(i as usize));
        }
    }
    let idx2 = Rc::clone(&idx);
    a.sess.push(
        value.into_dyn(),
        vec![edge(a, move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut out = Array2::<f64>::zeros((n, c));
            for (r, &i) in idx2.iter().enumerate() {
                if i >= 0 {
                    let mut dst = out.row_mut(i as usize);
                    dst += &g2.row(r);
                }
            }
            out.into_dyn()
        })],
    )
}

/// Concatenation along an axis.
pub fn concat<'a>(axis: usize, parts: &[Tensor<'a>]) -> Tensor<'a> {
    assert!(!parts.is_empty(), "concat of nothing");
    let views: Vec<_> = parts.iter().map(|t| t.value()).collect();
    let value = ndarray::concatenate(
        Axis(axis),
        &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .expect("concatenable shapes");
    let mut edges = Vec::with_capacity(parts.len());
    let mut offset = 0usize;
    for (t, v) in parts.iter().zip(&views) {
        let len = v.shape()[axis];
        let start = offset;
        edges.push(edge(*t, move |g| {
            g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .to_owned()
        }));
        offset += len;
    }
    parts[0].sess.push(value, edges)
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

/// `[m, k] x [k, n]` matrix product.
pub fn matmul<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(a, b);
    let (va, vb) = (a.value(), b.value());
    let a2 = va.view().into_dimensionality::<Ix2>().expect("2-d lhs");
    let b2 = vb.view().into_dimensionality::<Ix2>().expect("2-d rhs");
    assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
    let value = a2.dot(&b2).into_dyn();
    let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
    a.sess.push(
        value,
        vec![
            edge(a, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let b2 = cb.view().into_dimensionality::<Ix2>().expect("2-d rhs");
                g2.dot(&b2.t()).into_dyn()
            }),
            edge(b, move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let a2 = ca.view().into_dimensionality::<Ix2>().expect("2-d lhs");
                a2.t().dot(&g2).into_dyn()
            }),
        ],
    )
}

fn bmm_value(a: &Arr, b: &Arr) -> Array3<f64> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("3-d lhs");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("3-d rhs");
    let (ba, m, k) = a3.dim();
    let (bb, k2, n) = b3.dim();
    assert_eq!(ba, bb, "bmm: batch mismatch");
    assert_eq!(k, k2, "bmm: inner dim mismatch");
    let mut out = Array3::<f64>::zeros((ba, m, n));
    for i in 0..ba {
        out.index_axis_mut(Axis(0), i)
            .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
    }
    out
}

/// Batched matrix product `[B, m, k] x [B, k, n]`.
pub fn bmm<'a>(a: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(a, b);
    let (va, vb) = (a.value(), b.value());
    let value = bmm_value(&va, &vb).into_dyn();
    let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
    a.sess.push(
        value,
        vec![
            edge(a, move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let b3 = cb.view().into_dimensionality::<Ix3>().expect("3-d rhs");
                let (bs, m, _n) = g3.dim();
                let k = b3.dim().1;
                let mut out = Array3::<f64>::zeros((bs, m, k));
                for i in 0..bs {
                    out.index_axis_mut(Axis(0), i).assign(
                        &g3.index_axis(Axis(0), i)
                            .dot(&b3.index_axis(Axis(0), i).t()),
                    );
                }
                out.into_dyn()
            }),
            edge(b, move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let a3 = ca.view().into_dimensionality::<Ix3>().expect("3-d lhs");
                let (bs, _m, n) = g3.dim();
                let k = a3.dim().2;
                let mut out = Array3::<f64>::zeros((bs, k, n));
                for i in 0..bs {
                    out.index_axis_mut(Axis(0), i).assign(
                        &a3.index_axis(Axis(0), i)
                            .t()
                            .dot(&g3.index_axis(Axis(0), i)),
                    );
                }
                out.into_dyn()
            }),
        ],
    )
}

/// `x + b` where `x` is `[B, m, n]`, `b` is `[g, m, n]` and `g` divides `B`;
/// `b` cycles over the batch. Used for relative-position bias and masks.
pub fn add_batch_bias<'a>(x: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(x, b);
    let (vx, vb) = (x.value(), b.value());
    let x3 = vx.view().into_dimensionality::<Ix3>().expect("3-d lhs");
    let b3 = vb.view().into_dimensionality::<Ix3>().expect("3-d rhs");
    let (bs, m, n) = x3.dim();
    let (gs, mb, nb) = b3.dim();
    assert_eq!((m, n), (mb, nb), "add_batch_bias: trailing shape mismatch");
    assert!(gs > 0 && bs % gs == 0, "add_batch_bias: group mismatch");
    let mut value = x3.to_owned();
    for i in 0..bs {
        let mut slab = value.index_axis_mut(Axis(0), i);
        slab += &b3.index_axis(Axis(0), i % gs);
    }
    x.sess.push(
        value.into_dyn(),
        vec![
            edge(x, |g| g.clone()),
            edge(b, move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let mut out = Array3::<f64>::zeros((gs, m, n));
                for i in 0..bs {
                    let mut slab = out.index_axis_mut(Axis(0), i % gs);
                    slab += &g3.index_axis(Axis(0), i);
                }
                out.into_dyn()
            }),
        ],
    )
}

// ---------------------------------------------------------------------------
// triangular systems
// ---------------------------------------------------------------------------

/// Solves `L X = B` per channel by forward substitution, `L` lower
/// triangular `[c, k, k]`, `B` `[c, k, m]`.
fn solve_lower(l: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ch, k, _) = l.dim();
    let m = b.dim().2;
    let mut x = Array3::<f64>::zeros((ch, k, m));
    for c in 0..ch {
        let lc = l.index_axis(Axis(0), c);
        let bc = b.index_axis(Axis(0), c);
        let mut xc = x.index_axis_mut(Axis(0), c);
        for i in 0..k {
            for col in 0..m {
                let mut acc = bc[[i, col]];
                for j in 0..i {
                    acc -= lc[[i, j]] * xc[[j, col]];
                }
                xc[[i, col]] = acc / lc[[i, i]];
            }
        }
    }
    x
}

/// Solves `L^T Y = B` per channel by back substitution.
fn solve_lower_transpose(l: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ch, k, _) = l.dim();
    let m = b.dim().2;
    let mut y = Array3::<f64>::zeros((ch, k, m));
    for c in 0..ch {
        let lc = l.index_axis(Axis(0), c);
        let bc = b.index_axis(Axis(0), c);
        let mut yc = y.index_axis_mut(Axis(0), c);
        for i in (0..k).rev() {
            for col in 0..m {
                let mut acc = bc[[i, col]];
                for j in i + 1..k {
                    acc -= lc[[j, i]] * yc[[j, col]];
                }
                yc[[i, col]] = acc / lc[[i, i]];
            }
        }
    }
    y
}

/// Differentiable triangular solve `X = L^{-1} B` with `L` lower triangular
/// `[c, k, k]` (positive diagonal) and `B` `[c, k, m]`.
///
/// Pullbacks: `B̄ = L^{-T} Ḡ` and `L̄ = -B̄ X^T`, both via substitutions;
/// the inverse is never materialized.
pub fn tri_solve_lower<'a>(l: Tensor<'a>, b: Tensor<'a>) -> Tensor<'a> {
    same_session(l, b);
    let (vl, vb) = (l.value(), b.value());
    let l3 = vl.view().into_dimensionality::<Ix3>().expect("3-d factor");
    let b3 = vb.view().into_dimensionality::<Ix3>().expect("3-d rhs");
    assert_eq!(l3.dim().0, b3.dim().0, "tri_solve: channel mismatch");
    assert_eq!(l3.dim().1, l3.dim().2, "tri_solve: factor must be square");
    assert_eq!(l3.dim().1, b3.dim().1, "tri_solve: size mismatch");
    let x = solve_lower(&l3.to_owned(), &b3.to_owned());
    let cx = Rc::new(x.clone());
    let cl = Rc::clone(&vl);
    let cl2 = Rc::clone(&vl);
    let cx2 = Rc::clone(&cx);
    l.sess.push(
        x.into_dyn(),
        vec![
            edge(l, move |g| {
                let g3 = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("3-d grad")
                    .to_owned();
                let l3 = cl.view().into_dimensionality::<Ix3>().expect("factor").to_owned();
                let bbar = solve_lower_transpose(&l3, &g3);
                let (ch, k, _) = l3.dim();
                let mut out = Array3::<f64>::zeros((ch, k, k));
                for c in 0..ch {
                    let prod = bbar
                        .index_axis(Axis(0), c)
                        .dot(&cx2.index_axis(Axis(0), c).t());
                    let mut slab = out.index_axis_mut(Axis(0), c);
                    // the forward never reads above the diagonal, so the
                    // gradient there is exactly zero
                    for i in 0..k {
                        for j in 0..=i {
                            slab[[i, j]] = -prod[[i, j]];
                        }
                    }
                }
                out.into_dyn()
            }),
            edge(b, move |g| {
                let g3 = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("3-d grad")
                    .to_owned();
                let l3 = cl2.view().into_dimensionality::<Ix3>().expect("factor").to_owned();
                solve_lower_transpose(&l3, &g3).into_dyn()
            }),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Session};
    use ndarray::{arr1, arr2};

    #[test]
    fn softmax_rows_sum_to_one() {
        let ps = ParamStore::new();
        let sess = Session::new(&ps);
        let x = sess.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let y = softmax_last(x);
        let v = y.value();
        let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
        for row in v2.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let ps = ParamStore::new();
        let sess = Session::new(&ps);
        let x = sess.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        // reversal permutation
        let idx = Rc::new(vec![2i64, 1, 0]);
        let y = gather_rows(x, Rc::clone(&idx));
        let z = gather_rows(y, idx);
        assert_eq!(&*z.value(), &*x.value());
        let loss = sum_all(z);
        let grads = sess.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &ArrayD::ones(ndarray::IxDyn(&[3, 2])));
    }

    #[test]
    fn tri_solve_matches_dense() {
        let ps = ParamStore::new();
        let sess = Session::new(&ps);
        let l = arr2(&[[2.0, 0.0], [1.0, 3.0]]);
        let b = arr2(&[[4.0], [5.0]]);
        let lt = sess.constant(l.clone().into_shape((1, 2, 2)).unwrap().into_dyn());
        let bt = sess.constant(b.clone().into_shape((1, 2, 1)).unwrap().into_dyn());
        let x = tri_solve_lower(lt, bt);
        let xv = x.value();
        // L x = b => x0 = 2, x1 = (5 - 2)/3 = 1
        assert!((xv[[0, 0, 0]] - 2.0).abs() < 1e-14);
        assert!((xv[[0, 1, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn matmul_grads() {
        let mut ps = ParamStore::new();
        ps.insert("a", arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        ps.insert("b", arr2(&[[5.0], [6.0]]).into_dyn());
        let sess = Session::new(&ps);
        let a = sess.param("a");
        let b = sess.param("b");
        let y = matmul(a, b);
        let loss = sum_all(y);
        let grads = sess.backward(loss);
        // d(sum(A B))/dA = 1 * B^T broadcast over rows
        assert_eq!(
            grads.get(a).unwrap(),
            &arr2(&[[5.0, 6.0], [5.0, 6.0]]).into_dyn()
        );
        assert_eq!(grads.get(b).unwrap(), &arr2(&[[4.0], [6.0]]).into_dyn());
    }

    #[test]
    fn concat_splits_gradient() {
        let mut ps = ParamStore::new();
        ps.insert("a", arr1(&[1.0, 2.0]).into_dyn());
        ps.insert("b", arr1(&[3.0]).into_dyn());
        let sess = Session::new(&ps);
        let a = sess.param("a");
        let b = sess.param("b");
        let y = concat(0, &[a, b]);
        assert_eq!(y.shape(), vec![3]);
        let loss = sum_all(scale(y, 2.0));
        let grads = sess.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &arr1(&[2.0, 2.0]).into_dyn());
        assert_eq!(grads.get(b).unwrap(), &arr1(&[2.0]).into_dyn());
    }
}
