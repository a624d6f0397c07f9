//! Tape-recorded primitives: elementwise math, matmul, normalization,
//! segment reductions and the sparse edge kernels used by graph attention.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};

use super::{BackwardOp, Elem, Tensor};
use crate::error::{Error, Result};

pub(crate) fn as2<E: Elem>(a: &ArrayD<E>, op: &'static str) -> Result<Array2<E>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::ShapeMismatch {
            op,
            detail: format!("expected 2-d array, got shape {:?}", a.shape()),
        })
}

fn view2<E: Elem>(a: &ArrayD<E>) -> ArrayView2<'_, E> {
    a.view().into_dimensionality::<Ix2>().expect("2-d array")
}

fn view1<E: Elem>(a: &ArrayD<E>) -> ndarray::ArrayView1<'_, E> {
    a.view().into_dimensionality::<Ix1>().expect("1-d array")
}

// ---------------------------------------------------------------------------
// add / mul / scale
// ---------------------------------------------------------------------------

struct AddOp {
    broadcast_last: bool,
}

impl<E: Elem> BackwardOp<E> for AddOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        _inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let ga = needs[0].then(|| grad.clone());
        let gb = needs[1].then(|| {
            if self.broadcast_last {
                let d = *grad.shape().last().unwrap();
                let flat = grad
                    .view()
                    .into_shape_with_order((grad.len() / d, d))
                    .expect("contiguous grad");
                flat.sum_axis(Axis(0)).into_dyn()
            } else {
                grad.clone()
            }
        });
        vec![ga, gb]
    }
}

/// `a + b`; `b` may be 1-d and broadcast over the last axis of `a`.
pub fn add<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    super::check_same_tape(a, b);
    let av = a.value();
    let bv = b.value();
    let broadcast_last = bv.ndim() == 1 && av.ndim() > 1;
    let value = if av.shape() == bv.shape() {
        &*av + &*bv
    } else if broadcast_last && av.shape().last() == bv.shape().first() {
        &*av + &bv.view().into_dimensionality::<Ix1>().unwrap()
    } else {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
        });
    };
    Ok(a.tape()
        .push(value, vec![a.id(), b.id()], Box::new(AddOp { broadcast_last })))
}

struct MulOp;

impl<E: Elem> BackwardOp<E> for MulOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![
            needs[0].then(|| grad * &*inputs[1]),
            needs[1].then(|| grad * &*inputs[0]),
        ]
    }
}

/// Elementwise product of same-shape tensors.
pub fn mul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    super::check_same_tape(a, b);
    let av = a.value();
    let bv = b.value();
    if av.shape() != bv.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
        });
    }
    let value = &*av * &*bv;
    Ok(a.tape().push(value, vec![a.id(), b.id()], Box::new(MulOp)))
}

struct ScaleOp<E> {
    factor: E,
}

impl<E: Elem> BackwardOp<E> for ScaleOp<E> {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        _inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| grad * self.factor)]
    }
}

pub fn scale<E: Elem>(a: &Tensor<E>, factor: E) -> Tensor<E> {
    let value = &*a.value() * factor;
    a.tape()
        .push(value, vec![a.id()], Box::new(ScaleOp { factor }))
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

struct MatmulOp;

impl<E: Elem> BackwardOp<E> for MatmulOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let g = view2(grad);
        let a = view2(&inputs[0]);
        let b = view2(&inputs[1]);
        vec![
            needs[0].then(|| g.dot(&b.t()).into_dyn()),
            needs[1].then(|| a.t().dot(&g).into_dyn()),
        ]
    }
}

/// `a · b` for 2-d tensors.
pub fn matmul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    super::check_same_tape(a, b);
    let av = a.value();
    let bv = b.value();
    let a2 = as2(&av, "matmul")?;
    let b2 = as2(&bv, "matmul")?;
    if a2.ncols() != b2.nrows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} · {:?}", av.shape(), bv.shape()),
        });
    }
    let value = a2.dot(&b2).into_dyn();
    Ok(a.tape()
        .push(value, vec![a.id(), b.id()], Box::new(MatmulOp)))
}

/// `x · w (+ b)` — the standard fully connected layer.
pub fn linear<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let y = matmul(x, w)?;
    match b {
        Some(b) => add(&y, b),
        None => Ok(y),
    }
}

// ---------------------------------------------------------------------------
// relu / sum
// ---------------------------------------------------------------------------

struct ReluOp;

impl<E: Elem> BackwardOp<E> for ReluOp {
    fn backward(
        &self,
        out: &ArrayD<E>,
        grad: &ArrayD<E>,
        _inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| {
            let mut g = grad.clone();
            g.zip_mut_with(out, |gv, &ov| {
                if ov <= E::zero() {
                    *gv = E::zero();
                }
            });
            g
        })]
    }
}

pub fn relu<E: Elem>(a: &Tensor<E>) -> Tensor<E> {
    let value = a.value().mapv(|v| if v > E::zero() { v } else { E::zero() });
    a.tape().push(value, vec![a.id()], Box::new(ReluOp))
}

struct SumOp;

impl<E: Elem> BackwardOp<E> for SumOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let g = grad.iter().copied().sum::<E>();
        vec![needs[0].then(|| ArrayD::from_elem(inputs[0].raw_dim(), g))]
    }
}

/// Sum of all elements, as a 0-d tensor.
pub fn sum<E: Elem>(a: &Tensor<E>) -> Tensor<E> {
    let total = a.value().iter().copied().sum::<E>();
    let value = ArrayD::from_elem(IxDyn(&[]), total);
    a.tape().push(value, vec![a.id()], Box::new(SumOp))
}

// ---------------------------------------------------------------------------
// layernorm
// ---------------------------------------------------------------------------

struct LayerNormOp<E> {
    eps: E,
}

impl<E: Elem> BackwardOp<E> for LayerNormOp<E> {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let x = view2(&inputs[0]);
        let gamma = view1(&inputs[1]);
        let g = view2(grad);
        let (n, d) = x.dim();
        let dn = E::from_usize_(d);

        let mut gx = needs[0].then(|| Array2::<E>::zeros((n, d)));
        let mut ggamma = needs[1].then(|| Array1::<E>::zeros(d));
        let mut gbeta = needs[2].then(|| Array1::<E>::zeros(d));

        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let inv_std = (var + self.eps).sqrt().recip();
            // xhat_j = (x_j - mean) * inv_std
            let grow = g.row(i);
            if let Some(gg) = ggamma.as_mut() {
                for j in 0..d {
                    gg[j] += grow[j] * (row[j] - mean) * inv_std;
                }
            }
            if let Some(gb) = gbeta.as_mut() {
                for j in 0..d {
                    gb[j] += grow[j];
                }
            }
            if let Some(gx) = gx.as_mut() {
                // dxhat = g * gamma; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                let mut m1 = E::zero();
                let mut m2 = E::zero();
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    let dxhat = grow[j] * gamma[j];
                    m1 += dxhat;
                    m2 += dxhat * xhat;
                }
                m1 = m1 / dn;
                m2 = m2 / dn;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    let dxhat = grow[j] * gamma[j];
                    gx[(i, j)] = inv_std * (dxhat - m1 - xhat * m2);
                }
            }
        }
        vec![
            gx.map(|a| a.into_dyn()),
            ggamma.map(|a| a.into_dyn()),
            gbeta.map(|a| a.into_dyn()),
        ]
    }
}

/// Layer normalization over the last axis of a 2-d tensor.
pub fn layernorm<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    super::check_same_tape(x, gamma);
    super::check_same_tape(x, beta);
    let xv = x.value();
    let x2 = as2(&xv, "layernorm")?;
    let (n, d) = x2.dim();
    let gv = gamma.value();
    let bv = beta.value();
    if gv.len() != d || bv.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            detail: format!("features {d}, gamma {}, beta {}", gv.len(), bv.len()),
        });
    }
    let gamma1 = view1(&gv);
    let beta1 = view1(&bv);
    let dn = E::from_usize_(d);
    let mut out = Array2::<E>::zeros((n, d));
    for i in 0..n {
        let row = x2.row(i);
        let mean = row.iter().copied().sum::<E>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
        let inv_std = (var + eps).sqrt().recip();
        for j in 0..d {
            out[(i, j)] = (row[j] - mean) * inv_std * gamma1[j] + beta1[j];
        }
    }
    Ok(x.tape().push(
        out.into_dyn(),
        vec![x.id(), gamma.id(), beta.id()],
        Box::new(LayerNormOp { eps }),
    ))
}

// ---------------------------------------------------------------------------
// segment reductions
// ---------------------------------------------------------------------------

fn check_offsets(offsets: &[usize], n: usize, op: &'static str) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&n) {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("offsets must span [0, {n}], got {offsets:?}"),
        });
    }
    for w in offsets.windows(2) {
        if w[1] < w[0] {
            return Err(Error::ShapeMismatch {
                op,
                detail: "offsets must be non-decreasing".into(),
            });
        }
        if w[1] == w[0] {
            return Err(Error::EmptySegment(op));
        }
    }
    Ok(())
}

struct SegmentSoftmaxOp {
    offsets: Rc<Vec<usize>>,
}

impl<E: Elem> BackwardOp<E> for SegmentSoftmaxOp {
    fn backward(
        &self,
        out: &ArrayD<E>,
        grad: &ArrayD<E>,
        _inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| {
            let a = view2(out);
            let g = view2(grad);
            let (_, h) = a.dim();
            let mut gx = Array2::<E>::zeros(a.dim());
            for w in self.offsets.windows(2) {
                for c in 0..h {
                    let mut dot = E::zero();
                    for r in w[0]..w[1] {
                        dot += a[(r, c)] * g[(r, c)];
                    }
                    for r in w[0]..w[1] {
                        gx[(r, c)] = a[(r, c)] * (g[(r, c)] - dot);
                    }
                }
            }
            gx.into_dyn()
        })]
    }
}

/// Softmax over row segments of a `[rows, cols]` tensor, independently per
/// column. Segment `i` covers rows `offsets[i]..offsets[i+1]`.
pub fn softmax_over_segments<E: Elem>(
    x: &Tensor<E>,
    offsets: Rc<Vec<usize>>,
) -> Result<Tensor<E>> {
    let xv = x.value();
    let x2 = as2(&xv, "softmax_over_segments")?;
    check_offsets(&offsets, x2.nrows(), "softmax_over_segments")?;
    let (_, h) = x2.dim();
    let mut out = Array2::<E>::zeros(x2.dim());
    for w in offsets.windows(2) {
        for c in 0..h {
            let mut max = E::neg_infinity();
            for r in w[0]..w[1] {
                if x2[(r, c)] > max {
                    max = x2[(r, c)];
                }
            }
            let mut total = E::zero();
            for r in w[0]..w[1] {
                let e = (x2[(r, c)] - max).exp();
                out[(r, c)] = e;
                total += e;
            }
            for r in w[0]..w[1] {
                out[(r, c)] = out[(r, c)] / total;
            }
        }
    }
    Ok(x.tape().push(
        out.into_dyn(),
        vec![x.id()],
        Box::new(SegmentSoftmaxOp { offsets }),
    ))
}

struct SegmentMeanOp {
    offsets: Rc<Vec<usize>>,
}

impl<E: Elem> BackwardOp<E> for SegmentMeanOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| {
            let g = view2(grad);
            let x = view2(&inputs[0]);
            let mut gx = Array2::<E>::zeros(x.dim());
            for (s, w) in self.offsets.windows(2).enumerate() {
                let inv = E::from_usize_(w[1] - w[0]).recip();
                for r in w[0]..w[1] {
                    for c in 0..x.ncols() {
                        gx[(r, c)] = g[(s, c)] * inv;
                    }
                }
            }
            gx.into_dyn()
        })]
    }
}

/// Mean over row segments: `[N, D]` with `S` segments gives `[S, D]`.
pub fn segment_mean<E: Elem>(x: &Tensor<E>, offsets: Rc<Vec<usize>>) -> Result<Tensor<E>> {
    let xv = x.value();
    let x2 = as2(&xv, "segment_mean")?;
    check_offsets(&offsets, x2.nrows(), "segment_mean")?;
    let d = x2.ncols();
    let s = offsets.len() - 1;
    let mut out = Array2::<E>::zeros((s, d));
    for (si, w) in offsets.windows(2).enumerate() {
        let inv = E::from_usize_(w[1] - w[0]).recip();
        for r in w[0]..w[1] {
            for c in 0..d {
                out[(si, c)] += x2[(r, c)] * inv;
            }
        }
    }
    Ok(x.tape().push(
        out.into_dyn(),
        vec![x.id()],
        Box::new(SegmentMeanOp { offsets }),
    ))
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

struct GlobalAvgPoolOp;

impl<E: Elem> BackwardOp<E> for GlobalAvgPoolOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| {
            let shape = inputs[0].shape();
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let inv = E::from_usize_(h * w).recip();
            let g = view2(grad);
            let mut gx = ArrayD::<E>::zeros(inputs[0].raw_dim());
            for i in 0..n {
                for ch in 0..c {
                    let gv = g[(i, ch)] * inv;
                    gx.slice_mut(ndarray::s![i, ch, .., ..]).fill(gv);
                }
            }
            gx
        })]
    }
}

/// Spatial mean of a `[N, C, H, W]` tensor, giving `[N, C]`.
pub fn global_avg_pool2d<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xv = x.value();
    if xv.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool2d",
            detail: format!("expected 4-d input, got {:?}", xv.shape()),
        });
    }
    let shape = xv.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let inv = E::from_usize_(h * w).recip();
    let mut out = Array2::<E>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            out[(i, ch)] = xv
                .slice(ndarray::s![i, ch, .., ..])
                .iter()
                .copied()
                .sum::<E>()
                * inv;
        }
    }
    Ok(x.tape()
        .push(out.into_dyn(), vec![x.id()], Box::new(GlobalAvgPoolOp)))
}

// ---------------------------------------------------------------------------
// column slicing
// ---------------------------------------------------------------------------

struct SliceColsOp {
    start: usize,
}

impl<E: Elem> BackwardOp<E> for SliceColsOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| {
            let g = view2(grad);
            let mut gx = ArrayD::<E>::zeros(inputs[0].raw_dim());
            gx.slice_mut(ndarray::s![.., self.start..self.start + g.ncols()])
                .assign(&g);
            gx
        })]
    }
}

/// Columns `start..start+len` of a 2-d tensor.
pub fn slice_cols<E: Elem>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let xv = x.value();
    let x2 = as2(&xv, "slice_cols")?;
    if start + len > x2.ncols() {
        return Err(Error::ShapeMismatch {
            op: "slice_cols",
            detail: format!("cols {}..{} of {}", start, start + len, x2.ncols()),
        });
    }
    let out = x2.slice(ndarray::s![.., start..start + len]).to_owned();
    Ok(x.tape()
        .push(out.into_dyn(), vec![x.id()], Box::new(SliceColsOp { start })))
}

// ---------------------------------------------------------------------------
// sparse edge kernels (masked attention)
// ---------------------------------------------------------------------------

struct EdgeScoresOp<E> {
    rows: Rc<Vec<u32>>,
    cols: Rc<Vec<u32>>,
    heads: usize,
    head_dim: usize,
    scale: E,
}

impl<E: Elem> BackwardOp<E> for EdgeScoresOp<E> {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let q = view2(&inputs[0]);
        let k = view2(&inputs[1]);
        let g = view2(grad);
        let mut gq = needs[0].then(|| Array2::<E>::zeros(q.dim()));
        let mut gk = needs[1].then(|| Array2::<E>::zeros(k.dim()));
        for e in 0..self.rows.len() {
            let (i, j) = (self.rows[e] as usize, self.cols[e] as usize);
            for h in 0..self.heads {
                let base = h * self.head_dim;
                let ge = g[(e, h)] * self.scale;
                if let Some(gq) = gq.as_mut() {
                    for t in 0..self.head_dim {
                        gq[(i, base + t)] += ge * k[(j, base + t)];
                    }
                }
                if let Some(gk) = gk.as_mut() {
                    for t in 0..self.head_dim {
                        gk[(j, base + t)] += ge * q[(i, base + t)];
                    }
                }
            }
        }
        vec![gq.map(|a| a.into_dyn()), gk.map(|a| a.into_dyn())]
    }
}

/// Per-edge scaled dot products `⟨Q[i], K[j]⟩ / √d` for every stored edge,
/// split into `heads` independent heads. Only edge endpoints are read, so
/// non-neighbor rows of `k` never influence a vertex's scores.
pub fn edge_scores<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    rows: Rc<Vec<u32>>,
    cols: Rc<Vec<u32>>,
    heads: usize,
) -> Result<Tensor<E>> {
    super::check_same_tape(q, k);
    let qv = q.value();
    let kv = k.value();
    let q2 = as2(&qv, "edge_scores")?;
    let k2 = as2(&kv, "edge_scores")?;
    if q2.dim() != k2.dim() || q2.ncols() % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "edge_scores",
            detail: format!("q {:?}, k {:?}, heads {heads}", q2.dim(), k2.dim()),
        });
    }
    let head_dim = q2.ncols() / heads;
    let scale = E::from_usize_(head_dim).sqrt().recip();
    let ne = rows.len();
    let mut out = Array2::<E>::zeros((ne, heads));
    for e in 0..ne {
        let (i, j) = (rows[e] as usize, cols[e] as usize);
        for h in 0..heads {
            let base = h * head_dim;
            let mut dot = E::zero();
            for t in 0..head_dim {
                dot += q2[(i, base + t)] * k2[(j, base + t)];
            }
            out[(e, h)] = dot * scale;
        }
    }
    Ok(q.tape().push(
        out.into_dyn(),
        vec![q.id(), k.id()],
        Box::new(EdgeScoresOp {
            rows,
            cols,
            heads,
            head_dim,
            scale,
        }),
    ))
}

struct EdgeMixOp {
    rows: Rc<Vec<u32>>,
    cols: Rc<Vec<u32>>,
    heads: usize,
    head_dim: usize,
}

impl<E: Elem> BackwardOp<E> for EdgeMixOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let attn = view2(&inputs[0]);
        let v = view2(&inputs[1]);
        let g = view2(grad);
        let mut gattn = needs[0].then(|| Array2::<E>::zeros(attn.dim()));
        let mut gv = needs[1].then(|| Array2::<E>::zeros(v.dim()));
        for e in 0..self.rows.len() {
            let (i, j) = (self.rows[e] as usize, self.cols[e] as usize);
            for h in 0..self.heads {
                let base = h * self.head_dim;
                if let Some(ga) = gattn.as_mut() {
                    let mut dot = E::zero();
                    for t in 0..self.head_dim {
                        dot += g[(i, base + t)] * v[(j, base + t)];
                    }
                    ga[(e, h)] = dot;
                }
                if let Some(gv) = gv.as_mut() {
                    let a = attn[(e, h)];
                    for t in 0..self.head_dim {
                        gv[(j, base + t)] += a * g[(i, base + t)];
                    }
                }
            }
        }
        vec![gattn.map(|a| a.into_dyn()), gv.map(|a| a.into_dyn())]
    }
}

/// Attention-weighted neighbor aggregation: for every vertex `i`,
/// `out[i] = Σ_{edges (i,j)} attn[e] · V[j]` per head.
pub fn edge_mix<E: Elem>(
    attn: &Tensor<E>,
    v: &Tensor<E>,
    rows: Rc<Vec<u32>>,
    cols: Rc<Vec<u32>>,
    heads: usize,
) -> Result<Tensor<E>> {
    super::check_same_tape(attn, v);
    let av = attn.value();
    let vv = v.value();
    let a2 = as2(&av, "edge_mix")?;
    let v2 = as2(&vv, "edge_mix")?;
    if a2.nrows() != rows.len() || a2.ncols() != heads || v2.ncols() % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "edge_mix",
            detail: format!(
                "attn {:?}, v {:?}, edges {}, heads {heads}",
                a2.dim(),
                v2.dim(),
                rows.len()
            ),
        });
    }
    let head_dim = v2.ncols() / heads;
    let mut out = Array2::<E>::zeros(v2.dim());
    for e in 0..rows.len() {
        let (i, j) = (rows[e] as usize, cols[e] as usize);
        for h in 0..heads {
            let base = h * head_dim;
            let a = a2[(e, h)];
            for t in 0..head_dim {
                out[(i, base + t)] += a * v2[(j, base + t)];
            }
        }
    }
    Ok(attn.tape().push(
        out.into_dyn(),
        vec![attn.id(), v.id()],
        Box::new(EdgeMixOp {
            rows,
            cols,
            heads,
            head_dim,
        }),
    ))
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

struct CrossEntropyOp {
    targets: Rc<Vec<usize>>,
}

impl<E: Elem> BackwardOp<E> for CrossEntropyOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        vec![needs[0].then(|| {
            let logits = view2(&inputs[0]);
            let (b, c) = logits.dim();
            let gscale = grad.iter().copied().sum::<E>() / E::from_usize_(b);
            let mut gx = Array2::<E>::zeros((b, c));
            for i in 0..b {
                let row = logits.row(i);
                let max = row.iter().copied().fold(E::neg_infinity(), E::max);
                let mut total = E::zero();
                for j in 0..c {
                    total += (row[j] - max).exp();
                }
                for j in 0..c {
                    let p = (row[j] - max).exp() / total;
                    let y = if j == self.targets[i] { E::one() } else { E::zero() };
                    gx[(i, j)] = (p - y) * gscale;
                }
            }
            gx.into_dyn()
        })]
    }
}

/// Mean softmax cross-entropy over a batch of logits `[B, C]`.
pub fn cross_entropy<E: Elem>(logits: &Tensor<E>, targets: Rc<Vec<usize>>) -> Result<Tensor<E>> {
    let lv = logits.value();
    let l2 = as2(&lv, "cross_entropy")?;
    let (b, c) = l2.dim();
    if targets.len() != b || targets.iter().any(|&t| t >= c) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{} logits rows of width {c}, targets {:?}", b, targets),
        });
    }
    let mut total = E::zero();
    for i in 0..b {
        let row = l2.row(i);
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<E>().ln() + max;
        total += lse - row[targets[i]];
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total / E::from_usize_(b));
    Ok(logits
        .tape()
        .push(value, vec![logits.id()], Box::new(CrossEntropyOp { targets })))
}
