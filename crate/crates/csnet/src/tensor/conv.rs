//! 2-D convolution and batch normalization, plus the fused
//! conv → BN → (ReLU) block the patch-convolution stages are built from.
//!
//! Convolutions run as im2col + matmul. The fused block stores only its
//! output and the per-channel statistics; the pre-activation is recomputed
//! during backward, which keeps activation memory at one array per block.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Ix2, IxDyn};

use super::{BackwardOp, Elem, Tensor};
use crate::error::{Error, Result};

/// Batch-norm operating mode. `Eval` normalizes with the supplied running
/// statistics; `Train` uses batch statistics and reports them to the caller.
#[derive(Clone)]
pub enum BnMode<E> {
    Train,
    Eval { mean: Array1<E>, var: Array1<E> },
}

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (extent + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn conv_dims<E: Elem>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("x {:?}, w {:?}", x.shape(), w.shape()),
        });
    }
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if c != cw || stride == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("channels {c} vs {cw}, stride {stride}"),
        });
    }
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(wd, kw, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((n, c, h, wd, o, kh, kw, oh, ow)),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} too large for input {h}x{wd} with pad {pad}"),
        }),
    }
}

fn im2col<E: Elem>(
    xs: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut Array2<E>,
) {
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for out_i in 0..oh {
                    let ih = (out_i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        for out_j in 0..ow {
                            col[(row, out_i * ow + out_j)] = E::zero();
                        }
                        continue;
                    }
                    let base = (ch * h + ih as usize) * w;
                    for out_j in 0..ow {
                        let iw = (out_j * stride + kj) as isize - pad as isize;
                        col[(row, out_i * ow + out_j)] = if iw < 0 || iw >= w as isize {
                            E::zero()
                        } else {
                            xs[base + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<E: Elem>(
    col: &ArrayView2<E>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    xs: &mut [E],
) {
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for out_i in 0..oh {
                    let ih = (out_i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (ch * h + ih as usize) * w;
                    for out_j in 0..ow {
                        let iw = (out_j * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            xs[base + iw as usize] += col[(row, out_i * ow + out_j)];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_raw<E: Elem>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<E>> {
    let (n, c, h, wd, o, kh, kw, oh, ow) = conv_dims(x, w, stride, pad)?;
    let xs = x.as_slice().expect("contiguous input");
    let w2 = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .expect("contiguous weights")
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let mut out = ArrayD::<E>::zeros(IxDyn(&[n, o, oh, ow]));
    let os = out.as_slice_mut().expect("contiguous output");
    let mut col = Array2::<E>::zeros((c * kh * kw, oh * ow));
    let sample = c * h * wd;
    let out_sample = o * oh * ow;
    for i in 0..n {
        im2col(
            &xs[i * sample..(i + 1) * sample],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut col,
        );
        let y = w2.dot(&col); // [O, OH*OW]
        let ys = y.as_slice().expect("contiguous matmul output");
        os[i * out_sample..(i + 1) * out_sample].copy_from_slice(ys);
    }
    Ok(out)
}

/// dL/dx and dL/dw for a convolution, given dL/dy. The im2col buffers are
/// recomputed here rather than saved on the tape.
fn conv_backward_raw<E: Elem>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    gy: &ArrayD<E>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<E>>, Option<ArrayD<E>>) {
    let (n, c, h, wd, o, kh, kw, oh, ow) =
        conv_dims(x, w, stride, pad).expect("shapes validated in forward");
    let xs = x.as_slice().expect("contiguous input");
    let gys = gy.as_slice().expect("contiguous output grad");
    let w2 = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let mut gw2 = need_w.then(|| Array2::<E>::zeros((o, c * kh * kw)));
    let mut gx = need_x.then(|| ArrayD::<E>::zeros(x.raw_dim()));
    let mut col = Array2::<E>::zeros((c * kh * kw, oh * ow));
    let sample = c * h * wd;
    let out_sample = o * oh * ow;
    for i in 0..n {
        let g_n = ArrayView2::from_shape((o, oh * ow), &gys[i * out_sample..(i + 1) * out_sample])
            .expect("grad view");
        if let Some(gw2) = gw2.as_mut() {
            im2col(
                &xs[i * sample..(i + 1) * sample],
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut col,
            );
            *gw2 += &g_n.dot(&col.t());
        }
        if let Some(gx) = gx.as_mut() {
            let gcol = w2.t().dot(&g_n); // [CKK, OH*OW]
            let gxs = gx.as_slice_mut().expect("contiguous grad");
            col2im(
                &gcol.view(),
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut gxs[i * sample..(i + 1) * sample],
            );
        }
    }
    (
        gx,
        gw2.map(|g| g.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap()),
    )
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl<E: Elem> BackwardOp<E> for Conv2dOp {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let (gx, gw) = conv_backward_raw(
            &inputs[0],
            &inputs[1],
            grad,
            self.stride,
            self.pad,
            needs[0],
            needs[1],
        );
        vec![gx, gw]
    }
}

/// `conv2d(x [N,C,H,W], w [O,C,kh,kw])` with the given stride and symmetric
/// zero padding.
pub fn conv2d<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    super::check_same_tape(x, w);
    let value = conv_forward_raw(&x.value(), &w.value(), stride, pad)?;
    Ok(x.tape().push(
        value,
        vec![x.id(), w.id()],
        Box::new(Conv2dOp { stride, pad }),
    ))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

fn channel_stats<E: Elem>(y: &ArrayD<E>) -> (Array1<E>, Array1<E>) {
    let (n, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let m = E::from_usize_(n * h * w);
    let ys = y.as_slice().expect("contiguous");
    let mut mean = Array1::<E>::zeros(c);
    let mut var = Array1::<E>::zeros(c);
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let mut acc = E::zero();
            for v in &ys[base..base + plane] {
                acc += *v;
            }
            mean[ch] += acc;
        }
    }
    for ch in 0..c {
        mean[ch] = mean[ch] / m;
    }
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let mu = mean[ch];
            let mut acc = E::zero();
            for v in &ys[base..base + plane] {
                let d = *v - mu;
                acc += d * d;
            }
            var[ch] += acc;
        }
    }
    for ch in 0..c {
        var[ch] = var[ch] / m;
    }
    (mean, var)
}

fn bn_apply<E: Elem>(
    y: &ArrayD<E>,
    mean: &Array1<E>,
    inv_std: &Array1<E>,
    gamma: &Array1<E>,
    beta: &Array1<E>,
    relu: bool,
) -> ArrayD<E> {
    let (n, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let plane = h * w;
    let ys = y.as_slice().expect("contiguous");
    let mut out = ArrayD::<E>::zeros(y.raw_dim());
    let os = out.as_slice_mut().unwrap();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for t in 0..plane {
                let v = (ys[base + t] - mu) * is * ga + be;
                os[base + t] = if relu && v < E::zero() { E::zero() } else { v };
            }
        }
    }
    out
}

/// BN backward shared by the standalone and fused ops. `g_bn` is the gradient
/// at the BN output, `y` the BN input. Returns (dy, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
fn bn_backward<E: Elem>(
    y: &ArrayD<E>,
    g_bn: &ArrayD<E>,
    mean: &Array1<E>,
    inv_std: &Array1<E>,
    gamma: &Array1<E>,
    train: bool,
    need_y: bool,
) -> (Option<ArrayD<E>>, Array1<E>, Array1<E>) {
    let (n, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let plane = h * w;
    let m = E::from_usize_(n * plane);
    let ys = y.as_slice().unwrap();
    let gs = g_bn.as_slice().unwrap();
    let mut sum_g = Array1::<E>::zeros(c);
    let mut sum_gx = Array1::<E>::zeros(c);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let mut a = E::zero();
            let mut b = E::zero();
            for t in 0..plane {
                let g = gs[base + t];
                a += g;
                b += g * (ys[base + t] - mu) * is;
            }
            sum_g[ch] += a;
            sum_gx[ch] += b;
        }
    }
    let gy = need_y.then(|| {
        let mut gy = ArrayD::<E>::zeros(y.raw_dim());
        let gys = gy.as_slice_mut().unwrap();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (mu, is, ga) = (mean[ch], inv_std[ch], gamma[ch]);
                if train {
                    let m1 = sum_g[ch] / m;
                    let m2 = sum_gx[ch] / m;
                    for t in 0..plane {
                        let xhat = (ys[base + t] - mu) * is;
                        gys[base + t] = ga * is * (gs[base + t] - m1 - xhat * m2);
                    }
                } else {
                    for t in 0..plane {
                        gys[base + t] = gs[base + t] * ga * is;
                    }
                }
            }
        }
        gy
    });
    (gy, sum_gx, sum_g)
}

struct BatchNormOp<E> {
    mean: Array1<E>,
    inv_std: Array1<E>,
    train: bool,
}

impl<E: Elem> BackwardOp<E> for BatchNormOp<E> {
    fn backward(
        &self,
        _out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let gamma = inputs[1]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let (gx, dgamma, dbeta) = bn_backward(
            &inputs[0],
            grad,
            &self.mean,
            &self.inv_std,
            &gamma,
            self.train,
            needs[0],
        );
        vec![
            gx,
            needs[1].then(|| dgamma.into_dyn()),
            needs[2].then(|| dbeta.into_dyn()),
        ]
    }
}

/// Batch normalization over the channel axis of `[N, C, H, W]`. In `Train`
/// mode the returned statistics are the biased batch mean and variance, for
/// the caller to fold into its running estimates.
pub fn batchnorm2d<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mode: &BnMode<E>,
    eps: E,
) -> Result<(Tensor<E>, Option<(Array1<E>, Array1<E>)>)> {
    super::check_same_tape(x, gamma);
    super::check_same_tape(x, beta);
    let xv = x.value();
    if xv.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            detail: format!("expected 4-d input, got {:?}", xv.shape()),
        });
    }
    let c = xv.shape()[1];
    let gv = gamma.value();
    let bv = beta.value();
    if gv.len() != c || bv.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            detail: format!("channels {c}, gamma {}, beta {}", gv.len(), bv.len()),
        });
    }
    let (mean, var, train) = match mode {
        BnMode::Train => {
            let (m, v) = channel_stats(&xv);
            (m, v, true)
        }
        BnMode::Eval { mean, var } => (mean.clone(), var.clone(), false),
    };
    let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
    let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let out = bn_apply(&xv, &mean, &inv_std, &g1, &b1, false);
    let stats = train.then(|| (mean.clone(), var));
    let tensor = x.tape().push(
        out,
        vec![x.id(), gamma.id(), beta.id()],
        Box::new(BatchNormOp {
            mean,
            inv_std,
            train,
        }),
    );
    Ok((tensor, stats))
}

// ---------------------------------------------------------------------------
// fused conv + BN (+ ReLU)
// ---------------------------------------------------------------------------

struct ConvBnOp<E> {
    stride: usize,
    pad: usize,
    mean: Array1<E>,
    inv_std: Array1<E>,
    train: bool,
    relu: bool,
}

impl<E: Elem> BackwardOp<E> for ConvBnOp<E> {
    fn backward(
        &self,
        out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>> {
        let g_bn = if self.relu {
            let mut g = grad.clone();
            g.zip_mut_with(out, |gv, &ov| {
                if ov <= E::zero() {
                    *gv = E::zero();
                }
            });
            g
        } else {
            grad.clone()
        };
        // Pre-activation is recomputed instead of stored on the tape.
        let y = conv_forward_raw(&inputs[0], &inputs[1], self.stride, self.pad)
            .expect("shapes validated in forward");
        let gamma = inputs[2]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let need_conv = needs[0] || needs[1];
        let (gy, dgamma, dbeta) = bn_backward(
            &y,
            &g_bn,
            &self.mean,
            &self.inv_std,
            &gamma,
            self.train,
            need_conv,
        );
        let (gx, gw) = match gy {
            Some(gy) => conv_backward_raw(
                &inputs[0],
                &inputs[1],
                &gy,
                self.stride,
                self.pad,
                needs[0],
                needs[1],
            ),
            None => (None, None),
        };
        vec![
            gx,
            gw,
            needs[2].then(|| dgamma.into_dyn()),
            needs[3].then(|| dbeta.into_dyn()),
        ]
    }
}

/// Fused `conv2d → batchnorm2d → (relu)`. Matches the composition of the
/// standalone primitives exactly, but stores a single activation.
#[allow(clippy::too_many_arguments)]
pub fn conv_bn<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    stride: usize,
    pad: usize,
    mode: &BnMode<E>,
    eps: E,
    relu: bool,
) -> Result<(Tensor<E>, Option<(Array1<E>, Array1<E>)>)> {
    super::check_same_tape(x, w);
    super::check_same_tape(x, gamma);
    super::check_same_tape(x, beta);
    let y = conv_forward_raw(&x.value(), &w.value(), stride, pad)?;
    let c = y.shape()[1];
    let gv = gamma.value();
    let bv = beta.value();
    if gv.len() != c || bv.len() != c {
        return Err(Error::ShapeMismatch {
            op: "conv_bn",
            detail: format!("channels {c}, gamma {}, beta {}", gv.len(), bv.len()),
        });
    }
    let (mean, var, train) = match mode {
        BnMode::Train => {
            let (m, v) = channel_stats(&y);
            (m, v, true)
        }
        BnMode::Eval { mean, var } => (mean.clone(), var.clone(), false),
    };
    let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
    let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let out = bn_apply(&y, &mean, &inv_std, &g1, &b1, relu);
    let stats = train.then(|| (mean.clone(), var));
    let tensor = x.tape().push(
        out,
        vec![x.id(), w.id(), gamma.id(), beta.id()],
        Box::new(ConvBnOp {
            stride,
            pad,
            mean,
            inv_std,
            train,
            relu,
        }),
    );
    Ok((tensor, stats))
}
