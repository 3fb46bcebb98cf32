//! Stride-1 2-D convolution via im2col + GEMM, with hand-derived backward.
//!
//! The input gradient is computed as a convolution of the output gradient
//! with the spatially flipped, in/out-transposed kernel at padding
//! `k − 1 − pad` (valid for `pad ≤ k − 1`, which covers the two cases used
//! here: 3×3 "same" and 1×1). The weight gradient reuses the im2col buffer
//! as a GEMM against the output gradient.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, ArrayView4, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Element;

use super::{HasParams, ParamTensor};

/// Zero-pads the two spatial axes of an `(N, C, H, W)` tensor.
fn pad4<T: Element>(x: &ArrayView4<'_, T>, pad: usize) -> Array4<T> {
    if pad == 0 {
        return x.to_owned();
    }
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., .., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Lowers one padded sample `(C, Hp, Wp)` to the `(C·k·k, oh·ow)` patch
/// matrix for stride-1 convolution.
fn im2col<T: Element>(xp: &ArrayView3<'_, T>, k: usize, oh: usize, ow: usize) -> Array2<T> {
    let c = xp.dim().0;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    let mut row = 0;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    dst.slice_mut(s![oy * ow..(oy + 1) * ow])
                        .assign(&xp.slice(s![ci, oy + ky, kx..kx + ow]));
                }
                row += 1;
            }
        }
    }
    cols
}

/// Stride-1 convolution of `(N, C, H, W)` with kernels `(OC, C, k, k)`.
/// Output is `(N, OC, H + 2·pad − k + 1, W + 2·pad − k + 1)`.
pub fn conv2d<T: Element>(
    x: &ArrayView4<'_, T>,
    w: &ArrayView4<'_, T>,
    b: Option<&Array1<T>>,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let (oc, ic, k, k2) = w.dim();
    assert_eq!(c, ic, "input channels {c} vs kernel {ic}");
    assert_eq!(k, k2, "kernels must be square");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "input smaller than kernel");
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;

    let wmat = w
        .to_shape((oc, ic * k * k))
        .expect("kernel view is contiguous")
        .to_owned();
    let xp = pad4(x, pad);
    let mut out = Array4::zeros((n, oc, oh, ow));
    for i in 0..n {
        let cols = im2col(&xp.index_axis(Axis(0), i), k, oh, ow);
        let res = wmat.dot(&cols); // (oc, oh*ow)
        let mut out_i = out.index_axis_mut(Axis(0), i);
        for o in 0..oc {
            let bias = b.map_or(T::zero(), |b| b[o]);
            let mut plane = out_i.index_axis_mut(Axis(0), o);
            let src = res.row(o);
            for oy in 0..oh {
                for ox in 0..ow {
                    plane[(oy, ox)] = src[oy * ow + ox] + bias;
                }
            }
        }
    }
    out
}

/// Gradients of a scalar loss through [`conv2d`]: returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Element>(
    x: &ArrayView4<'_, T>,
    w: &ArrayView4<'_, T>,
    gout: &ArrayView4<'_, T>,
    pad: usize,
) -> (Array4<T>, Array4<T>, Array1<T>) {
    let (n, _c, h, wd) = x.dim();
    let (oc, ic, k, _) = w.dim();
    let (gn, goc, oh, ow) = gout.dim();
    assert_eq!(n, gn);
    assert_eq!(oc, goc);
    assert_eq!(oh, h + 2 * pad - k + 1);
    assert!(pad <= k - 1 || k == 1, "backward requires pad ≤ k − 1");

    // dX: convolve gout with the flipped, transposed kernel.
    let mut wflip = Array4::zeros((ic, oc, k, k));
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    wflip[(i, o, k - 1 - ky, k - 1 - kx)] = w[(o, i, ky, kx)];
                }
            }
        }
    }
    // Output spatial size: oh + 2(k−1−pad) − k + 1 = h, exactly the input.
    let dx = conv2d(gout, &wflip.view(), None, k - 1 - pad);
    debug_assert_eq!(dx.dim(), (n, ic, h, wd));

    // dW / db via the recomputed patch matrix.
    let xp = pad4(x, pad);
    let mut dwmat = Array2::<T>::zeros((oc, ic * k * k));
    let mut db = Array1::<T>::zeros(oc);
    for i in 0..n {
        let cols = im2col(&xp.index_axis(Axis(0), i), k, oh, ow);
        let g = gout.index_axis(Axis(0), i);
        let gmat = g.to_shape((oc, oh * ow)).expect("gradient view is contiguous");
        dwmat = dwmat + gmat.dot(&cols.t());
        for o in 0..oc {
            db[o] = db[o] + gmat.row(o).sum();
        }
    }
    let dw = dwmat.into_shape_with_order((oc, ic, k, k)).expect("shape product matches");
    (dx, dw, db)
}

/// A stride-1 convolution layer with He-initialized kernels and zero biases.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Element> {
    pub w: Array4<T>,
    pub b: Array1<T>,
    pub pad: usize,
    pub dw: Array4<T>,
    pub db: Array1<T>,
    // Adam moments, owned here so the optimizer and checkpoints stay in sync.
    pub mw: Array4<T>,
    pub vw: Array4<T>,
    pub mb: Array1<T>,
    pub vb: Array1<T>,
    cached_x: Option<Array4<T>>,
}

impl<T: Element> Conv2d<T> {
    /// He-normal initialization: `N(0, sqrt(2 / fan_in))`, drawn in `f64` so
    /// `f32` and `f64` instantiations start from the same values up to
    /// rounding. Biases start at zero.
    pub fn new(in_c: usize, out_c: usize, k: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = Array4::from_shape_simple_fn((out_c, in_c, k, k), || {
            T::from_f64(normal.sample(rng))
        });
        Self {
            w,
            b: Array1::zeros(out_c),
            pad,
            dw: Array4::zeros((out_c, in_c, k, k)),
            db: Array1::zeros(out_c),
            mw: Array4::zeros((out_c, in_c, k, k)),
            vw: Array4::zeros((out_c, in_c, k, k)),
            mb: Array1::zeros(out_c),
            vb: Array1::zeros(out_c),
            cached_x: None,
        }
    }

    /// Forward pass; `train` caches the input for [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        if train {
            self.cached_x = Some(x.clone());
        }
        conv2d(&x.view(), &self.w.view(), Some(&self.b), self.pad)
    }

    /// Accumulates `dw`/`db` and returns the input gradient.
    pub fn backward(&mut self, gout: &Array4<T>) -> Array4<T> {
        let x = self.cached_x.take().expect("backward without forward(train=true)");
        let (dx, dw, db) = conv2d_backward(&x.view(), &self.w.view(), &gout.view(), self.pad);
        self.dw = &self.dw + &dw;
        self.db = &self.db + &db;
        dx
    }
}

impl<T: Element> HasParams<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_, T>)) {
        f(ParamTensor {
            name: format!("{prefix}.w"),
            value: self.w.view_mut().into_dyn(),
            grad: self.dw.view_mut().into_dyn(),
            m: self.mw.view_mut().into_dyn(),
            v: self.vw.view_mut().into_dyn(),
        });
        f(ParamTensor {
            name: format!("{prefix}.b"),
            value: self.b.view_mut().into_dyn(),
            grad: self.db.view_mut().into_dyn(),
            m: self.mb.view_mut().into_dyn(),
            v: self.vb.view_mut().into_dyn(),
        });
    }
}
