//! Pointwise and spatial layers: ReLU, 2×2 max-pool, 2× nearest upsample,
//! global average pooling, channel concat/split.

use ndarray::{s, Array2, Array4, Axis};

use crate::Element;

/// ReLU with a cached activation mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Array4<u8>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Element>(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        if train {
            self.mask = Some(x.mapv(|v| u8::from(v > T::zero())));
        }
        x.mapv(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: Element>(&mut self, gout: &Array4<T>) -> Array4<T> {
        let mask = self.mask.take().expect("backward without forward(train=true)");
        let mut g = gout.clone();
        g.zip_mut_with(&mask, |v, &m| {
            if m == 0 {
                *v = T::zero();
            }
        });
        g
    }
}

/// 2×2 max-pooling with stride 2. Ties resolve to the scan-order-first
/// element, so pooling is deterministic.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    /// Winning offset per output cell, encoded as `dy * 2 + dx`.
    argmax: Option<Array4<u8>>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Element>(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even spatial dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::<u8>::zeros((n, c, oh, ow));
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x[(i, ci, 2 * oy, 2 * ox)];
                        let mut code = 0u8;
                        for (idx, (dy, dx)) in
                            [(0usize, 0usize), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let v = x[(i, ci, 2 * oy + dy, 2 * ox + dx)];
                            if v > best {
                                best = v;
                                code = idx as u8;
                            }
                        }
                        out[(i, ci, oy, ox)] = best;
                        arg[(i, ci, oy, ox)] = code;
                    }
                }
            }
        }
        if train {
            self.argmax = Some(arg);
        }
        out
    }

    pub fn backward<T: Element>(&mut self, gout: &Array4<T>) -> Array4<T> {
        let arg = self.argmax.take().expect("backward without forward(train=true)");
        let (n, c, oh, ow) = gout.dim();
        let mut gin = Array4::zeros((n, c, oh * 2, ow * 2));
        for ((i, ci, oy, ox), &g) in gout.indexed_iter() {
            let code = arg[(i, ci, oy, ox)] as usize;
            let (dy, dx) = (code / 2, code % 2);
            gin[(i, ci, 2 * oy + dy, 2 * ox + dx)] = g;
        }
        gin
    }
}

/// 2× nearest-neighbor upsampling; stateless, its backward sums each 2×2
/// block back onto the source cell.
#[derive(Debug, Clone, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<T: Element>(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, h * 2, w * 2), |(i, ci, y, xx)| x[(i, ci, y / 2, xx / 2)])
    }

    pub fn backward<T: Element>(&self, gout: &Array4<T>) -> Array4<T> {
        let (n, c, h2, w2) = gout.dim();
        let mut gin = Array4::zeros((n, c, h2 / 2, w2 / 2));
        for ((i, ci, y, x), &g) in gout.indexed_iter() {
            gin[(i, ci, y / 2, x / 2)] = gin[(i, ci, y / 2, x / 2)] + g;
        }
        gin
    }
}

/// Mean over the two spatial axes: `(N, C, H, W) → (N, C)`.
pub fn global_avg_pool<T: Element>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let denom = T::from_usize(h * w);
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            out[(i, ci)] = x.slice(s![i, ci, .., ..]).sum() / denom;
        }
    }
    out
}

/// Backward of [`global_avg_pool`], broadcasting `g / (H·W)` over space.
pub fn global_avg_pool_backward<T: Element>(
    g: &Array2<T>,
    spatial: (usize, usize),
) -> Array4<T> {
    let (n, c) = g.dim();
    let (h, w) = spatial;
    let denom = T::from_usize(h * w);
    Array4::from_shape_fn((n, c, h, w), |(i, ci, _, _)| g[(i, ci)] / denom)
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels<T: Element>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching non-channel dims")
}

/// Splits a channel-concatenated gradient back into `(first c_a, rest)`.
pub fn split_channels<T: Element>(g: &Array4<T>, c_a: usize) -> (Array4<T>, Array4<T>) {
    let a = g.slice(s![.., ..c_a, .., ..]).to_owned();
    let b = g.slice(s![.., c_a.., .., ..]).to_owned();
    (a, b)
}
