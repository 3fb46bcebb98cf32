//! Encoder–decoder segmentation network.
//!
//! `depth` encoder levels of two 3×3 conv + ReLU each, 2× max-pool between
//! levels, width doubling per level; a mirrored decoder with 2× nearest
//! upsampling and skip concatenation; a final 1×1 conv to per-class logits.
//! Sigmoid of a logit map is the per-class foreground probability
//! (multi-label: class channels may overlap).

use ndarray::Array4;

use crate::error::{CoreError, Result};
use crate::nn::{concat_channels, split_channels, Conv2d, MaxPool2, Relu, Upsample2};
use crate::nn::{HasParams, ParamTensor};
use crate::util::rng_from_seed;
use crate::Element;

use super::SegNetConfig;

/// Two 3×3 same-padding convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
struct DoubleConv<T: Element> {
    c1: Conv2d<T>,
    r1: Relu,
    c2: Conv2d<T>,
    r2: Relu,
}

impl<T: Element> DoubleConv<T> {
    fn new(in_c: usize, out_c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(in_c, out_c, 3, 1, rng),
            r1: Relu::new(),
            c2: Conv2d::new(out_c, out_c, 3, 1, rng),
            r2: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let h = self.r1.forward(&self.c1.forward(x, train), train);
        self.r2.forward(&self.c2.forward(&h, train), train)
    }

    fn backward(&mut self, g: &Array4<T>) -> Array4<T> {
        let g = self.c2.backward(&self.r2.backward(g));
        self.c1.backward(&self.r1.backward(&g))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_, T>)) {
        self.c1.visit_params(&format!("{prefix}.conv1"), f);
        self.c2.visit_params(&format!("{prefix}.conv2"), f);
    }
}

/// The segmentation module. Holds parameters, Adam moments and (during a
/// training step) the activation caches for backward.
#[derive(Debug, Clone)]
pub struct SegNet<T: Element> {
    pub cfg: SegNetConfig,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    enc: Vec<DoubleConv<T>>,
    pools: Vec<MaxPool2>,
    ups: Vec<Upsample2>,
    dec: Vec<DoubleConv<T>>,
    head: Conv2d<T>,
}

impl<T: Element> SegNet<T> {
    /// Builds and deterministically initializes the network.
    pub fn new(cfg: SegNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let depth = cfg.depth;
        let enc = (0..depth)
            .map(|i| {
                let in_c = if i == 0 { cfg.in_channels } else { cfg.width(i - 1) };
                DoubleConv::new(in_c, cfg.width(i), &mut rng)
            })
            .collect();
        let dec = (0..depth - 1)
            .map(|i| DoubleConv::new(cfg.width(i + 1) + cfg.width(i), cfg.width(i), &mut rng))
            .collect();
        let head = Conv2d::new(cfg.base_width, cfg.n_classes, 1, 0, &mut rng);
        Ok(Self {
            cfg,
            seed,
            enc,
            pools: (0..depth - 1).map(|_| MaxPool2::new()).collect(),
            ups: (0..depth - 1).map(|_| Upsample2).collect(),
            dec,
            head,
        })
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "segnet expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << (self.cfg.depth - 1);
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "spatial size {h}x{w} not divisible by 2^(depth−1) = {div}"
            )));
        }
        Ok(())
    }

    /// Forward pass to per-class logit maps `(N, n_classes, H, W)`.
    /// `train` caches activations for [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut skips: Vec<Array4<T>> = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for i in 0..depth {
            if i > 0 {
                h = self.pools[i - 1].forward(&h, train);
            }
            h = self.enc[i].forward(&h, train);
            if i < depth - 1 {
                skips.push(h.clone());
            }
        }
        for i in (0..depth - 1).rev() {
            let up = self.ups[i].forward(&h);
            let cat = concat_channels(&up, &skips[i]);
            h = self.dec[i].forward(&cat, train);
        }
        Ok(self.head.forward(&h, train))
    }

    /// Backpropagates a logit gradient, accumulating parameter gradients.
    /// Returns the input gradient.
    pub fn backward(&mut self, dlogits: &Array4<T>) -> Array4<T> {
        let depth = self.cfg.depth;
        let mut g = self.head.backward(dlogits);
        let mut skip_g: Vec<Option<Array4<T>>> = vec![None; depth - 1];
        for i in 0..depth - 1 {
            let gcat = self.dec[i].backward(&g);
            let (gu, gs) = split_channels(&gcat, self.cfg.width(i + 1));
            skip_g[i] = Some(gs);
            g = self.ups[i].backward(&gu);
        }
        for i in (0..depth).rev() {
            if i < depth - 1 {
                g = g + skip_g[i].take().expect("one skip gradient per level");
            }
            g = self.enc[i].backward(&g);
            if i > 0 {
                g = self.pools[i - 1].backward(&g);
            }
        }
        g
    }

    /// Number of scalar parameters.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("segnet", &mut |pt| n += pt.value.len());
        n
    }
}

impl<T: Element> HasParams<T> for SegNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_, T>)) {
        for (i, blk) in self.enc.iter_mut().enumerate() {
            blk.visit(&format!("{prefix}.enc{i}"), f);
        }
        for (i, blk) in self.dec.iter_mut().enumerate() {
            blk.visit(&format!("{prefix}.dec{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}
