//! Quality awareness module: a VGG-style convolutional stack that maps an
//! (image, label-channels) concatenation to one raw quality score per sample.
//!
//! Each block is two 3×3 conv + ReLU followed by a 2× max-pool; after the
//! last block a 1×1 convolution reduces to a single channel and global
//! average pooling yields the scalar. The module only ever sees ground-truth
//! or corrupted labels — never the segmentation module's predictions — so the
//! two gradient paths stay independent.

use ndarray::{Array1, Array2, Array4};

use crate::error::{CoreError, Result};
use crate::nn::{concat_channels, global_avg_pool, global_avg_pool_backward, Conv2d, MaxPool2, Relu};
use crate::nn::{HasParams, ParamTensor};
use crate::util::rng_from_seed;
use crate::Element;

use super::QamConfig;

#[derive(Debug, Clone)]
struct QamBlock<T: Element> {
    c1: Conv2d<T>,
    r1: Relu,
    c2: Conv2d<T>,
    r2: Relu,
    pool: MaxPool2,
}

impl<T: Element> QamBlock<T> {
    fn new(in_c: usize, out_c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(in_c, out_c, 3, 1, rng),
            r1: Relu::new(),
            c2: Conv2d::new(out_c, out_c, 3, 1, rng),
            r2: Relu::new(),
            pool: MaxPool2::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let h = self.r1.forward(&self.c1.forward(x, train), train);
        let h = self.r2.forward(&self.c2.forward(&h, train), train);
        self.pool.forward(&h, train)
    }

    fn backward(&mut self, g: &Array4<T>) -> Array4<T> {
        let g = self.pool.backward(g);
        let g = self.c2.backward(&self.r2.backward(&g));
        self.c1.backward(&self.r1.backward(&g))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_, T>)) {
        self.c1.visit_params(&format!("{prefix}.conv1"), f);
        self.c2.visit_params(&format!("{prefix}.conv2"), f);
    }
}

/// The quality awareness network.
#[derive(Debug, Clone)]
pub struct Qam<T: Element> {
    pub cfg: QamConfig,
    pub seed: u64,
    blocks: Vec<QamBlock<T>>,
    head: Conv2d<T>,
    /// Spatial size entering global average pooling, cached for backward.
    gap_spatial: Option<(usize, usize)>,
}

impl<T: Element> Qam<T> {
    pub fn new(cfg: QamConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut blocks = Vec::with_capacity(cfg.block_widths.len());
        let mut in_c = cfg.in_channels;
        for &w in &cfg.block_widths {
            blocks.push(QamBlock::new(in_c, w, &mut rng));
            in_c = w;
        }
        let mut head = Conv2d::new(in_c, 1, 1, 0, &mut rng);
        // Zero-initialized score head: every sample starts at exactly t = 0,
        // so the first re-weighting step is uniform and early score movement
        // is driven by per-sample loss differences instead of a random offset.
        // A nonzero offset at init can push the whole batch into the tanh
        // saturation zone before the loss gap between clean and corrupted
        // labels becomes visible, freezing the weights at uniform for good.
        head.w.fill(T::zero());
        Ok(Self { cfg, seed, blocks, head, gap_spatial: None })
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "QAM expects {} input channels (image + labels), got {c}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.blocks.len();
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "spatial size {h}x{w} incompatible with {} pooling stages",
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Raw quality scores `t`, one per sample, from a pre-concatenated
    /// `(N, in_channels, H, W)` input.
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array1<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        let z = self.head.forward(&h, train); // (N, 1, h', w')
        let (_, _, sh, sw) = z.dim();
        if train {
            self.gap_spatial = Some((sh, sw));
        }
        Ok(global_avg_pool(&z).column(0).to_owned())
    }

    /// Convenience wrapper: concatenates image and label channels, then runs
    /// [`Self::forward`].
    pub fn forward_pair(
        &mut self,
        images: &Array4<T>,
        labels: &Array4<T>,
        train: bool,
    ) -> Result<Array1<T>> {
        self.forward(&concat_channels(images, labels), train)
    }

    /// Backpropagates per-sample score gradients; returns the input gradient.
    pub fn backward(&mut self, dscores: &Array1<T>) -> Array4<T> {
        let (sh, sw) = self.gap_spatial.take().expect("backward without forward(train=true)");
        let n = dscores.len();
        let mut g2 = Array2::zeros((n, 1));
        g2.column_mut(0).assign(dscores);
        let mut g = global_avg_pool_backward(&g2, (sh, sw));
        g = self.head.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("qam", &mut |pt| n += pt.value.len());
        n
    }
}

impl<T: Element> HasParams<T> for Qam<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_, T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}
