//! Parameter traversal and the Adam optimizer.
//!
//! Models expose all trainable tensors through [`HasParams`], a visitor that
//! hands out name-tagged views of each parameter together with its gradient
//! accumulator and Adam moments. The optimizer, gradient bookkeeping and
//! checkpoint serialization all share this single traversal, so they cannot
//! drift apart.

use ndarray::{ArrayViewMutD, Zip};

use crate::Element;

/// One trainable tensor: value, gradient accumulator and Adam moments.
pub struct ParamTensor<'a, T: Element> {
    pub name: String,
    pub value: ArrayViewMutD<'a, T>,
    pub grad: ArrayViewMutD<'a, T>,
    pub m: ArrayViewMutD<'a, T>,
    pub v: ArrayViewMutD<'a, T>,
}

/// Deterministic traversal over every trainable tensor of a model. Traversal
/// order is fixed by construction (layer declaration order), which keeps
/// optimizer updates and checkpoints reproducible.
pub trait HasParams<T: Element> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_, T>));
}

/// Adam with the standard bias-corrected moments.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count (the `t` in the bias correction).
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Applies one update from the accumulated gradients, then advances `t`.
    /// Gradients are left untouched; call [`zero_grads`] before the next
    /// accumulation.
    pub fn step<T: Element>(&mut self, model: &mut dyn HasParams<T>) {
        self.t += 1;
        let c1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let c2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        model.visit_params("", &mut |pt: ParamTensor<'_, T>| {
            let ParamTensor { value, grad, m, v, .. } = pt;
            Zip::from(value).and(m).and(v).and(&grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let mhat = *m * c1;
                let vhat = *v * c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        });
    }
}

/// Clears every gradient accumulator.
pub fn zero_grads<T: Element>(model: &mut dyn HasParams<T>) {
    model.visit_params("", &mut |mut pt: ParamTensor<'_, T>| {
        pt.grad.fill(T::zero());
    });
}

/// Euclidean norm of the full gradient vector, in `f64` (used for divergence
/// detection regardless of the training width).
pub fn grad_norm<T: Element>(model: &mut dyn HasParams<T>) -> f64 {
    let mut acc = 0.0f64;
    model.visit_params("", &mut |pt: ParamTensor<'_, T>| {
        acc += pt.grad.iter().map(|&g| Element::to_f64(g).powi(2)).sum::<f64>();
    });
    acc.sqrt()
}
