//! Per-sample binary cross-entropy on logits, in the overflow-safe form
//! `max(z, 0) − z·y + ln(1 + e^{−|z|})`.

use ndarray::{Array1, Array4, Axis};

use crate::Element;

/// Numerically stable logistic function.
pub fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy per sample, plus its logit gradient.
///
/// `logits` and `targets` are `(N, C, H, W)`; targets are {0,1}-valued. The
/// per-sample loss averages over all `C·H·W` elements. The returned gradient
/// is `∂loss_i/∂z` for each sample's own loss — downstream weighting scales
/// each sample slice by its loss weight.
pub fn bce_with_logits<T: Element>(
    logits: &Array4<T>,
    targets: &Array4<T>,
) -> (Array1<T>, Array4<T>) {
    assert_eq!(logits.dim(), targets.dim(), "logits/targets shape mismatch");
    let (n, c, h, w) = logits.dim();
    let denom = T::from_usize(c * h * w);
    let mut grad = Array4::zeros(logits.dim());
    let mut losses = Array1::zeros(n);
    for i in 0..n {
        let z_i = logits.index_axis(Axis(0), i);
        let y_i = targets.index_axis(Axis(0), i);
        let mut g_i = grad.index_axis_mut(Axis(0), i);
        let mut acc = T::zero();
        for ((idx, &z), &y) in z_i.indexed_iter().zip(y_i.iter()) {
            let pos = if z > T::zero() { z } else { T::zero() };
            acc = acc + pos - z * y + (T::one() + (-z.abs()).exp()).ln();
            g_i[idx] = (sigmoid(z) - y) / denom;
        }
        losses[i] = acc / denom;
    }
    (losses, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use rand::Rng;

    #[test]
    fn matches_direct_formula_at_moderate_logits() {
        // −[y ln σ(z) + (1−y) ln(1−σ(z))] computed naively for comparison.
        let mut rng = rng_from_seed(1);
        let logits =
            Array4::from_shape_simple_fn((2, 1, 2, 2), || rng.random_range(-3.0..3.0f64));
        let targets = Array4::from_shape_simple_fn((2, 1, 2, 2), || {
            f64::from(u8::from(rng.random_bool(0.5)))
        });
        let (losses, _) = bce_with_logits(&logits, &targets);
        for i in 0..2 {
            let mut naive = 0.0;
            for (idx, &z) in logits.index_axis(Axis(0), i).indexed_iter() {
                let y = targets.index_axis(Axis(0), i)[idx];
                let p = 1.0 / (1.0 + (-z).exp());
                naive -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
            naive /= 4.0;
            assert!((losses[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Array4::from_elem((1, 1, 2, 2), 500.0f64);
        let targets = Array4::zeros((1, 1, 2, 2));
        let (losses, grad) = bce_with_logits(&logits, &targets);
        assert!(losses[0].is_finite());
        assert!((losses[0] - 500.0).abs() < 1e-9); // max(z,0) − 0 + ~0
        assert!(grad.iter().all(|v| v.is_finite()));
        let neg = logits.mapv(|v| -v);
        let (l2, g2) = bce_with_logits(&neg, &targets);
        assert!(l2[0].abs() < 1e-9);
        assert!(g2.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_check() {
        let mut rng = rng_from_seed(2);
        let logits =
            Array4::from_shape_simple_fn((2, 2, 3, 3), || rng.random_range(-2.0..2.0f64));
        let targets = Array4::from_shape_simple_fn((2, 2, 3, 3), || {
            f64::from(u8::from(rng.random_bool(0.5)))
        });
        let (_, grad) = bce_with_logits(&logits, &targets);
        let eps = 1e-6;
        let mut z = logits.clone();
        for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0), (1, 0, 2, 1)] {
            let orig = z[idx];
            z[idx] = orig + eps;
            let up = bce_with_logits(&z, &targets).0[idx.0];
            z[idx] = orig - eps;
            let dn = bce_with_logits(&z, &targets).0[idx.0];
            z[idx] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - grad[idx]).abs() < 1e-8, "{idx:?}: {num} vs {}", grad[idx]);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
