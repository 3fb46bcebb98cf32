//! The math core: per-sample loss re-weighting.
//!
//! A raw quality score `t_i` per batch sample is (optionally) squashed by the
//! overfitting control Φ(t) = λ·tanh(t), then batch-softmaxed into weights
//! on the probability simplex; the scalar training loss is the weighted sum
//! of the per-sample losses,
//!
//! ```text
//! Loss = Σ_i w_i · L_i,   Σ_i w_i = 1,   0 ≤ w_i ≤ 1.
//! ```
//!
//! The squash bounds the ratio of any two weights in a mini-batch by e^{2λ},
//! which is what keeps one confident sample from monopolizing the batch; the
//! ratio is checkable via [`max_weight_ratio`]. Gradients w.r.t. the raw
//! scores are analytic ([`loss_grad_wrt_scores`]), so the quality network
//! can be trained without an autodiff tape.

use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::elem::Dtype;
use crate::error::{CoreError, Result};
use crate::Element;

/// Squashing hyperparameter λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcmConfig {
    pub lambda: f64,
}

impl Default for OcmConfig {
    fn default() -> Self {
        Self { lambda: 2.0 }
    }
}

impl OcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Loss-weighting strategy, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform weights; plain mean loss.
    Baseline,
    /// Softmax of raw scores.
    Qam,
    /// Softmax of squashed scores.
    QamOcm,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::Qam, Strategy::QamOcm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Qam => "qam",
            Strategy::QamOcm => "qam_ocm",
        }
    }

    /// Whether this strategy trains a quality network at all.
    pub fn uses_qam(&self) -> bool {
        !matches!(self, Strategy::Baseline)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "qam" => Ok(Strategy::Qam),
            "qam_ocm" => Ok(Strategy::QamOcm),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown strategy {other:?} (expected baseline, qam or qam_ocm)"
            ))),
        }
    }
}

/// Raw quality scores `t`, one finite real per batch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores<T: Element>(pub Array1<T>);

impl<T: Element> RawScores<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::InvalidArgument("scores for an empty batch".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidArgument("non-finite quality score".into()));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-sample segmentation losses `L_i`: nonnegative, finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleLosses<T: Element>(pub Array1<T>);

impl<T: Element> PerSampleLosses<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::InvalidArgument("losses for an empty batch".into()));
        }
        if !values.iter().all(|v| v.is_finite() && *v >= T::zero()) {
            return Err(CoreError::InvalidArgument(
                "per-sample losses must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(values))
    }
}

/// Batch weights Θ on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights<T: Element>(pub Array1<T>);

/// Simplex tolerance: 1e-6 under 32-bit training, 1e-12 in 64-bit test mode.
pub fn simplex_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-6,
        Dtype::F64 => 1e-12,
    }
}

impl<T: Element> BatchWeights<T> {
    /// Checks the Eq.-1 constraint set at the width-appropriate tolerance.
    pub fn validate(&self) -> Result<()> {
        let tol = simplex_tolerance(T::DTYPE);
        let mut sum = 0.0f64;
        for &w in self.0.iter() {
            let w = Element::to_f64(w);
            if !(w.is_finite() && (-tol..=1.0 + tol).contains(&w)) {
                return Err(CoreError::InvalidArgument(format!(
                    "weight {w} outside [0, 1]"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > tol {
            return Err(CoreError::InvalidArgument(format!(
                "weights sum to {sum}, expected 1 ± {tol}"
            )));
        }
        Ok(())
    }
}

/// Φ(t) = λ·tanh(t): odd, strictly increasing, range (−λ, λ).
pub fn ocm_squash<T: Element>(t: T, cfg: &OcmConfig) -> T {
    T::from_f64(cfg.lambda) * t.tanh()
}

/// Φ'(t) = λ·(1 − tanh²(t)).
pub fn ocm_squash_deriv<T: Element>(t: T, cfg: &OcmConfig) -> T {
    let th = t.tanh();
    T::from_f64(cfg.lambda) * (T::one() - th * th)
}

/// Overflow-safe softmax over the batch (max-subtraction).
pub fn batch_softmax<T: Element>(scores: &RawScores<T>) -> BatchWeights<T> {
    let max = scores.0.iter().copied().fold(T::neg_infinity(), T::max);
    let exps = scores.0.mapv(|s| (s - max).exp());
    let sum = exps.sum();
    BatchWeights(exps.mapv(|e| e / sum))
}

/// Weights per strategy: uniform, softmax of raw scores, or softmax of
/// squashed scores.
pub fn compute_weights<T: Element>(
    scores: &RawScores<T>,
    strategy: Strategy,
    cfg: &OcmConfig,
) -> Result<BatchWeights<T>> {
    cfg.validate()?;
    let w = match strategy {
        Strategy::Baseline => {
            let b = scores.len();
            BatchWeights(Array1::from_elem(b, T::from_usize(1) / T::from_usize(b)))
        }
        Strategy::Qam => batch_softmax(scores),
        Strategy::QamOcm => {
            let squashed = RawScores(scores.0.mapv(|t| ocm_squash(t, cfg)));
            batch_softmax(&squashed)
        }
    };
    w.validate()?;
    Ok(w)
}

/// Eq. 1: Loss = Σ_i w_i·L_i. Nonnegative; differentiable in both factors.
pub fn combine_loss<T: Element>(w: &BatchWeights<T>, l: &PerSampleLosses<T>) -> Result<T> {
    if w.0.len() != l.0.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} weights vs {} losses",
            w.0.len(),
            l.0.len()
        )));
    }
    Ok(w.0.dot(&l.0))
}

/// max_i w_i / min_i w_i, the quantity the squash bounds by e^{2λ}.
pub fn max_weight_ratio<T: Element>(w: &BatchWeights<T>) -> Result<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in w.0.iter() {
        let v = Element::to_f64(v);
        min = min.min(v);
        max = max.max(v);
    }
    if min <= 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "weight ratio undefined: minimum weight {min} is not positive"
        )));
    }
    Ok(max / min)
}

/// Analytic gradient of the scalar loss w.r.t. the raw scores:
///
/// ```text
/// ∂Loss/∂t_j = Φ'(t_j) · w_j · (L_j − Σ_i w_i·L_i)
/// ```
///
/// with Φ' ≡ 1 for the plain `qam` strategy and 0 for `baseline` (weights do
/// not depend on scores there).
pub fn loss_grad_wrt_scores<T: Element>(
    scores: &RawScores<T>,
    losses: &PerSampleLosses<T>,
    strategy: Strategy,
    cfg: &OcmConfig,
) -> Result<Array1<T>> {
    if scores.len() != losses.0.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} scores vs {} losses",
            scores.len(),
            losses.0.len()
        )));
    }
    if strategy == Strategy::Baseline {
        return Ok(Array1::zeros(scores.len()));
    }
    let w = compute_weights(scores, strategy, cfg)?;
    let mean = combine_loss(&w, losses)?;
    let grad = ndarray::Zip::from(&scores.0)
        .and(&w.0)
        .and(&losses.0)
        .map_collect(|&t, &wj, &lj| {
            let phi = match strategy {
                Strategy::QamOcm => ocm_squash_deriv(t, cfg),
                _ => T::one(),
            };
            phi * wj * (lj - mean)
        });
    Ok(grad)
}
