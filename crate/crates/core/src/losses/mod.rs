//! Segmentation and adaptation losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! each real-valued input array, so the trainer can backpropagate through the
//! networks without an autodiff tape. [`reference`] holds deliberately naive
//! nested-loop versions of the same formulas for cross-checking.
//!
//! Conventions:
//! - score maps and probability maps are clamped to
//!   `[SCORE_FLOOR, 1 - SCORE_FLOOR]` before any logarithm; the clamp has zero
//!   derivative outside that range;
//! - domain label 0 means source, 1 means target;
//! - presence weights used to gate per-class terms are constants.

pub mod reference;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{self, LabelMap, PatchClassLabel, ProbMap, IGNORE};

pub const SCORE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no labeled pixels in the batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("loss report is missing term `{0}`")]
    MissingTerm(Term),
    #[error("term `{term}` is {actual} but its composition gives {expected}")]
    Composition { term: Term, actual: f64, expected: f64 },
    #[error(transparent)]
    Label(#[from] labels::LabelError),
}

/// Domain label of a sample, as seen by the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Source => 0.0,
            DomainLabel::Target => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DomainLabel::Source => DomainLabel::Target,
            DomainLabel::Target => DomainLabel::Source,
        }
    }
}

/// Loss weights and the division guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.0003,
            lambda_t: 0.0003,
            lambda_c: 0.001,
            lambda_n: 1.0,
            alpha: 0.7,
            beta: 0.5,
            epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(LossError::InvalidWeights(format!("{name}={v} must lie in [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        if !(self.epsilon > 0.0) {
            return Err(LossError::InvalidWeights(format!("epsilon={} must be positive", self.epsilon)));
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_t", self.lambda_t),
            ("lambda_c", self.lambda_c),
            ("lambda_n", self.lambda_n),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeights(format!("{name}={v} must be non-negative")));
            }
        }
        Ok(())
    }
}

pub(crate) fn clamp_score(u: f64) -> (f64, bool) {
    if u < SCORE_FLOOR {
        (SCORE_FLOOR, false)
    } else if u > 1.0 - SCORE_FLOOR {
        (1.0 - SCORE_FLOOR, false)
    } else {
        (u, true)
    }
}

/// Binary cross-entropy of a score against a 0/1 target, and its derivative
/// with respect to the (unclamped) score.
pub fn bce_with_grad(u: f64, target: f64) -> (f64, f64) {
    let (c, inside) = clamp_score(u);
    let value = -(target * c.ln() + (1.0 - target) * (1.0 - c).ln());
    let grad = if inside { -target / c + (1.0 - target) / (1.0 - c) } else { 0.0 };
    (value, grad)
}

/// `-ln(clamp(p))` and its derivative.
fn neg_log_with_grad(p: f64) -> (f64, f64) {
    let (c, inside) = clamp_score(p);
    (-c.ln(), if inside { -1.0 / c } else { 0.0 })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_scores<'a>(scores: impl IntoIterator<Item = &'a f64>) -> Result<(), LossError> {
    for &u in scores {
        if !(0.0..=1.0).contains(&u) {
            return Err(LossError::ScoreOutOfRange(u));
        }
    }
    Ok(())
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::Shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// Mean pixel cross-entropy over labeled pixels, with gradient w.r.t. `probs`.
pub fn seg_cross_entropy_with_grad(probs: ArrayView3<f64>, truth: &LabelMap) -> Result<(f64, Array3<f64>), LossError> {
    let (c, h, w) = probs.dim();
    same_shape(&[c, h, w], &[truth.num_classes(), truth.height(), truth.width()], "probs vs labels")?;
    let count = truth.labeled_pixels();
    if count == 0 {
        return Err(LossError::EmptyBatch);
    }
    let scale = 1.0 / count as f64;
    let mut grad = Array3::zeros((c, h, w));
    let mut total = 0.0;
    for ((y, x), &label) in truth.data().indexed_iter() {
        if label == IGNORE {
            continue;
        }
        let k = label as usize;
        let (v, g) = neg_log_with_grad(probs[[k, y, x]]);
        total += v;
        grad[[k, y, x]] = g * scale;
    }
    Ok((total * scale, grad))
}

pub fn seg_cross_entropy(probs: ArrayView3<f64>, truth: &LabelMap) -> Result<f64, LossError> {
    seg_cross_entropy_with_grad(probs, truth).map(|(v, _)| v)
}

/// Class-averaged soft dice loss and its gradient w.r.t. `probs`.
///
/// `1 - (1/C) Σ_c 2 Σ Y·P / (Σ (Y + P) + eps)`; a class absent from both `Y`
/// and `P` contributes a zero overlap term.
pub fn dice_loss_with_grad(
    probs: ArrayView3<f64>,
    truth_onehot: ArrayView3<f64>,
    eps: f64,
) -> Result<(f64, Array3<f64>), LossError> {
    same_shape(probs.shape(), truth_onehot.shape(), "probs vs one-hot")?;
    if !(eps > 0.0) {
        return Err(LossError::InvalidWeights(format!("epsilon={eps} must be positive")));
    }
    let num_classes = probs.shape()[0];
    let inv_c = 1.0 / num_classes as f64;
    let mut grad = Array3::zeros(probs.raw_dim());
    let mut overlap_mean = 0.0;
    for ((p, y), mut g) in probs
        .outer_iter()
        .zip(truth_onehot.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let inter: f64 = Zip::from(&p).and(&y).fold(0.0, |acc, &p, &y| acc + p * y);
        let denom = p.sum() + y.sum() + eps;
        overlap_mean += inv_c * 2.0 * inter / denom;
        let d2 = denom * denom;
        Zip::from(&mut g).and(&y).for_each(|g, &y| {
            *g = -inv_c * 2.0 * (y * denom - inter) / d2;
        });
    }
    Ok((1.0 - overlap_mean, grad))
}

pub fn dice_loss(probs: ArrayView3<f64>, truth_onehot: ArrayView3<f64>, eps: f64) -> Result<f64, LossError> {
    dice_loss_with_grad(probs, truth_onehot, eps).map(|(v, _)| v)
}

/// `α·seg_ce + (1 − α)·dice`.
pub fn blend_pred(seg_ce: f64, dice: f64, alpha: f64) -> f64 {
    alpha * seg_ce + (1.0 - alpha) * dice
}

/// Gradients of one objective with respect to the source and target maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub source: Array2<f64>,
    pub target: Array2<f64>,
}

impl PairGrad {
    fn zeros(source: (usize, usize), target: (usize, usize)) -> Self {
        Self {
            source: Array2::zeros(source),
            target: Array2::zeros(target),
        }
    }

    fn blend(a: &PairGrad, wa: f64, b: &PairGrad, wb: f64) -> PairGrad {
        PairGrad {
            source: &a.source * wa + &b.source * wb,
            target: &a.target * wa + &b.target * wb,
        }
    }
}

/// Mean BCE of a score map against a constant domain label, with gradient.
fn mean_bce(map: ArrayView2<f64>, label: DomainLabel) -> (f64, Array2<f64>) {
    let n = map.len() as f64;
    let t = label.value();
    let mut grad = Array2::zeros(map.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(&map).for_each(|g, &u| {
        let (v, d) = bce_with_grad(u, t);
        total += v;
        *g = d / n;
    });
    (total / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicDomainLosses {
    pub d1: f64,
    pub adv1: f64,
    pub d1_grad: PairGrad,
    pub adv1_grad: PairGrad,
}

/// Pixel-level domain losses of the plain adversarial setup.
///
/// `d1 = λ_s·BCE(map_s, 0) + λ_t·BCE(map_t, 1)`; `adv1` swaps the labels.
pub fn basic_domain_losses(
    map_s: ArrayView2<f64>,
    map_t: ArrayView2<f64>,
    weights: &LossWeights,
) -> Result<BasicDomainLosses, LossError> {
    check_scores(map_s.iter())?;
    check_scores(map_t.iter())?;
    let (s0, gs0) = mean_bce(map_s, DomainLabel::Source);
    let (s1, gs1) = mean_bce(map_s, DomainLabel::Target);
    let (t0, gt0) = mean_bce(map_t, DomainLabel::Source);
    let (t1, gt1) = mean_bce(map_t, DomainLabel::Target);
    let (ls, lt) = (weights.lambda_s, weights.lambda_t);
    Ok(BasicDomainLosses {
        d1: ls * s0 + lt * t1,
        adv1: ls * s1 + lt * t0,
        d1_grad: PairGrad {
            source: gs0 * ls,
            target: gt1 * lt,
        },
        adv1_grad: PairGrad {
            source: gs1 * ls,
            target: gt0 * lt,
        },
    })
}

/// Class-averaged, pixel-masked BCE of a fine score map:
/// `(1/C) Σ_c Σ Y_c·BCE(U, l) / (Σ Y_c + eps)`.
pub fn fine_cbce_source(
    scores: ArrayView2<f64>,
    truth_onehot: ArrayView3<f64>,
    label: DomainLabel,
    eps: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    let (c, h, w) = truth_onehot.dim();
    same_shape(&[h, w], scores.shape(), "one-hot vs score map")?;
    check_scores(scores.iter())?;
    let t = label.value();
    let per_pixel: Vec<(f64, f64)> = scores.iter().map(|&u| bce_with_grad(u, t)).collect();
    let inv_c = 1.0 / c as f64;
    let mut value = 0.0;
    // Σ_c Y_c(h,w) / (n_c + eps), accumulated per pixel for the gradient.
    let mut pixel_weight = Array2::<f64>::zeros((h, w));
    for plane in truth_onehot.outer_iter() {
        let n_c = plane.sum();
        let norm = 1.0 / (n_c + eps);
        let mut masked = 0.0;
        for ((&y, pw), (v, _)) in plane.iter().zip(pixel_weight.iter_mut()).zip(&per_pixel) {
            masked += y * v;
            *pw += y * norm;
        }
        value += inv_c * masked * norm;
    }
    let mut grad = pixel_weight;
    for (g, (_, d)) in grad.iter_mut().zip(&per_pixel) {
        *g *= inv_c * d;
    }
    Ok((value, grad))
}

/// Target-side fine loss: the class-averaged term on pseudo-labels plus
/// `λ_n` times the mean BCE over low-confidence pixels.
pub fn fine_cbce_target(
    scores: ArrayView2<f64>,
    pseudo_onehot: ArrayView3<f64>,
    uncertain: ArrayView2<f64>,
    label: DomainLabel,
    lambda_n: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    same_shape(scores.shape(), uncertain.shape(), "score map vs mask")?;
    let (class_term, mut grad) = fine_cbce_source(scores, pseudo_onehot, label, eps)?;
    let t = label.value();
    let norm = 1.0 / (uncertain.sum() + eps);
    let mut masked = 0.0;
    Zip::from(&mut grad).and(&scores).and(&uncertain).for_each(|g, &u, &m| {
        let (v, d) = bce_with_grad(u, t);
        masked += m * v;
        *g += lambda_n * m * norm * d;
    });
    Ok((class_term + lambda_n * masked * norm, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineLosses {
    pub d1: f64,
    pub adv1: f64,
    pub d2: f64,
    pub adv2: f64,
    pub d_fine: f64,
    pub adv_fine: f64,
    /// Gradient of `d_fine`.
    pub d_grad: PairGrad,
    /// Gradient of `adv_fine`.
    pub adv_grad: PairGrad,
}

/// Fine-scale discriminator and adversarial losses on upsampled score maps.
///
/// Pseudo-labels and the uncertainty mask are derived from `probs_t`. With
/// `class_conditional == false` the class-conditional terms are not evaluated
/// and reported as zero.
pub fn fine_losses(
    u_s: ArrayView2<f64>,
    u_t: ArrayView2<f64>,
    truth_onehot: ArrayView3<f64>,
    probs_t: &ProbMap,
    weights: &LossWeights,
    th_n: f64,
    class_conditional: bool,
) -> Result<FineLosses, LossError> {
    let basic = basic_domain_losses(u_s, u_t, weights)?;
    let beta = weights.beta;
    if !class_conditional {
        let zeros = PairGrad::zeros(u_s.dim(), u_t.dim());
        return Ok(FineLosses {
            d1: basic.d1,
            adv1: basic.adv1,
            d2: 0.0,
            adv2: 0.0,
            d_fine: beta * basic.d1,
            adv_fine: beta * basic.adv1,
            d_grad: PairGrad::blend(&basic.d1_grad, beta, &zeros, 0.0),
            adv_grad: PairGrad::blend(&basic.adv1_grad, beta, &zeros, 0.0),
        });
    }
    same_shape(
        &[probs_t.height(), probs_t.width()],
        u_t.shape(),
        "target probabilities vs score map",
    )?;
    let pseudo = labels::pseudo_labels(probs_t).one_hot();
    let uncertain = labels::uncertainty_mask(probs_t, th_n)?.as_weights();
    let (ls, lt, ln, eps) = (weights.lambda_s, weights.lambda_t, weights.lambda_n, weights.epsilon);

    let (s0, gs0) = fine_cbce_source(u_s, truth_onehot, DomainLabel::Source, eps)?;
    let (s1, gs1) = fine_cbce_source(u_s, truth_onehot, DomainLabel::Target, eps)?;
    let (t1, gt1) = fine_cbce_target(u_t, pseudo.view(), uncertain.view(), DomainLabel::Target, ln, eps)?;
    let (t0, gt0) = fine_cbce_target(u_t, pseudo.view(), uncertain.view(), DomainLabel::Source, ln, eps)?;

    let d2 = ls * s0 + lt * t1;
    let adv2 = ls * s1 + lt * t0;
    let d2_grad = PairGrad {
        source: gs0 * ls,
        target: gt1 * lt,
    };
    let adv2_grad = PairGrad {
        source: gs1 * ls,
        target: gt0 * lt,
    };
    Ok(FineLosses {
        d1: basic.d1,
        adv1: basic.adv1,
        d2,
        adv2,
        d_fine: beta * basic.d1 + (1.0 - beta) * d2,
        adv_fine: beta * basic.adv1 + (1.0 - beta) * adv2,
        d_grad: PairGrad::blend(&basic.d1_grad, beta, &d2_grad, 1.0 - beta),
        adv_grad: PairGrad::blend(&basic.adv1_grad, beta, &adv2_grad, 1.0 - beta),
    })
}

/// Raw coarse-branch scores for one source and one target image, each
/// `C × rows × cols`. `os_*` are the first `C` output channels, `ot_*` the last `C`.
#[derive(Debug, Clone, Copy)]
pub struct CoarseScores<'a> {
    pub os_src: ArrayView3<'a, f64>,
    pub ot_src: ArrayView3<'a, f64>,
    pub os_tgt: ArrayView3<'a, f64>,
    pub ot_tgt: ArrayView3<'a, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrad {
    pub os_src: Array3<f64>,
    pub ot_src: Array3<f64>,
    pub os_tgt: Array3<f64>,
    pub ot_tgt: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLosses {
    pub d_coarse: f64,
    pub adv_coarse: f64,
    /// The shared non-adversarial presence classification term (already weighted by `λ_c`).
    pub classification: f64,
    /// `σ(O^s + O^t)` per class and patch, source image.
    pub presence_src: Array3<f64>,
    /// `σ(O^s + O^t)` per class and patch, target image.
    pub presence_tgt: Array3<f64>,
    /// Per-class two-way softmax of `[O^s, O^t]`, `C × rows × cols × 2`, source image.
    pub domain_prob_src: Array4<f64>,
    pub domain_prob_tgt: Array4<f64>,
    pub d_grad: CoarseGrad,
    pub adv_grad: CoarseGrad,
}

/// Coarse-branch losses with the target presence weights taken from the
/// detached `σ(O^s + O^t)` of the target image.
pub fn coarse_losses(
    scores: CoarseScores<'_>,
    w_src: &PatchClassLabel,
    w_tgt: &PatchClassLabel,
    weights: &LossWeights,
) -> Result<CoarseLosses, LossError> {
    let target_weights = presence_scores(scores.os_tgt, scores.ot_tgt);
    coarse_losses_with_target_weights(scores, w_src, w_tgt, target_weights.view(), weights)
}

fn presence_scores(os: ArrayView3<f64>, ot: ArrayView3<f64>) -> Array3<f64> {
    let mut out = Array3::zeros(os.raw_dim());
    Zip::from(&mut out).and(&os).and(&ot).for_each(|o, &a, &b| *o = sigmoid(a + b));
    out
}

/// Per-patch accumulation for one image of the coarse branch.
struct CoarseSide {
    presence: Array3<f64>,
    domain_prob: Array4<f64>,
    /// Σ of BCE(presence, W) over classes and patches.
    cls_sum: f64,
    cls_grad_s: Array3<f64>,
    cls_grad_t: Array3<f64>,
    /// Σ_patches Σ_c gate·CE(row, label) for both labels; index by `DomainLabel::value`.
    adv_sum: [f64; 2],
    adv_grad_s: [Array3<f64>; 2],
    adv_grad_t: [Array3<f64>; 2],
}

fn coarse_side(
    os: ArrayView3<f64>,
    ot: ArrayView3<f64>,
    presence_label: &PatchClassLabel,
    gate: ArrayView3<f64>,
) -> CoarseSide {
    let (c, rows, cols) = os.dim();
    let mut side = CoarseSide {
        presence: Array3::zeros((c, rows, cols)),
        domain_prob: Array4::zeros((c, rows, cols, 2)),
        cls_sum: 0.0,
        cls_grad_s: Array3::zeros((c, rows, cols)),
        cls_grad_t: Array3::zeros((c, rows, cols)),
        adv_sum: [0.0; 2],
        adv_grad_s: [Array3::zeros((c, rows, cols)), Array3::zeros((c, rows, cols))],
        adv_grad_t: [Array3::zeros((c, rows, cols)), Array3::zeros((c, rows, cols))],
    };
    for k in 0..c {
        for r in 0..rows {
            for q in 0..cols {
                let (a, b) = (os[[k, r, q]], ot[[k, r, q]]);
                let u = sigmoid(a + b);
                side.presence[[k, r, q]] = u;
                let w = f64::from(u8::from(presence_label.get(r, q, k)));
                let (v, d) = bce_with_grad(u, w);
                side.cls_sum += v;
                let dz = d * u * (1.0 - u);
                side.cls_grad_s[[k, r, q]] = dz;
                side.cls_grad_t[[k, r, q]] = dz;

                let p_src = sigmoid(a - b);
                let p_tgt = sigmoid(b - a);
                side.domain_prob[[k, r, q, 0]] = p_src;
                side.domain_prob[[k, r, q, 1]] = p_tgt;
                let g = gate[[k, r, q]];
                let jac = p_src * p_tgt;
                // CE against source: -ln p_src, dp_src/da = jac, dp_src/db = -jac.
                let (v0, d0) = neg_log_with_grad(p_src);
                side.adv_sum[0] += g * v0;
                side.adv_grad_s[0][[k, r, q]] = g * d0 * jac;
                side.adv_grad_t[0][[k, r, q]] = -g * d0 * jac;
                let (v1, d1) = neg_log_with_grad(p_tgt);
                side.adv_sum[1] += g * v1;
                side.adv_grad_s[1][[k, r, q]] = -g * d1 * jac;
                side.adv_grad_t[1][[k, r, q]] = g * d1 * jac;
            }
        }
    }
    side
}

/// Coarse-branch losses with explicit (constant) target presence weights.
///
/// Per image and patch: presence `O^c = σ(O^s + O^t)`, domain rows
/// `O^st = softmax([O^s, O^t])` per class. The classification term is
/// `λ_c·BCE(O^c, W)` averaged over classes and over the patches of both images.
/// The source term is `λ_s Σ_c W_src[c]·CE(O^st[c], ·)` and the target term
/// `λ_t Σ_c w_t[c]·CE(O^st[c], ·)`, each averaged over that image's patches.
/// `d_coarse` uses domain targets (source 0, target 1); `adv_coarse` flips them
/// and keeps the classification term.
pub fn coarse_losses_with_target_weights(
    scores: CoarseScores<'_>,
    w_src: &PatchClassLabel,
    w_tgt: &PatchClassLabel,
    target_weights: ArrayView3<f64>,
    weights: &LossWeights,
) -> Result<CoarseLosses, LossError> {
    same_shape(scores.os_src.shape(), scores.ot_src.shape(), "source O^s vs O^t")?;
    same_shape(scores.os_tgt.shape(), scores.ot_tgt.shape(), "target O^s vs O^t")?;
    same_shape(scores.os_src.shape(), w_src.presence().shape(), "source scores vs W")?;
    same_shape(scores.os_tgt.shape(), w_tgt.presence().shape(), "target scores vs W")?;
    same_shape(scores.os_tgt.shape(), target_weights.shape(), "target scores vs presence weights")?;

    let src_gate = w_src.as_weights();
    let src = coarse_side(scores.os_src, scores.ot_src, w_src, src_gate.view());
    let tgt = coarse_side(scores.os_tgt, scores.ot_tgt, w_tgt, target_weights);

    let c = scores.os_src.shape()[0] as f64;
    let patches_src = (scores.os_src.shape()[1] * scores.os_src.shape()[2]) as f64;
    let patches_tgt = (scores.os_tgt.shape()[1] * scores.os_tgt.shape()[2]) as f64;
    let cls_scale = weights.lambda_c / (c * (patches_src + patches_tgt));
    let src_scale = weights.lambda_s / patches_src;
    let tgt_scale = weights.lambda_t / patches_tgt;
    let classification = cls_scale * (src.cls_sum + tgt.cls_sum);

    // Index 0 = source label, 1 = target label.
    let objective = |src_label: usize, tgt_label: usize| -> (f64, CoarseGrad) {
        let value = classification + src_scale * src.adv_sum[src_label] + tgt_scale * tgt.adv_sum[tgt_label];
        let grad = CoarseGrad {
            os_src: &src.cls_grad_s * cls_scale + &src.adv_grad_s[src_label] * src_scale,
            ot_src: &src.cls_grad_t * cls_scale + &src.adv_grad_t[src_label] * src_scale,
            os_tgt: &tgt.cls_grad_s * cls_scale + &tgt.adv_grad_s[tgt_label] * tgt_scale,
            ot_tgt: &tgt.cls_grad_t * cls_scale + &tgt.adv_grad_t[tgt_label] * tgt_scale,
        };
        (value, grad)
    };
    let (d_coarse, d_grad) = objective(0, 1);
    let (adv_coarse, adv_grad) = objective(1, 0);
    Ok(CoarseLosses {
        d_coarse,
        adv_coarse,
        classification,
        presence_src: src.presence,
        presence_tgt: tgt.presence,
        domain_prob_src: src.domain_prob,
        domain_prob_tgt: tgt.domain_prob,
        d_grad,
        adv_grad,
    })
}

/// Names of the itemized loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    SegCe,
    Dice,
    Pred,
    D1,
    Adv1,
    D2,
    Adv2,
    DFine,
    AdvFine,
    DCoarse,
    AdvCoarse,
    TotalD,
    TotalEs,
}

impl Term {
    pub const ALL: [Term; 13] = [
        Term::SegCe,
        Term::Dice,
        Term::Pred,
        Term::D1,
        Term::Adv1,
        Term::D2,
        Term::Adv2,
        Term::DFine,
        Term::AdvFine,
        Term::DCoarse,
        Term::AdvCoarse,
        Term::TotalD,
        Term::TotalEs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::SegCe => "seg_ce",
            Term::Dice => "dice",
            Term::Pred => "pred",
            Term::D1 => "d1",
            Term::Adv1 => "adv1",
            Term::D2 => "d2",
            Term::Adv2 => "adv2",
            Term::DFine => "d_fine",
            Term::AdvFine => "adv_fine",
            Term::DCoarse => "d_coarse",
            Term::AdvCoarse => "adv_coarse",
            Term::TotalD => "total_D",
            Term::TotalEs => "total_ES",
        }
    }

    pub fn from_name(name: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Itemized scalar loss terms of one step plus the weights they were composed with.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    terms: BTreeMap<Term, f64>,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            terms: BTreeMap::new(),
            weights,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) -> &mut Self {
        self.terms.insert(term, value);
        self
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.get(&term).copied()
    }

    fn require(&self, term: Term) -> Result<f64, LossError> {
        self.get(term).ok_or(LossError::MissingTerm(term))
    }

    pub fn terms(&self) -> impl Iterator<Item = (Term, f64)> + '_ {
        self.terms.iter().map(|(t, v)| (*t, *v))
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<Term> {
        self.terms.iter().find(|(_, v)| !v.is_finite()).map(|(t, _)| *t)
    }

    /// Checks every blend and total against its components.
    pub fn verify_composition(&self, tol: f64) -> Result<(), LossError> {
        let w = &self.weights;
        let checks = [
            (Term::Pred, blend_pred(self.require(Term::SegCe)?, self.require(Term::Dice)?, w.alpha)),
            (Term::DFine, w.beta * self.require(Term::D1)? + (1.0 - w.beta) * self.require(Term::D2)?),
            (
                Term::AdvFine,
                w.beta * self.require(Term::Adv1)? + (1.0 - w.beta) * self.require(Term::Adv2)?,
            ),
            (Term::TotalD, self.require(Term::DFine)? + self.require(Term::DCoarse)?),
            (
                Term::TotalEs,
                self.require(Term::Pred)? + self.require(Term::AdvFine)? + self.require(Term::AdvCoarse)?,
            ),
        ];
        for (term, expected) in checks {
            let actual = self.require(term)?;
            if (actual - expected).abs() > tol {
                return Err(LossError::Composition { term, actual, expected });
            }
        }
        Ok(())
    }
}

/// Fills the discriminator total (`d_fine + d_coarse`) and the encoder/decoder
/// total (`pred + adv_fine + adv_coarse`).
pub fn compose_totals(mut report: LossReport) -> Result<LossReport, LossError> {
    let total_d = report.require(Term::DFine)? + report.require(Term::DCoarse)?;
    let total_es = report.require(Term::Pred)? + report.require(Term::AdvFine)? + report.require(Term::AdvCoarse)?;
    report.set(Term::TotalD, total_d).set(Term::TotalEs, total_es);
    Ok(report)
}

#[cfg(test)]
mod tests;
