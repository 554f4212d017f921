//! Naive nested-loop evaluations of every loss, written directly from the
//! summation formulas with no shared helpers beyond the log clamp.
//!
//! These are slow on purpose and exist to cross-check the vectorized versions.

use ndarray::{ArrayView2, ArrayView3};

use crate::labels::{LabelMap, IGNORE};

use super::SCORE_FLOOR;

fn safe_ln(x: f64) -> f64 {
    x.max(SCORE_FLOOR).min(1.0 - SCORE_FLOOR).ln()
}

fn bce(u: f64, target: f64) -> f64 {
    -(target * safe_ln(u) + (1.0 - target) * safe_ln(1.0 - u))
}

pub fn seg_cross_entropy(probs: ArrayView3<f64>, truth: &LabelMap) -> f64 {
    let (c, h, w) = probs.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let label = truth.get(y, x);
            if label == IGNORE {
                continue;
            }
            for k in 0..c {
                if k == label as usize {
                    sum -= safe_ln(probs[[k, y, x]]);
                }
            }
            count += 1;
        }
    }
    sum / count as f64
}

pub fn dice_loss(probs: ArrayView3<f64>, truth: ArrayView3<f64>, eps: f64) -> f64 {
    let (c, h, w) = probs.dim();
    let mut acc = 0.0;
    for k in 0..c {
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..h {
            for x in 0..w {
                num += truth[[k, y, x]] * probs[[k, y, x]];
                den += truth[[k, y, x]] + probs[[k, y, x]];
            }
        }
        acc += 2.0 * num / (den + eps);
    }
    1.0 - acc / c as f64
}

pub fn mean_bce(map: ArrayView2<f64>, target: f64) -> f64 {
    let (h, w) = map.dim();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            sum += bce(map[[y, x]], target);
        }
    }
    sum / (h * w) as f64
}

/// `(d1, adv1)`.
pub fn basic_domain_losses(map_s: ArrayView2<f64>, map_t: ArrayView2<f64>, lambda_s: f64, lambda_t: f64) -> (f64, f64) {
    (
        lambda_s * mean_bce(map_s, 0.0) + lambda_t * mean_bce(map_t, 1.0),
        lambda_s * mean_bce(map_s, 1.0) + lambda_t * mean_bce(map_t, 0.0),
    )
}

pub fn fine_cbce_source(u: ArrayView2<f64>, onehot: ArrayView3<f64>, label: f64, eps: f64) -> f64 {
    let (c, h, w) = onehot.dim();
    let mut total = 0.0;
    for k in 0..c {
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..h {
            for x in 0..w {
                num += onehot[[k, y, x]] * bce(u[[y, x]], label);
                den += onehot[[k, y, x]];
            }
        }
        total += num / (den + eps);
    }
    total / c as f64
}

pub fn fine_cbce_target(
    u: ArrayView2<f64>,
    onehot: ArrayView3<f64>,
    mask: ArrayView2<f64>,
    label: f64,
    lambda_n: f64,
    eps: f64,
) -> f64 {
    let (h, w) = mask.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        for x in 0..w {
            num += mask[[y, x]] * bce(u[[y, x]], label);
            den += mask[[y, x]];
        }
    }
    fine_cbce_source(u, onehot, label, eps) + lambda_n * num / (den + eps)
}

/// Argmax pseudo-labels (first maximum wins) and the strict low-confidence mask.
pub fn pseudo_and_mask(probs: ArrayView3<f64>, th_n: f64) -> (ndarray::Array3<f64>, ndarray::Array2<f64>) {
    let (c, h, w) = probs.dim();
    let mut onehot = ndarray::Array3::zeros((c, h, w));
    let mut mask = ndarray::Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            for k in 1..c {
                if probs[[k, y, x]] > probs[[best, y, x]] {
                    best = k;
                }
            }
            onehot[[best, y, x]] = 1.0;
            if probs[[best, y, x]] < th_n {
                mask[[y, x]] = 1.0;
            }
        }
    }
    (onehot, mask)
}

/// `(d1, adv1, d2, adv2, d_fine, adv_fine)` composed from the four sub-losses.
#[allow(clippy::too_many_arguments)]
pub fn fine_losses(
    u_s: ArrayView2<f64>,
    u_t: ArrayView2<f64>,
    truth: ArrayView3<f64>,
    probs_t: ArrayView3<f64>,
    lambda_s: f64,
    lambda_t: f64,
    lambda_n: f64,
    beta: f64,
    eps: f64,
    th_n: f64,
) -> [f64; 6] {
    let (d1, adv1) = basic_domain_losses(u_s, u_t, lambda_s, lambda_t);
    let (pseudo, mask) = pseudo_and_mask(probs_t, th_n);
    let d2 = lambda_s * fine_cbce_source(u_s, truth, 0.0, eps)
        + lambda_t * fine_cbce_target(u_t, pseudo.view(), mask.view(), 1.0, lambda_n, eps);
    let adv2 = lambda_s * fine_cbce_source(u_s, truth, 1.0, eps)
        + lambda_t * fine_cbce_target(u_t, pseudo.view(), mask.view(), 0.0, lambda_n, eps);
    [
        d1,
        adv1,
        d2,
        adv2,
        beta * d1 + (1.0 - beta) * d2,
        beta * adv1 + (1.0 - beta) * adv2,
    ]
}

/// `(d_coarse, adv_coarse)` with explicit target presence weights.
#[allow(clippy::too_many_arguments)]
pub fn coarse_losses<'a>(
    os_src: ArrayView3<'a, f64>,
    ot_src: ArrayView3<'a, f64>,
    os_tgt: ArrayView3<'a, f64>,
    ot_tgt: ArrayView3<'a, f64>,
    w_src: ArrayView3<'a, f64>,
    w_tgt: ArrayView3<'a, f64>,
    target_weights: ArrayView3<'a, f64>,
    lambda_c: f64,
    lambda_s: f64,
    lambda_t: f64,
) -> (f64, f64) {
    let (c, rs, cs) = os_src.dim();
    let (_, rt, ct) = os_tgt.dim();
    let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());

    let mut cls = 0.0;
    for (os, ot, w, rows, cols) in [(os_src, ot_src, w_src, rs, cs), (os_tgt, ot_tgt, w_tgt, rt, ct)] {
        for r in 0..rows {
            for q in 0..cols {
                for k in 0..c {
                    cls += bce(logistic(os[[k, r, q]] + ot[[k, r, q]]), w[[k, r, q]]);
                }
            }
        }
    }
    cls *= lambda_c / (c * (rs * cs + rt * ct)) as f64;

    // Per-class softmax over [O^s, O^t] and its cross-entropy against column `col`.
    let ce = |a: f64, b: f64, col: usize| {
        let (ea, eb) = (a.exp(), b.exp());
        let row = [ea / (ea + eb), eb / (ea + eb)];
        -safe_ln(row[col])
    };
    let mut src = [0.0; 2];
    let mut tgt = [0.0; 2];
    for col in 0..2 {
        for r in 0..rs {
            for q in 0..cs {
                for k in 0..c {
                    src[col] += w_src[[k, r, q]] * ce(os_src[[k, r, q]], ot_src[[k, r, q]], col);
                }
            }
        }
        src[col] *= lambda_s / (rs * cs) as f64;
        for r in 0..rt {
            for q in 0..ct {
                for k in 0..c {
                    tgt[col] += target_weights[[k, r, q]] * ce(os_tgt[[k, r, q]], ot_tgt[[k, r, q]], col);
                }
            }
        }
        tgt[col] *= lambda_t / (rt * ct) as f64;
    }
    (cls + src[0] + tgt[1], cls + src[1] + tgt[0])
}
