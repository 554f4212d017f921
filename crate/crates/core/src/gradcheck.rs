//! Central finite-difference verification of the analytic loss gradients.
//!
//! Each [`GradCase`] builds a random [`Probe`]: a flattened point, the
//! analytic gradient there, and a closure evaluating the objective at any
//! point. [`run_gradcheck`] compares the two on many random instances.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::labels::{self, LabelMap, PatchClassLabel, ProbMap, IGNORE};
use crate::losses::{self, CoarseScores, DomainLabel, LossWeights};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("input sizes must be positive and classes at least 2, got {0:?}")]
    EmptyInput(Sizes),
    #[error("at least one instance per case is required")]
    NoInstances,
    #[error("case `{case}` failed to build: {source}")]
    Build {
        case: &'static str,
        #[source]
        source: losses::LossError,
    },
}

/// Shape of the random inputs: `classes × height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Sizes {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            classes: 4,
            height: 6,
            width: 5,
        }
    }
}

pub struct Probe {
    pub point: Vec<f64>,
    pub analytic: Vec<f64>,
    pub objective: Box<dyn Fn(&[f64]) -> f64>,
}

pub struct GradCase {
    pub name: &'static str,
    pub build: Box<dyn Fn(&mut ChaCha8Rng, Sizes) -> Result<Probe, losses::LossError>>,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        build: impl Fn(&mut ChaCha8Rng, Sizes) -> Result<Probe, losses::LossError> + 'static,
    ) -> Self {
        Self {
            name,
            build: Box::new(build),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

pub fn run_gradcheck(
    cases: &[GradCase],
    seed: u64,
    sizes: Sizes,
    instances: usize,
    step: f64,
    tolerance: f64,
) -> Result<Vec<CaseResult>, GradCheckError> {
    if sizes.classes < 2 || sizes.height == 0 || sizes.width == 0 {
        return Err(GradCheckError::EmptyInput(sizes));
    }
    if instances == 0 {
        return Err(GradCheckError::NoInstances);
    }
    let mut results = Vec::with_capacity(cases.len());
    for (index, case) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let probe = (case.build)(&mut rng, sizes).map_err(|source| GradCheckError::Build {
                case: case.name,
                source,
            })?;
            let numeric = central_difference(probe.objective.as_ref(), &probe.point, step);
            worst = worst.max(max_relative_error(&probe.analytic, &numeric));
        }
        results.push(CaseResult {
            name: case.name,
            instances,
            max_relative_error: worst,
            passed: worst < tolerance,
        });
    }
    Ok(results)
}

// Random instance helpers.

fn random_probs(rng: &mut ChaCha8Rng, s: Sizes) -> Array3<f64> {
    let mut logits = Array3::<f64>::zeros((s.classes, s.height, s.width));
    logits.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
    let mut out = logits.mapv(f64::exp);
    for y in 0..s.height {
        for x in 0..s.width {
            let total: f64 = (0..s.classes).map(|k| out[[k, y, x]]).sum();
            for k in 0..s.classes {
                out[[k, y, x]] /= total;
            }
        }
    }
    out
}

fn random_labels(rng: &mut ChaCha8Rng, s: Sizes, ignore_rate: f64) -> LabelMap {
    let mut data = Array2::zeros((s.height, s.width));
    data.iter_mut().for_each(|v| {
        *v = if rng.gen_bool(ignore_rate) {
            IGNORE
        } else {
            rng.gen_range(0..s.classes as u8)
        }
    });
    // keep at least one labeled pixel
    data[[0, 0]] = rng.gen_range(0..s.classes as u8);
    LabelMap::new(data, s.classes).expect("labels in range")
}

fn random_scores(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h, w));
    out.iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.95));
    out
}

fn random_logits(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut out = Array3::zeros(shape);
    out.iter_mut().for_each(|v| *v = 1.5 * rng.sample::<f64, _>(StandardNormal));
    out
}

fn random_presence(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> PatchClassLabel {
    let mut out = Array3::zeros(shape);
    out.iter_mut().for_each(|v| *v = u8::from(rng.gen_bool(0.5)));
    PatchClassLabel::from_array(out).expect("binary")
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        lambda_s: rng.gen_range(0.2..1.5),
        lambda_t: rng.gen_range(0.2..1.5),
        lambda_c: rng.gen_range(0.2..1.5),
        lambda_n: rng.gen_range(0.2..1.5),
        alpha: rng.gen_range(0.05..0.95),
        beta: rng.gen_range(0.05..0.95),
        epsilon: 1e-5,
    }
}

fn view3(flat: &[f64], shape: (usize, usize, usize)) -> ArrayView3<'_, f64> {
    ArrayView3::from_shape(shape, flat).expect("shape")
}

fn view2(flat: &[f64], shape: (usize, usize)) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape(shape, flat).expect("shape")
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn concat(parts: &[Vec<f64>]) -> Vec<f64> {
    parts.iter().flatten().copied().collect()
}

/// A pair of score maps `(U_s, U_t)` with fixed class inputs for the fine-branch cases.
struct FineInstance {
    shape: (usize, usize),
    u_s: Array2<f64>,
    u_t: Array2<f64>,
    truth: Array3<f64>,
    probs_t: ProbMap,
    weights: LossWeights,
    th_n: f64,
}

fn fine_instance(rng: &mut ChaCha8Rng, s: Sizes) -> FineInstance {
    let shape = (s.height, s.width);
    FineInstance {
        shape,
        u_s: random_scores(rng, s.height, s.width),
        u_t: random_scores(rng, s.height, s.width),
        truth: random_labels(rng, s, 0.1).one_hot(),
        probs_t: ProbMap::new(random_probs(rng, s)).expect("softmax output"),
        weights: random_weights(rng),
        th_n: rng.gen_range(0.3..0.7),
    }
}

#[derive(Clone, Copy)]
enum FineTerm {
    D1,
    Adv1,
    D2,
    Adv2,
    DFine,
    AdvFine,
}

fn fine_case(name: &'static str, term: FineTerm) -> GradCase {
    GradCase::new(name, move |rng, s| {
        let inst = fine_instance(rng, s);
        let n = s.height * s.width;
        let pick = move |f: &losses::FineLosses| -> f64 {
            match term {
                FineTerm::D1 => f.d1,
                FineTerm::Adv1 => f.adv1,
                FineTerm::D2 => f.d2,
                FineTerm::Adv2 => f.adv2,
                FineTerm::DFine => f.d_fine,
                FineTerm::AdvFine => f.adv_fine,
            }
        };
        let at = losses::fine_losses(
            inst.u_s.view(),
            inst.u_t.view(),
            inst.truth.view(),
            &inst.probs_t,
            &inst.weights,
            inst.th_n,
            true,
        )?;
        // Sub-term gradients are recovered by evaluating blends at β endpoints.
        let grad = match term {
            FineTerm::DFine => at.d_grad.clone(),
            FineTerm::AdvFine => at.adv_grad.clone(),
            FineTerm::D1 | FineTerm::Adv1 | FineTerm::D2 | FineTerm::Adv2 => {
                let beta = match term {
                    FineTerm::D1 | FineTerm::Adv1 => 1.0,
                    _ => 0.0,
                };
                let w = LossWeights { beta, ..inst.weights };
                let g = losses::fine_losses(
                    inst.u_s.view(),
                    inst.u_t.view(),
                    inst.truth.view(),
                    &inst.probs_t,
                    &w,
                    inst.th_n,
                    true,
                )?;
                match term {
                    FineTerm::D1 | FineTerm::D2 => g.d_grad,
                    _ => g.adv_grad,
                }
            }
        };
        let FineInstance {
            shape,
            u_s,
            u_t,
            truth,
            probs_t,
            weights,
            th_n,
        } = inst;
        Ok(Probe {
            point: concat(&[flat(&u_s), flat(&u_t)]),
            analytic: concat(&[flat(&grad.source), flat(&grad.target)]),
            objective: Box::new(move |x: &[f64]| {
                let (a, b) = x.split_at(n);
                let f = losses::fine_losses(view2(a, shape), view2(b, shape), truth.view(), &probs_t, &weights, th_n, true)
                    .expect("valid fine instance");
                pick(&f)
            }),
        })
    })
}

fn coarse_case(name: &'static str, discriminator_side: bool) -> GradCase {
    GradCase::new(name, move |rng, s| {
        let rows = (s.height / 2).max(1);
        let cols = (s.width / 2).max(1);
        let shape = (s.classes, rows, cols);
        let n = s.classes * rows * cols;
        let os_src = random_logits(rng, shape);
        let ot_src = random_logits(rng, shape);
        let os_tgt = random_logits(rng, shape);
        let ot_tgt = random_logits(rng, shape);
        let w_src = random_presence(rng, shape);
        let w_tgt = random_presence(rng, shape);
        let gate = random_scores(rng, 1, n).into_shape_with_order(shape).expect("shape");
        let weights = random_weights(rng);
        let scores = CoarseScores {
            os_src: os_src.view(),
            ot_src: ot_src.view(),
            os_tgt: os_tgt.view(),
            ot_tgt: ot_tgt.view(),
        };
        let at = losses::coarse_losses_with_target_weights(scores, &w_src, &w_tgt, gate.view(), &weights)?;
        let g = if discriminator_side { &at.d_grad } else { &at.adv_grad };
        Ok(Probe {
            point: concat(&[flat(&os_src), flat(&ot_src), flat(&os_tgt), flat(&ot_tgt)]),
            analytic: concat(&[flat(&g.os_src), flat(&g.ot_src), flat(&g.os_tgt), flat(&g.ot_tgt)]),
            objective: Box::new(move |x: &[f64]| {
                let scores = CoarseScores {
                    os_src: view3(&x[0..n], shape),
                    ot_src: view3(&x[n..2 * n], shape),
                    os_tgt: view3(&x[2 * n..3 * n], shape),
                    ot_tgt: view3(&x[3 * n..4 * n], shape),
                };
                let out = losses::coarse_losses_with_target_weights(scores, &w_src, &w_tgt, gate.view(), &weights)
                    .expect("valid coarse instance");
                if discriminator_side {
                    out.d_coarse
                } else {
                    out.adv_coarse
                }
            }),
        })
    })
}

fn cbce_case(name: &'static str, target_side: bool, label: DomainLabel) -> GradCase {
    GradCase::new(name, move |rng, s| {
        let shape = (s.height, s.width);
        let u = random_scores(rng, s.height, s.width);
        let eps = 1e-5;
        if target_side {
            let probs = ProbMap::new(random_probs(rng, s)).expect("softmax output");
            let pseudo = labels::pseudo_labels(&probs).one_hot();
            let mask = labels::uncertainty_mask(&probs, 0.5)?.as_weights();
            let lambda_n = rng.gen_range(0.2..1.5);
            let (_, g) = losses::fine_cbce_target(u.view(), pseudo.view(), mask.view(), label, lambda_n, eps)?;
            Ok(Probe {
                point: flat(&u),
                analytic: flat(&g),
                objective: Box::new(move |x: &[f64]| {
                    losses::fine_cbce_target(view2(x, shape), pseudo.view(), mask.view(), label, lambda_n, eps)
                        .expect("valid")
                        .0
                }),
            })
        } else {
            let truth = random_labels(rng, s, 0.1).one_hot();
            let (_, g) = losses::fine_cbce_source(u.view(), truth.view(), label, eps)?;
            Ok(Probe {
                point: flat(&u),
                analytic: flat(&g),
                objective: Box::new(move |x: &[f64]| {
                    losses::fine_cbce_source(view2(x, shape), truth.view(), label, eps)
                        .expect("valid")
                        .0
                }),
            })
        }
    })
}

/// Every loss objective, each differentiated with respect to all of its real-valued inputs.
pub fn loss_cases() -> Vec<GradCase> {
    let mut cases = vec![
        GradCase::new("seg_ce", |rng, s| {
            let probs = random_probs(rng, s);
            let truth = random_labels(rng, s, 0.15);
            let shape = probs.dim();
            let (_, g) = losses::seg_cross_entropy_with_grad(probs.view(), &truth)?;
            Ok(Probe {
                point: flat(&probs),
                analytic: flat(&g),
                objective: Box::new(move |x: &[f64]| losses::seg_cross_entropy(view3(x, shape), &truth).expect("valid")),
            })
        }),
        GradCase::new("dice", |rng, s| {
            let probs = random_probs(rng, s);
            let truth = random_labels(rng, s, 0.1).one_hot();
            let shape = probs.dim();
            let (_, g) = losses::dice_loss_with_grad(probs.view(), truth.view(), 1e-5)?;
            Ok(Probe {
                point: flat(&probs),
                analytic: flat(&g),
                objective: Box::new(move |x: &[f64]| losses::dice_loss(view3(x, shape), truth.view(), 1e-5).expect("valid")),
            })
        }),
        GradCase::new("pred", |rng, s| {
            let probs = random_probs(rng, s);
            let truth = random_labels(rng, s, 0.1);
            let onehot = truth.one_hot();
            let alpha = rng.gen_range(0.05..0.95);
            let shape = probs.dim();
            let (_, g_ce) = losses::seg_cross_entropy_with_grad(probs.view(), &truth)?;
            let (_, g_dice) = losses::dice_loss_with_grad(probs.view(), onehot.view(), 1e-5)?;
            let g = g_ce * alpha + g_dice * (1.0 - alpha);
            Ok(Probe {
                point: flat(&probs),
                analytic: flat(&g),
                objective: Box::new(move |x: &[f64]| {
                    let p = view3(x, shape);
                    losses::blend_pred(
                        losses::seg_cross_entropy(p, &truth).expect("valid"),
                        losses::dice_loss(p, onehot.view(), 1e-5).expect("valid"),
                        alpha,
                    )
                }),
            })
        }),
        GradCase::new("blend_pred", |rng, _| {
            let alpha: f64 = rng.gen_range(0.0..1.0);
            let point = vec![rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0)];
            Ok(Probe {
                point,
                analytic: vec![alpha, 1.0 - alpha],
                objective: Box::new(move |x: &[f64]| losses::blend_pred(x[0], x[1], alpha)),
            })
        }),
        cbce_case("cbce_source[l=0]", false, DomainLabel::Source),
        cbce_case("cbce_source[l=1]", false, DomainLabel::Target),
        cbce_case("cbce_target[l=0]", true, DomainLabel::Source),
        cbce_case("cbce_target[l=1]", true, DomainLabel::Target),
    ];
    cases.extend([
        fine_case("d1", FineTerm::D1),
        fine_case("adv1", FineTerm::Adv1),
        fine_case("d2", FineTerm::D2),
        fine_case("adv2", FineTerm::Adv2),
        fine_case("d_fine", FineTerm::DFine),
        fine_case("adv_fine", FineTerm::AdvFine),
        coarse_case("d_coarse", true),
        coarse_case("adv_coarse", false),
    ]);
    cases
}

/// A deliberately broken case: the seg CE gradient with its sign flipped.
pub fn sign_flipped_case() -> GradCase {
    GradCase::new("seg_ce[sign-flipped]", |rng, s| {
        let probs = random_probs(rng, s);
        let truth = random_labels(rng, s, 0.0);
        let shape = probs.dim();
        let (_, g) = losses::seg_cross_entropy_with_grad(probs.view(), &truth)?;
        Ok(Probe {
            point: flat(&probs),
            analytic: flat(&(-g)),
            objective: Box::new(move |x: &[f64]| losses::seg_cross_entropy(view3(x, shape), &truth).expect("valid")),
        })
    })
}
