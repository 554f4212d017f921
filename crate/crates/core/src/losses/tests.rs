use approx::assert_abs_diff_eq;
use ndarray::{array, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::labels::{LabelMap, PatchClassLabel, ProbMap};

const LN2: f64 = std::f64::consts::LN_2;

fn unit_weights() -> LossWeights {
    LossWeights {
        lambda_s: 1.0,
        lambda_t: 1.0,
        lambda_c: 1.0,
        lambda_n: 1.0,
        alpha: 0.7,
        beta: 0.5,
        epsilon: 1e-5,
    }
}

#[test]
fn uniform_probs_give_log_c() {
    let probs = Array3::from_elem((4, 3, 3), 0.25);
    let truth = LabelMap::new(Array2::from_shape_fn((3, 3), |(y, x)| ((y + x) % 4) as u8), 4).unwrap();
    assert_abs_diff_eq!(seg_cross_entropy(probs.view(), &truth).unwrap(), 4f64.ln(), epsilon = 1e-12);
}

#[test]
fn perfect_prediction_has_near_zero_ce() {
    let truth = LabelMap::new(array![[0, 1], [2, 1]], 3).unwrap();
    let probs = truth.one_hot();
    assert!(seg_cross_entropy(probs.view(), &truth).unwrap() <= 1e-6);
}

#[test]
fn all_ignore_batch_is_an_error() {
    let truth = LabelMap::new(Array2::from_elem((2, 2), IGNORE), 3).unwrap();
    let probs = Array3::from_elem((3, 2, 2), 1.0 / 3.0);
    assert_eq!(seg_cross_entropy(probs.view(), &truth), Err(LossError::EmptyBatch));
}

#[test]
fn ignore_pixels_are_excluded_from_ce() {
    let truth = LabelMap::new(array![[0, IGNORE]], 2).unwrap();
    let probs = array![[[0.5, 0.01]], [[0.5, 0.99]]];
    assert_abs_diff_eq!(seg_cross_entropy(probs.view(), &truth).unwrap(), LN2, epsilon = 1e-12);
}

#[test]
fn dice_of_perfect_prediction_is_small() {
    let truth = LabelMap::new(array![[0, 1, 2], [2, 1, 0]], 3).unwrap();
    let y = truth.one_hot();
    assert!(dice_loss(y.view(), y.view(), 1e-5).unwrap() < 1e-4);
}

#[test]
fn dice_half_overlap_example() {
    let eps = 1e-5;
    let y = LabelMap::new(array![[0, 1], [1, 0]], 2).unwrap().one_hot();
    let p = Array3::from_elem((2, 2, 2), 0.5);
    // each class: 2 * (2 * 0.5) / (2 + 2 + eps)
    let expected = 1.0 - 2.0 / (4.0 + eps);
    let got = dice_loss(p.view(), y.view(), eps).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-14);
    assert_abs_diff_eq!(got, 0.5, epsilon = 1e-5);
}

#[test]
fn absent_class_contributes_zero_overlap() {
    let y = LabelMap::new(array![[0, 1], [1, 0]], 3).unwrap().one_hot();
    let mut p = Array3::zeros((3, 2, 2));
    p.slice_mut(ndarray::s![0..2, .., ..]).assign(&y.slice(ndarray::s![0..2, .., ..]));
    let loss = dice_loss(p.view(), y.view(), 1e-5).unwrap();
    assert!(loss >= 1.0 / 3.0);
    assert_abs_diff_eq!(loss, 1.0 / 3.0, epsilon = 1e-5);
}

#[test]
fn blend_pred_examples() {
    assert_eq!(blend_pred(1.3, 0.4, 1.0), 1.3);
    assert_eq!(blend_pred(1.3, 0.4, 0.0), 0.4);
    assert_abs_diff_eq!(blend_pred(1.0, 0.5, 0.7), 0.85, epsilon = 1e-15);
}

#[test]
fn basic_losses_at_symmetric_point() {
    let m = Array2::from_elem((3, 4), 0.5);
    let out = basic_domain_losses(m.view(), m.view(), &unit_weights()).unwrap();
    assert_abs_diff_eq!(out.d1, 2.0 * LN2, epsilon = 1e-12);
    assert_abs_diff_eq!(out.adv1, 2.0 * LN2, epsilon = 1e-12);
}

#[test]
fn basic_losses_swap_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.01..0.99));
    let b = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.01..0.99));
    let w = LossWeights {
        lambda_s: 0.4,
        lambda_t: 0.4,
        ..unit_weights()
    };
    let ab = basic_domain_losses(a.view(), b.view(), &w).unwrap();
    let ba = basic_domain_losses(b.view(), a.view(), &w).unwrap();
    assert_abs_diff_eq!(ab.d1, ba.adv1, epsilon = 1e-14);
}

#[test]
fn basic_losses_reject_out_of_range_scores() {
    let bad = array![[0.5, 1.5]];
    let ok = array![[0.5, 0.5]];
    assert!(matches!(
        basic_domain_losses(bad.view(), ok.view(), &unit_weights()),
        Err(LossError::ScoreOutOfRange(_))
    ));
}

#[test]
fn cbce_source_half_scores() {
    // 3 of 5 classes present
    let truth = LabelMap::new(array![[0, 0, 2], [4, 4, 4]], 5).unwrap();
    let y = truth.one_hot();
    let u = Array2::from_elem((2, 3), 0.5);
    let eps = 1e-5;
    let expected = (LN2 * 2.0 / (2.0 + eps) + LN2 * 1.0 / (1.0 + eps) + LN2 * 3.0 / (3.0 + eps)) / 5.0;
    for label in [DomainLabel::Source, DomainLabel::Target] {
        let (v, _) = fine_cbce_source(u.view(), y.view(), label, eps).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(v, 3.0 / 5.0 * LN2, epsilon = 1e-5);
    }
}

#[test]
fn cbce_source_single_class_reduces_to_mean_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = Array2::from_shape_fn((4, 6), |_| rng.gen_range(0.05..0.95));
    let y = LabelMap::filled(4, 6, 1, 3).unwrap().one_hot();
    let eps = 1e-5;
    let (v, _) = fine_cbce_source(u.view(), y.view(), DomainLabel::Target, eps).unwrap();
    let n = 24.0;
    let expected = reference::mean_bce(u.view(), 1.0) * (n / (n + eps)) / 3.0;
    assert_abs_diff_eq!(v, expected, epsilon = 1e-13);
}

#[test]
fn cbce_count_invariance() {
    // A class with 1000 pixels vs a class with 1 pixel, same per-pixel BCE.
    let eps = 1e-5;
    let mut big = Array2::from_elem((1, 1001), 0u8);
    for x in 0..1000 {
        big[[0, x]] = 1;
    }
    let mut small = Array2::from_elem((1, 1001), 0u8);
    small[[0, 0]] = 1;
    let u = Array2::from_elem((1, 1001), 0.3);
    let f = |labels: Array2<u8>| {
        let y = LabelMap::new(labels, 2).unwrap().one_hot();
        fine_cbce_source(u.view(), y.view(), DomainLabel::Source, eps).unwrap().0
    };
    let per_pixel = -(0.7f64).ln();
    let diff = (f(big) - f(small)).abs();
    // each class contributes per_pixel * n / (n + eps) / C
    let eps_error = per_pixel * eps / 2.0;
    assert!(diff <= eps_error, "{diff} > {eps_error}");
}

#[test]
fn cbce_target_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.05..0.95));
    let y = LabelMap::new(Array2::from_shape_fn((3, 4), |(a, b)| ((a * b) % 3) as u8), 3)
        .unwrap()
        .one_hot();
    let zero_mask = Array2::zeros((3, 4));
    let some_mask = Array2::from_shape_fn((3, 4), |(a, _)| if a == 1 { 1.0 } else { 0.0 });
    let eps = 1e-5;
    let src = fine_cbce_source(u.view(), y.view(), DomainLabel::Target, eps).unwrap().0;
    let no_mask = fine_cbce_target(u.view(), y.view(), zero_mask.view(), DomainLabel::Target, 0.8, eps)
        .unwrap()
        .0;
    let no_weight = fine_cbce_target(u.view(), y.view(), some_mask.view(), DomainLabel::Target, 0.0, eps)
        .unwrap()
        .0;
    assert_eq!(no_mask, src);
    assert_eq!(no_weight, src);
}

fn random_fine(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>, Array3<f64>, ProbMap) {
    let (c, h, w) = (3, 4, 5);
    let u_s = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.02..0.98));
    let u_t = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.02..0.98));
    let y = LabelMap::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0..c as u8)), c)
        .unwrap()
        .one_hot();
    let mut p = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0f64..3.0).exp());
    let sums = p.sum_axis(ndarray::Axis(0));
    for k in 0..c {
        let mut plane = p.index_axis_mut(ndarray::Axis(0), k);
        plane /= &sums;
    }
    (u_s, u_t, y, ProbMap::new(p).unwrap())
}

#[test]
fn fine_blend_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (u_s, u_t, y, p) = random_fine(&mut rng);
    let at = |beta| {
        let w = LossWeights { beta, ..unit_weights() };
        fine_losses(u_s.view(), u_t.view(), y.view(), &p, &w, 0.5, true).unwrap()
    };
    let one = at(1.0);
    assert_eq!(one.d_fine, one.d1);
    assert_eq!(one.adv_fine, one.adv1);
    let zero = at(0.0);
    assert_eq!(zero.d_fine, zero.d2);
    assert_eq!(zero.adv_fine, zero.adv2);
    // collinearity of d_fine in beta
    let mid = at(0.25);
    assert_abs_diff_eq!(mid.d_fine, 0.25 * one.d1 + 0.75 * zero.d2, epsilon = 1e-14);
}

#[test]
fn fine_losses_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let (u_s, u_t, y, p) = random_fine(&mut rng);
        let w = LossWeights {
            lambda_s: rng.gen_range(0.1..2.0),
            lambda_t: rng.gen_range(0.1..2.0),
            lambda_n: rng.gen_range(0.1..2.0),
            beta: rng.gen_range(0.0..1.0),
            ..unit_weights()
        };
        let th_n = rng.gen_range(0.3..0.8);
        let got = fine_losses(u_s.view(), u_t.view(), y.view(), &p, &w, th_n, true).unwrap();
        let want = reference::fine_losses(
            u_s.view(),
            u_t.view(),
            y.view(),
            p.view(),
            w.lambda_s,
            w.lambda_t,
            w.lambda_n,
            w.beta,
            w.epsilon,
            th_n,
        );
        let got = [got.d1, got.adv1, got.d2, got.adv2, got.d_fine, got.adv_fine];
        for (g, r) in got.iter().zip(want) {
            assert_abs_diff_eq!(*g, r, epsilon = 1e-10);
        }
    }
}

#[test]
fn fine_without_class_terms_reports_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (u_s, u_t, y, p) = random_fine(&mut rng);
    let w = LossWeights { beta: 1.0, ..unit_weights() };
    let out = fine_losses(u_s.view(), u_t.view(), y.view(), &p, &w, 0.5, false).unwrap();
    assert_eq!(out.d2, 0.0);
    assert_eq!(out.adv2, 0.0);
    assert_eq!(out.d_fine, out.d1);
}

fn presence(rows: &[&[u8]]) -> PatchClassLabel {
    // one patch, presence listed per class
    let c = rows[0].len();
    PatchClassLabel::from_array(Array3::from_shape_fn((c, 1, 1), |(k, _, _)| rows[0][k])).unwrap()
}

#[test]
fn coarse_hand_example() {
    let zeros = Array3::zeros((2, 1, 1));
    let scores = CoarseScores {
        os_src: zeros.view(),
        ot_src: zeros.view(),
        os_tgt: zeros.view(),
        ot_tgt: zeros.view(),
    };
    let w_src = presence(&[&[1, 0]]);
    let w_tgt = presence(&[&[0, 1]]);
    let out = coarse_losses(scores, &w_src, &w_tgt, &unit_weights()).unwrap();
    assert!(out.presence_src.iter().all(|&v| v == 0.5));
    assert!(out.domain_prob_src.iter().all(|&v| v == 0.5));
    assert_abs_diff_eq!(out.classification, LN2, epsilon = 1e-12);
    // classification ln2 + source class 0 ln2 + target 2 * 0.5 * ln2
    assert_abs_diff_eq!(out.d_coarse, 3.0 * LN2, epsilon = 1e-12);
    assert_abs_diff_eq!(out.adv_coarse, 3.0 * LN2, epsilon = 1e-12);
}

#[test]
fn coarse_zero_source_presence_has_no_source_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = (3, 2, 2);
    let os = Array3::from_shape_fn(shape, |_| rng.gen_range(-2.0..2.0));
    let ot = Array3::from_shape_fn(shape, |_| rng.gen_range(-2.0..2.0));
    let w_zero = PatchClassLabel::from_array(Array3::zeros(shape)).unwrap();
    let w = LossWeights {
        lambda_c: 0.0,
        lambda_t: 0.0,
        ..unit_weights()
    };
    let scores = CoarseScores {
        os_src: os.view(),
        ot_src: ot.view(),
        os_tgt: os.view(),
        ot_tgt: ot.view(),
    };
    let out = coarse_losses(scores, &w_zero, &w_zero, &w).unwrap();
    assert_eq!(out.d_coarse, 0.0);
    assert_eq!(out.adv_coarse, 0.0);
}

#[test]
fn coarse_swap_symmetry_with_fixed_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = (3, 2, 2);
    let mut r = || Array3::from_shape_fn(shape, |_| rng.gen_range(-2.0..2.0));
    let (a, b, c, d) = (r(), r(), r(), r());
    let w = PatchClassLabel::from_array(Array3::from_shape_fn(shape, |(k, i, j)| ((k + i + j) % 2) as u8)).unwrap();
    let gate = w.as_weights();
    let lw = LossWeights {
        lambda_s: 0.6,
        lambda_t: 0.6,
        ..unit_weights()
    };
    let fwd = CoarseScores {
        os_src: a.view(),
        ot_src: b.view(),
        os_tgt: c.view(),
        ot_tgt: d.view(),
    };
    // Swapping domain roles: the target image becomes the source one with the same gate.
    let swapped = CoarseScores {
        os_src: c.view(),
        ot_src: d.view(),
        os_tgt: a.view(),
        ot_tgt: b.view(),
    };
    let x = coarse_losses_with_target_weights(fwd, &w, &w, gate.view(), &lw).unwrap();
    let y = coarse_losses_with_target_weights(swapped, &w, &w, gate.view(), &lw).unwrap();
    assert_abs_diff_eq!(x.d_coarse, y.adv_coarse, epsilon = 1e-13);
}

#[test]
fn coarse_rows_are_normalized_and_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let shape = (4, 2, 3);
        let mut r = || Array3::from_shape_fn(shape, |_| rng.gen_range(-4.0..4.0));
        let (a, b, c, d) = (r(), r(), r(), r());
        let ws = PatchClassLabel::from_array(Array3::from_shape_fn(shape, |_| rng.gen_range(0..2u8))).unwrap();
        let wt = PatchClassLabel::from_array(Array3::from_shape_fn(shape, |_| rng.gen_range(0..2u8))).unwrap();
        let lw = LossWeights {
            lambda_c: rng.gen_range(0.1..1.0),
            lambda_s: rng.gen_range(0.1..1.0),
            lambda_t: rng.gen_range(0.1..1.0),
            ..unit_weights()
        };
        let scores = CoarseScores {
            os_src: a.view(),
            ot_src: b.view(),
            os_tgt: c.view(),
            ot_tgt: d.view(),
        };
        let out = coarse_losses(scores, &ws, &wt, &lw).unwrap();
        for prob in [&out.domain_prob_src, &out.domain_prob_tgt] {
            for row in prob.lanes(ndarray::Axis(3)) {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
        let (d_ref, adv_ref) = reference::coarse_losses(
            a.view(),
            b.view(),
            c.view(),
            d.view(),
            ws.as_weights().view(),
            wt.as_weights().view(),
            out.presence_tgt.view(),
            lw.lambda_c,
            lw.lambda_s,
            lw.lambda_t,
        );
        assert_abs_diff_eq!(out.d_coarse, d_ref, epsilon = 1e-10);
        assert_abs_diff_eq!(out.adv_coarse, adv_ref, epsilon = 1e-10);
    }
}

fn full_report(rng: &mut ChaCha8Rng) -> LossReport {
    let w = LossWeights {
        alpha: rng.gen_range(0.0..1.0),
        beta: rng.gen_range(0.0..1.0),
        ..Default::default()
    };
    let mut r = LossReport::new(w);
    let (ce, dice, d1, adv1, d2, adv2) = (
        rng.gen_range(0.0..3.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..3.0),
        rng.gen_range(0.0..3.0),
        rng.gen_range(0.0..3.0),
        rng.gen_range(0.0..3.0),
    );
    r.set(Term::SegCe, ce)
        .set(Term::Dice, dice)
        .set(Term::Pred, blend_pred(ce, dice, w.alpha))
        .set(Term::D1, d1)
        .set(Term::Adv1, adv1)
        .set(Term::D2, d2)
        .set(Term::Adv2, adv2)
        .set(Term::DFine, w.beta * d1 + (1.0 - w.beta) * d2)
        .set(Term::AdvFine, w.beta * adv1 + (1.0 - w.beta) * adv2)
        .set(Term::DCoarse, rng.gen_range(0.0..3.0))
        .set(Term::AdvCoarse, rng.gen_range(0.0..3.0));
    r
}

#[test]
fn compose_totals_examples() {
    let mut zero = LossReport::new(LossWeights::default());
    for t in Term::ALL {
        zero.set(t, 0.0);
    }
    let zero = compose_totals(zero).unwrap();
    assert_eq!(zero.get(Term::TotalD), Some(0.0));
    assert_eq!(zero.get(Term::TotalEs), Some(0.0));

    let mut r = LossReport::new(LossWeights::default());
    r.set(Term::DFine, 1.0).set(Term::DCoarse, 2.0).set(Term::Pred, 0.0);
    r.set(Term::AdvFine, 0.0).set(Term::AdvCoarse, 0.0);
    assert_eq!(compose_totals(r).unwrap().get(Term::TotalD), Some(3.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let r = compose_totals(full_report(&mut rng)).unwrap();
        let td = r.get(Term::DFine).unwrap() + r.get(Term::DCoarse).unwrap();
        let te = r.get(Term::Pred).unwrap() + r.get(Term::AdvFine).unwrap() + r.get(Term::AdvCoarse).unwrap();
        assert_abs_diff_eq!(r.get(Term::TotalD).unwrap(), td, epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(Term::TotalEs).unwrap(), te, epsilon = 1e-12);
        r.verify_composition(1e-10).unwrap();
    }
}

#[test]
fn compose_totals_requires_components() {
    let mut r = LossReport::new(LossWeights::default());
    r.set(Term::DFine, 1.0);
    assert_eq!(compose_totals(r).unwrap_err(), LossError::MissingTerm(Term::DCoarse));
}

#[test]
fn weights_are_validated() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { alpha: 1.2, ..Default::default() }.validate().is_err());
    assert!(LossWeights { epsilon: 0.0, ..Default::default() }.validate().is_err());
    assert!(LossWeights { lambda_c: -1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn term_names_round_trip() {
    for t in Term::ALL {
        assert_eq!(Term::from_name(t.name()), Some(t));
    }
}

proptest! {
    #[test]
    fn losses_are_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u_s, u_t, y, p) = random_fine(&mut rng);
        let truth = crate::labels::pseudo_labels(&p);
        let ce = seg_cross_entropy(p.view(), &truth).unwrap();
        let dice = dice_loss(p.view(), y.view(), 1e-5).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&dice));
        let f = fine_losses(u_s.view(), u_t.view(), y.view(), &p, &unit_weights(), 0.5, true).unwrap();
        for v in [f.d1, f.adv1, f.d2, f.adv2, f.d_fine, f.adv_fine] {
            prop_assert!(v >= 0.0);
        }
    }
}
