mod common;

use common::{check_loss, Fixture, LossKind};

fn assert_exact_enough(kind: LossKind) {
    let fx = Fixture::new(3);
    let rep = check_loss(&fx, kind);
    assert!(rep.max_rel_error < 1e-4, "{}: {rep:?}", kind.name());
}

#[test]
fn cent_gradient() {
    assert_exact_enough(LossKind::Cent);
}

#[test]
fn fold_gradient() {
    assert_exact_enough(LossKind::Fold);
}

#[test]
fn bg_gradient() {
    assert_exact_enough(LossKind::Bg);
}

#[test]
fn ret_gradient() {
    assert_exact_enough(LossKind::Ret);
}

#[test]
fn total_gradient() {
    assert_exact_enough(LossKind::Total);
}

#[test]
fn ga_gradient() {
    assert_exact_enough(LossKind::Ga);
}

#[test]
fn graddiff_gradient() {
    assert_exact_enough(LossKind::GradDiff);
}

#[test]
fn total_is_weighted_sum_of_parts() {
    let fx = Fixture::new(5);
    let m = &fx.student;
    let w = &fx.weights;
    let parts: f64 = w.w_cent * common::loss_value(&fx, LossKind::Cent, m)
        + w.w_fold * common::loss_value(&fx, LossKind::Fold, m)
        + common::loss_value(&fx, LossKind::Bg, m)
        + common::loss_value(&fx, LossKind::Ret, m);
    let total = common::loss_value(&fx, LossKind::Total, m);
    assert!((total - parts).abs() < 1e-12, "{total} vs {parts}");
}
