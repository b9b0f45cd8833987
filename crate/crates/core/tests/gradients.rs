mod common;

use std::cell::Cell;

use covnat::gradcheck::{finite_diff_check, DEFAULT_STEP};
use covnat::losses::{finetune_objective, pretrain_objective};

#[test]
fn finetune_objective_matches_finite_differences() {
    let mut model = common::tiny_model(true, 3);
    let batch = common::toy_batch();
    let mut params = model.params.clone();
    let clamped = Cell::new(0);
    let report = finite_diff_check(
        &mut params,
        |g, ps| Ok(finetune_objective(g, &model, ps, &batch, 0.1, 0.5, 3, &clamped)?.total),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    let lambda = model.lambda_id().unwrap();
    assert!(params.get(lambda).grad[0] != 0.0);
    assert!(params.get(model.sca_ws).grad.iter().any(|&g| g != 0.0));
    model.params = params;
}

#[test]
fn baseline_pretrain_objective_matches_finite_differences() {
    let model = common::tiny_model(false, 4);
    let batch = common::toy_batch();
    let mut params = model.params.clone();
    let clamped = Cell::new(0);
    let report = finite_diff_check(
        &mut params,
        |g, ps| Ok(pretrain_objective(g, &model, ps, &batch, 0.1, 3, &clamped)?.total),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}
