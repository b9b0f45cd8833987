//! Finite-difference check of the full fine-tuning objective on a two-sentence batch.

use std::cell::Cell;

use covnat::config::ModelConfig;
use covnat::data::{Batch, SentencePair};
use covnat::gradcheck::{finite_diff_check, DEFAULT_STEP};
use covnat::losses::finetune_objective;
use covnat::model::NatModel;

fn main() -> covnat::Result<()> {
    let model = NatModel::new(ModelConfig {
        d_model: 8,
        d_hidden: 12,
        n_heads: 2,
        vocab_size: 12,
        max_len: 16,
        k_train: 3,
        length_radius: 3,
        dropout: 0.0,
        init_scale: 0.5,
        ..Default::default()
    })?;
    let pairs = [
        SentencePair {
            source: vec![4, 5, 6, 7],
            target: vec![8, 9, 9, 10, 11],
        },
        SentencePair {
            source: vec![6, 4],
            target: vec![10, 8, 5],
        },
    ];
    let batch = Batch::from_pairs(&pairs, vec![0, 1])?;
    let mut params = model.params.clone();
    let clamped = Cell::new(0);
    let report = finite_diff_check(
        &mut params,
        |g, ps| Ok(finetune_objective(g, &model, ps, &batch, 0.1, 0.5, 3, &clamped)?.total),
        DEFAULT_STEP,
    )?;
    println!(
        "{} entries checked, max relative error {:.2e} at {:?}",
        report.entries_checked, report.max_rel_error, report.worst
    );
    let lambda = model.lambda_id().expect("coverage model");
    println!("dL/dlambda = {:.6}", params.get(lambda).grad[0]);
    Ok(())
}
