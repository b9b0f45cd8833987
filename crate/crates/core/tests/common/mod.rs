#![allow(dead_code)]

use covnat::config::ModelConfig;
use covnat::data::{Batch, SentencePair};
use covnat::model::NatModel;

/// d_model 8, two layers, three coverage iterations, twelve tokens.
pub fn tiny_config(use_tcir: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_hidden: 12,
        n_layers: 2,
        n_heads: 2,
        vocab_size: 12,
        max_len: 16,
        k_train: 3,
        length_radius: 3,
        dropout: 0.0,
        init_scale: 0.5,
        use_tcir,
        ..Default::default()
    }
}

pub fn tiny_model(use_tcir: bool, seed: u64) -> NatModel {
    NatModel::new(ModelConfig {
        seed,
        ..tiny_config(use_tcir)
    })
    .unwrap()
}

/// Two sentence pairs of different lengths on both sides.
pub fn toy_batch() -> Batch {
    let pairs = vec![
        SentencePair {
            source: vec![4, 5, 6, 7],
            target: vec![8, 9, 9, 10, 11],
        },
        SentencePair {
            source: vec![6, 4],
            target: vec![10, 8, 5],
        },
    ];
    Batch::from_pairs(&pairs, vec![0, 1]).unwrap()
}
