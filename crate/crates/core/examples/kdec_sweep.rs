//! BLEU, repeated-token ratio and latency as the number of decoding iterations varies.

use covnat::config::{ModelConfig, TrainConfig};
use covnat::model::NatModel;
use covnat::pipeline::{sweep_csv, sweep_kdec};
use covnat::synthetic::{generate, SyntheticSpec};
use covnat::train::{pretrain, DevSet, MetricsLog};
use covnat::vocab::Vocabulary;

fn main() -> covnat::Result<()> {
    let spec = SyntheticSpec {
        size: 2000,
        max_len: 8,
        words: 12,
        ..Default::default()
    };
    let train = generate(&spec)?.corpus;
    let dev = generate(&SyntheticSpec { size: 100, seed: 5, ..spec })?.corpus;
    let vocab = Vocabulary::from_lines(train.lines(), 1)?;
    let (train, dev) = (train.encode(&vocab)?, dev.encode(&vocab)?);
    let model = NatModel::new(ModelConfig {
        d_model: 32,
        d_hidden: 64,
        vocab_size: vocab.len(),
        max_len: 16,
        length_radius: 6,
        dropout: 0.0,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        max_tokens: 256,
        peak_lr: 2e-3,
        warmup: 40,
        pretrain_steps: 400,
        eval_interval: 400,
        log_interval: 0,
        ..Default::default()
    };
    let model = pretrain(model, &train, &DevSet::new(&dev, 50), &cfg, &mut MetricsLog::in_memory())?.model;
    let rows = sweep_kdec(&model, &vocab, &dev, &(1..=8).collect::<Vec<_>>(), 50, 3)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
