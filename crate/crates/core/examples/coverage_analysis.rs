//! Trains a small coverage model and prints how coverage accumulates over the
//! refinement iterations for one sentence. The full dump is written as CSV.

use covnat::config::{ModelConfig, TrainConfig};
use covnat::decode::{coverage_dump_csv, decode_with_coverage};
use covnat::model::NatModel;
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
    let vocab = Vocabulary::from_lines(train.lines(), 1)?;
    let train = train.encode(&vocab)?;
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
    let model = pretrain(model, &train, &DevSet::new(&train[..50], 0), &cfg, &mut MetricsLog::in_memory())?.model;

    let sentence = "s3 s1 s4 s1 s5 s9";
    let d = decode_with_coverage(&model, &[vocab.encode(sentence)], 5)?.remove(0);
    println!("source      {sentence}");
    println!("translation {}  (lambda {:.3})", vocab.decode(&d.tokens), model.lambda().unwrap_or(0.0));
    let iterations = d.coverage.expect("coverage model");
    for it in &iterations {
        let [t, n] = [it.attention.shape()[0], it.attention.shape()[1]];
        // Coverage seen by the last target position: how much of each source word
        // the earlier positions already claimed.
        let last: Vec<String> = (0..n).map(|i| format!("{:.2}", it.coverage.get(&[t - 1, i]))).collect();
        let peaks: Vec<usize> = (0..t)
            .map(|ti| covnat::model::argmax(&it.attention.data()[ti * n..(ti + 1) * n]))
            .collect();
        println!("iter {}: attention peaks {peaks:?}, final coverage [{}]", it.k, last.join(" "));
    }
    let path = std::env::temp_dir().join("covnat-coverage.csv");
    std::fs::write(&path, coverage_dump_csv(&iterations)).map_err(|e| covnat::Error::io(&path, e))?;
    println!("full dump: {}", path.display());
    Ok(())
}
