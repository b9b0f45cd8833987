//! Greedy parallel decoding against length-parallel decoding with teacher
//! rescoring, on a briefly trained model.

use covnat::config::{ModelConfig, TeacherConfig, TrainConfig};
use covnat::decode::{decode_corpus, evaluate_decodes, lpd_lengths};
use covnat::model::NatModel;
use covnat::synthetic::{generate, SyntheticSpec};
use covnat::teacher::teacher_train;
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

    let (teacher, _) = teacher_train(
        &train,
        TeacherConfig {
            d_model: 32,
            d_hidden: 64,
            vocab_size: vocab.len(),
            max_len: 16,
            dropout: 0.0,
            steps: 500,
            peak_lr: 2e-3,
            warmup: 50,
            max_tokens: 256,
            ..Default::default()
        },
    )?;
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

    println!("candidate lengths around 6 with radius 2: {:?}", lpd_lengths(6, 2, 16));
    let srcs: Vec<Vec<usize>> = dev.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<usize>> = dev.iter().map(|p| p.target.clone()).collect();
    for radius in [0, 2, 4] {
        let decodes = decode_corpus(&model, Some(&teacher), &srcs, 5, radius, 64)?;
        let report = evaluate_decodes(&decodes, &srcs, &refs, &vocab)?;
        println!("radius {radius}: BLEU {:.2}, repeated tokens {:.2}%", report.bleu, report.repeats.overall);
    }
    Ok(())
}
