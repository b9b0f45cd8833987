//! Two-phase training of a small coverage model on the multi-synonym task,
//! followed by a checkpoint round trip and a dev-set report.
//!
//! ```text
//! RUST_LOG=info cargo run --release --example train_coverage_nat
//! ```

use covnat::checkpoint::{load_model, save_model};
use covnat::config::{ModelConfig, TrainConfig};
use covnat::decode::{decode_corpus, evaluate_decodes};
use covnat::model::NatModel;
use covnat::synthetic::{generate, SyntheticSpec};
use covnat::train::{two_phase_train, DevSet, MetricsLog};
use covnat::vocab::Vocabulary;

fn main() -> covnat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let spec = SyntheticSpec {
        size: 3000,
        max_len: 8,
        words: 16,
        seed: 1,
        lexicon_seed: 1,
        ..Default::default()
    };
    let train = generate(&spec)?.corpus;
    let dev = generate(&SyntheticSpec { size: 200, seed: 2, ..spec })?.corpus;
    let vocab = Vocabulary::from_lines(train.lines(), 1)?;
    let train = train.encode(&vocab)?;
    let dev = dev.encode(&vocab)?;

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
        warmup: 60,
        pretrain_steps: 600,
        finetune_steps: 100,
        finetune_lr: 1e-4,
        eval_interval: 100,
        log_interval: 0,
        ..Default::default()
    };
    let devset = DevSet::new(&dev, 100);
    let mut log = MetricsLog::in_memory();
    let outcome = two_phase_train(model, &train, &devset, &cfg, &mut log)?;
    for row in log.rows.iter().filter(|r| r.dev_bleu.is_some()) {
        println!("{}", row.to_line());
    }
    println!("lambda after training: {:?}", outcome.model.lambda());

    let dir = std::env::temp_dir().join("covnat-example");
    std::fs::create_dir_all(&dir).map_err(|e| covnat::Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    save_model(&path, &outcome.model)?;
    let model = load_model(&path)?;

    let srcs: Vec<Vec<usize>> = dev.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<usize>> = dev.iter().map(|p| p.target.clone()).collect();
    let decodes = decode_corpus(&model, None, &srcs, model.config.k_train, 0, 64)?;
    print!("{}", evaluate_decodes(&decodes, &srcs, &refs, &vocab)?.to_text());
    for (d, p) in decodes.iter().zip(&dev).take(3) {
        println!("src {}\nref {}\nhyp {}\n", vocab.decode(&p.source), vocab.decode(&p.target), vocab.decode(&d.tokens));
    }
    Ok(())
}
