//! Trains the autoregressive teacher on the reverse task and distills a corpus
//! with beam search.

use covnat::config::TeacherConfig;
use covnat::synthetic::{generate, SyntheticSpec, Task};
use covnat::teacher::{distill, teacher_train};
use covnat::vocab::Vocabulary;

fn main() -> covnat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let spec = SyntheticSpec {
        task: Task::Reverse,
        size: 2000,
        max_len: 8,
        words: 16,
        ..Default::default()
    };
    let train = generate(&spec)?.corpus;
    let held_out = generate(&SyntheticSpec { size: 50, seed: 9, ..spec })?.corpus;
    let vocab = Vocabulary::from_lines(train.lines(), 1)?;
    let (teacher, log) = teacher_train(
        &train.encode(&vocab)?,
        TeacherConfig {
            d_model: 32,
            d_hidden: 64,
            vocab_size: vocab.len(),
            max_len: 16,
            dropout: 0.0,
            steps: 800,
            peak_lr: 2e-3,
            warmup: 80,
            max_tokens: 256,
            ..Default::default()
        },
    )?;
    println!("final teacher loss {:.4}", log.recent_mean(50));

    let distilled = distill(&held_out, &vocab, &teacher, 4)?;
    let exact = distilled.target.iter().zip(&held_out.target).filter(|(a, b)| a == b).count();
    println!("{exact}/{} distilled targets equal the reference", held_out.len());
    let src = vocab.encode(&held_out.source[0]);
    for beam in [1, 4] {
        let hyp = teacher.beam_decode(&src, beam)?;
        println!("beam {beam}: {} (score {:.4})", vocab.decode(&hyp.tokens), hyp.score);
    }
    Ok(())
}
