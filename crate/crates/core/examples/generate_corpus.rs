//! Generates a small multi-synonym corpus and checks every pair against the lexicon.
//!
//! ```text
//! cargo run --release --example generate_corpus
//! ```

use covnat::synthetic::{generate, SyntheticSpec, Task};
use covnat::vocab::Vocabulary;

fn main() -> covnat::Result<()> {
    let spec = SyntheticSpec {
        task: Task::MultiSynonym,
        size: 5,
        seed: 3,
        max_len: 8,
        words: 10,
        ..Default::default()
    };
    let synthetic = generate(&spec)?;
    for (src, tgt) in synthetic.corpus.source.iter().zip(&synthetic.corpus.target) {
        let s: Vec<&str> = src.split_whitespace().collect();
        let t: Vec<&str> = tgt.split_whitespace().collect();
        println!("{src:<30} => {tgt}   (reachable: {})", synthetic.lexicon.is_reachable(&s, &t));
    }
    for (word, phrases) in synthetic.lexicon.words.iter().zip(&synthetic.lexicon.phrases).take(3) {
        let options: Vec<String> = phrases.iter().map(|p| p.join(" ")).collect();
        println!("{word}: {}", options.join(" | "));
    }
    let vocab = Vocabulary::from_lines(synthetic.corpus.lines(), 1)?;
    println!("vocabulary: {} types", vocab.len());
    Ok(())
}
