//! Scores hypothesis text against references: BLEU, repeated-token ratio on the
//! raw decoder output, and BLEU per source-length bucket.

use covnat::metrics::{postprocess_dedup, EvalReport, RepeatCount};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> covnat::Result<()> {
    let sources = ["s1 s2 s3", "s4 s5 s6 s7 s8 s9 s1 s2 s3 s4 s5 s6", "s7 s8"];
    let raw = [
        "t1a t2b t2b t3a",
        "t4a t5a t6b t6b t7a t8a t9a t1a t2b t3a t4a t5a t6b",
        "t7b t8a",
    ];
    let refs = ["t1a t2b t3a", "t4a t5a t6b t7a t8a t9a t1a t2b t3a t4a t5a t6b", "t7b t8a"];

    let mut hyps = Vec::new();
    let mut counts = Vec::new();
    for (r, s) in raw.iter().zip(sources) {
        let (kept, removed) = postprocess_dedup(&words(r));
        counts.push(RepeatCount {
            removed,
            raw_len: words(r).len(),
            src_len: words(s).len(),
        });
        hyps.push(kept);
    }
    let refs: Vec<Vec<String>> = refs.iter().map(|r| words(r)).collect();
    let src_lengths: Vec<usize> = sources.iter().map(|s| words(s).len()).collect();
    let report = EvalReport::build(&hyps, &refs, &src_lengths, &counts)?;
    print!("{}", report.to_text());
    print!("{}", report.to_csv());
    Ok(())
}
