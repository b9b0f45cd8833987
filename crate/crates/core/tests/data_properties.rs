//! Properties of corpora, batching, metrics, the teacher and decoding.

mod common;

use covnat::config::TeacherConfig;
use covnat::data::{batch_by_tokens, SentencePair};
use covnat::decode::{greedy_parallel_decode, lpd_decode};
use covnat::metrics::{bleu, postprocess_dedup, repeated_token_ratio, RepeatCount};
use covnat::synthetic::{generate, SyntheticSpec, Task};
use covnat::teacher::Teacher;
use covnat::vocab::Vocabulary;
use proptest::prelude::*;

fn tiny_teacher(seed: u64) -> Teacher {
    Teacher::new(TeacherConfig {
        d_model: 8,
        d_hidden: 12,
        n_layers: 1,
        n_heads: 2,
        vocab_size: 12,
        max_len: 10,
        dropout: 0.0,
        init_scale: 0.5,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn task() -> impl Strategy<Value = Task> {
    prop_oneof![
        Just(Task::Copy),
        Just(Task::Reverse),
        Just(Task::LexicalSwap),
        Just(Task::MultiSynonym)
    ]
}

fn pairs_strategy() -> impl Strategy<Value = Vec<SentencePair>> {
    prop::collection::vec(
        (prop::collection::vec(4usize..20, 1..12), prop::collection::vec(4usize..20, 1..12))
            .prop_map(|(source, target)| SentencePair { source, target }),
        1..40,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_is_idempotent(tokens in prop::collection::vec(0u8..4, 0..30)) {
        let (once, removed) = postprocess_dedup(&tokens);
        let (twice, removed_again) = postprocess_dedup(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(removed_again, 0);
        prop_assert_eq!(once.len() + removed, tokens.len());
    }

    #[test]
    fn bleu_of_a_corpus_against_itself_is_100(corpus in prop::collection::vec(prop::collection::vec(0u8..30, 1..15), 1..10)) {
        prop_assert!((bleu(&corpus, &corpus).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn repeat_ratio_is_zero_exactly_without_consecutive_duplicates(
        raws in prop::collection::vec(prop::collection::vec(0u8..5, 1..12), 1..12)
    ) {
        let counts: Vec<RepeatCount> = raws
            .iter()
            .map(|r| RepeatCount { removed: postprocess_dedup(r).1, raw_len: r.len(), src_len: r.len() })
            .collect();
        let stats = repeated_token_ratio(&counts).unwrap();
        let any_dup = raws.iter().any(|r| r.windows(2).any(|w| w[0] == w[1]));
        prop_assert_eq!(stats.overall == 0.0, !any_dup);
    }

    #[test]
    fn vocabulary_round_trips_known_sentences(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
        let line = words.join(" ");
        let vocab = Vocabulary::from_lines([line.as_str()], 1).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&line)), line);
    }

    #[test]
    fn synthetic_corpora_are_pure_and_reachable(task in task(), seed in any::<u64>(), synonyms in 1usize..4) {
        let spec = SyntheticSpec {
            task,
            size: 30,
            seed,
            min_len: 2,
            max_len: 10,
            words: 12,
            synonyms,
            lexicon_seed: seed / 2,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(&a.corpus, &b.corpus);
        for (s, t) in a.corpus.source.iter().zip(&a.corpus.target) {
            let src: Vec<&str> = s.split_whitespace().collect();
            let tgt: Vec<&str> = t.split_whitespace().collect();
            prop_assert!(a.lexicon.is_reachable(&src, &tgt), "{s} -> {t}");
        }
    }

    #[test]
    fn token_batches_respect_budget_and_cover_each_pair_once(pairs in pairs_strategy(), budget in 11usize..80, seed in any::<u64>()) {
        let b = batch_by_tokens(&pairs, budget, seed).unwrap();
        let again = batch_by_tokens(&pairs, budget, seed).unwrap();
        prop_assert_eq!(b.skipped, 0);
        let mut seen = vec![0; pairs.len()];
        for (x, y) in b.batches.iter().zip(&again.batches) {
            prop_assert!(x.padded_tokens() <= budget);
            prop_assert_eq!(x, y);
            for &i in &x.indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn beam_one_equals_greedy(seed in 0u64..1000, src in prop::collection::vec(4usize..12, 1..6)) {
        let teacher = tiny_teacher(seed);
        let beam = teacher.beam_decode(&src, 1).unwrap();
        let greedy = teacher.greedy_decode(&src).unwrap();
        prop_assert_eq!(beam.tokens, greedy.tokens);
    }

    #[test]
    fn teacher_distributions_sum_to_one(seed in 0u64..1000, src in prop::collection::vec(4usize..12, 1..6), cand in prop::collection::vec(4usize..12, 1..6)) {
        let teacher = tiny_teacher(seed);
        for row in teacher.token_distributions(&src, &cand).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lpd_radius_zero_is_greedy(seed in 0u64..1000, src in prop::collection::vec(4usize..12, 1..8)) {
        let model = common::tiny_model(true, seed);
        let greedy = greedy_parallel_decode(&model, &[src.clone()], 3).unwrap().remove(0);
        prop_assert_eq!(lpd_decode(&model, None, &src, 3, 0).unwrap(), greedy);
    }
}
