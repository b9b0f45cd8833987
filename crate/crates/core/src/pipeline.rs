//! File-level steps of a run: data generation, teacher training, distillation,
//! NAT training, translation, evaluation and analysis. The command-line tool
//! is a thin layer over these functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{save_model, save_teacher};
use crate::config::RunConfig;
use crate::data::{SentencePair, TextCorpus};
use crate::decode::{coverage_dump_csv, decode_corpus, decode_with_coverage, evaluate_decodes, lpd_decode, DecodeResult};
use crate::error::{Error, Result};
use crate::io_util::{read_lines, write_atomic, write_lines_atomic};
use crate::metrics::{EvalReport, RepeatCount};
use crate::model::NatModel;
use crate::synthetic::{generate, SyntheticSpec};
use crate::teacher::{teacher_train, Teacher, TeacherLog};
use crate::train::{two_phase_train, DevSet, MetricsLog, TrainOutcome};
use crate::vocab::Vocabulary;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const TEACHER_LOG_FILE: &str = "teacher_log.tsv";

/// Writes `<out>.src` and `<out>.tgt`.
pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<TextCorpus> {
    let corpus = generate(spec)?.corpus;
    corpus.write(out)?;
    Ok(corpus)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("paths.{what} is not set")))
}

/// The configured vocabulary file if it exists, otherwise one built from the
/// training corpus (both sides) and saved into `out_dir`.
pub fn load_or_build_vocab(cfg: &RunConfig, out_dir: &Path) -> Result<Vocabulary> {
    let vocab = match &cfg.paths.vocab {
        Some(p) if p.exists() => Vocabulary::load(p)?,
        _ => {
            let train = required(&cfg.paths.train, "train")?;
            Vocabulary::build(&[TextCorpus::src_path(train), TextCorpus::tgt_path(train)], 1)?
        }
    };
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    Ok(vocab)
}

fn read_pairs(prefix: &Path, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    TextCorpus::read(prefix)?.encode(vocab)
}

/// Trains the teacher on `paths.train`; writes the checkpoint, its loss log,
/// the vocabulary and the resolved config into `out_dir`.
pub fn train_teacher_run(cfg: &RunConfig, out_dir: &Path) -> Result<(Teacher, TeacherLog)> {
    let vocab = load_or_build_vocab(cfg, out_dir)?;
    let pairs = read_pairs(required(&cfg.paths.train, "train")?, &vocab)?;
    let (teacher, log) = teacher_train(&pairs, cfg.effective_teacher(vocab.len()))?;
    save_teacher(&out_dir.join(TEACHER_FILE), &teacher)?;
    let lines: Vec<String> = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l:.6}", i + 1))
        .collect();
    write_lines_atomic(&out_dir.join(TEACHER_LOG_FILE), &lines)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    Ok((teacher, log))
}

pub fn distill_run(teacher: &Teacher, vocab: &Vocabulary, input: &Path, beam: usize, out: &Path) -> Result<TextCorpus> {
    let corpus = TextCorpus::read(input)?;
    let distilled = crate::teacher::distill(&corpus, vocab, teacher, beam)?;
    distilled.write(out)?;
    Ok(distilled)
}

/// Two-phase training on `paths.train` with checkpoint selection on `paths.dev`.
/// Writes `metrics.tsv`, `model.ckpt`, `vocab.txt` and `config.toml` into `out_dir`.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let vocab = load_or_build_vocab(cfg, out_dir)?;
    let train = read_pairs(required(&cfg.paths.train, "train")?, &vocab)?;
    let dev = read_pairs(required(&cfg.paths.dev, "dev")?, &vocab)?;
    let tc = cfg.effective_train();
    let devset = DevSet::new(&dev, tc.dev_limit);
    let model = NatModel::new(cfg.effective_model(vocab.len()))?;
    let mut log = MetricsLog::create(&out_dir.join(METRICS_FILE))?;
    let outcome = two_phase_train(model, &train, &devset, &tc, &mut log)?;
    save_model(&out_dir.join(MODEL_FILE), &outcome.model)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    Ok(outcome)
}

/// Per-sentence decode metadata, one TSV row per hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeMeta {
    pub raw_len: usize,
    pub removed: usize,
    pub predicted_len: usize,
    pub rescore: Option<f64>,
}

pub const META_HEADER: &str = "raw_len\tremoved\tpredicted_len\trescore";

impl DecodeMeta {
    pub fn from_result(d: &DecodeResult) -> Self {
        DecodeMeta {
            raw_len: d.raw.len(),
            removed: d.removed,
            predicted_len: d.predicted_len,
            rescore: d.rescore,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.raw_len,
            self.removed,
            self.predicted_len,
            self.rescore.map(|r| format!("{r:.6}")).unwrap_or_default()
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let num = |i: usize| -> Result<usize> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad decode metadata row {line:?}")))
        };
        Ok(DecodeMeta {
            raw_len: num(0)?,
            removed: num(1)?,
            predicted_len: num(2)?,
            rescore: f.get(3).and_then(|s| s.parse().ok()),
        })
    }
}

pub fn read_meta(path: &Path) -> Result<Vec<DecodeMeta>> {
    read_lines(path)?
        .iter()
        .filter(|l| !l.is_empty() && l.as_str() != META_HEADER)
        .map(|l| DecodeMeta::parse(l))
        .collect()
}

pub struct Translation {
    pub hypotheses: Vec<String>,
    pub decodes: Vec<DecodeResult>,
}

/// Decodes every line of `input`; returns detokenised hypotheses.
pub fn translate(
    model: &NatModel,
    teacher: Option<&Teacher>,
    vocab: &Vocabulary,
    lines: &[String],
    k_dec: usize,
    radius: usize,
    batch_rows: usize,
) -> Result<Translation> {
    let srcs: Vec<Vec<usize>> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let ids = vocab.encode(l);
            if ids.is_empty() {
                Err(Error::Data(format!("input line {} is empty", i + 1)))
            } else {
                Ok(ids)
            }
        })
        .collect::<Result<_>>()?;
    let decodes = decode_corpus(model, teacher, &srcs, k_dec, radius, batch_rows)?;
    let hypotheses = decodes.iter().map(|d| vocab.decode(&d.tokens)).collect();
    Ok(Translation { hypotheses, decodes })
}

/// Writes hypotheses to `out` and their metadata to `<out>.meta`.
pub fn write_translation(t: &Translation, out: &Path) -> Result<()> {
    write_lines_atomic(out, &t.hypotheses)?;
    let mut meta = vec![META_HEADER.to_string()];
    meta.extend(t.decodes.iter().map(|d| DecodeMeta::from_result(d).to_line()));
    write_lines_atomic(&meta_path(out), &meta)
}

pub fn meta_path(hyp: &Path) -> PathBuf {
    let mut s = hyp.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Scores hypothesis lines against reference lines. Without metadata the
/// hypotheses count as their own raw output with nothing removed.
pub fn evaluate_files(hyps: &[String], refs: &[String], srcs: &[String], meta: Option<&[DecodeMeta]>) -> Result<EvalReport> {
    if hyps.len() != refs.len() || hyps.len() != srcs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses, {} references, {} sources",
            hyps.len(),
            refs.len(),
            srcs.len()
        )));
    }
    let split = |l: &String| -> Vec<String> { l.split_whitespace().map(str::to_string).collect() };
    let h: Vec<Vec<String>> = hyps.iter().map(split).collect();
    let r: Vec<Vec<String>> = refs.iter().map(split).collect();
    let src_lengths: Vec<usize> = srcs.iter().map(|s| s.split_whitespace().count()).collect();
    let counts: Vec<RepeatCount> = match meta {
        Some(m) => {
            if m.len() != hyps.len() {
                return Err(Error::Data(format!("{} metadata rows for {} hypotheses", m.len(), hyps.len())));
            }
            m.iter()
                .zip(&src_lengths)
                .map(|(m, &n)| RepeatCount {
                    removed: m.removed,
                    raw_len: m.raw_len,
                    src_len: n,
                })
                .collect()
        }
        None => h
            .iter()
            .zip(&src_lengths)
            .map(|(t, &n)| RepeatCount {
                removed: 0,
                raw_len: t.len(),
                src_len: n,
            })
            .collect(),
    };
    EvalReport::build(&h, &r, &src_lengths, &counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub bleu: f64,
    pub repeat_ratio: f64,
    pub latency_ms: f64,
}

/// BLEU, repeated-token ratio and single-sentence latency for each `k`.
///
/// Latency is the fastest of `repeats` timed passes over the first
/// `latency_sentences` sources. Passes cycle through every `k` in turn, so
/// slow drift in machine load hits all rows alike.
pub fn sweep_kdec(
    model: &NatModel,
    vocab: &Vocabulary,
    dev: &[SentencePair],
    ks: &[usize],
    latency_sentences: usize,
    repeats: usize,
) -> Result<Vec<SweepRow>> {
    let srcs: Vec<Vec<usize>> = dev.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<usize>> = dev.iter().map(|p| p.target.clone()).collect();
    let timed = &srcs[..latency_sentences.clamp(1, srcs.len())];
    let mut rows = ks
        .iter()
        .map(|&k| {
            let decodes = decode_corpus(model, None, &srcs, k, 0, 64)?;
            let report = evaluate_decodes(&decodes, &srcs, &refs, vocab)?;
            Ok(SweepRow {
                k,
                bleu: report.bleu,
                repeat_ratio: report.repeats.overall,
                latency_ms: f64::INFINITY,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..repeats.max(1) {
        for row in &mut rows {
            let start = Instant::now();
            for s in timed {
                lpd_decode(model, None, s, row.k, 0)?;
            }
            let ms = start.elapsed().as_secs_f64() * 1000.0 / timed.len() as f64;
            row.latency_ms = row.latency_ms.min(ms);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k_dec,bleu,repeat_ratio,latency_ms\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{:.4},{:.4}\n", r.k, r.bleu, r.repeat_ratio, r.latency_ms));
    }
    s
}

/// Coverage and attention of every iteration for one sentence, as CSV.
pub fn analyze_coverage(model: &NatModel, vocab: &Vocabulary, sentence: &str, k_dec: usize) -> Result<String> {
    let src = vocab.encode(sentence);
    if src.is_empty() {
        return Err(Error::Data("empty sentence".into()));
    }
    let d = decode_with_coverage(model, &[src], k_dec)?.remove(0);
    let cov = d
        .coverage
        .ok_or_else(|| Error::Config("the model has no coverage layer to analyse".into()))?;
    Ok(coverage_dump_csv(&cov))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
