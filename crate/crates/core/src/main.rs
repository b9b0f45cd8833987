use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use covnat::checkpoint::{load_model, load_teacher};
use covnat::config::RunConfig;
use covnat::decode::mean_latency_ms;
use covnat::io_util::read_lines;
use covnat::pipeline::{self, meta_path, read_meta, write_text};
use covnat::synthetic::{SyntheticSpec, Task};
use covnat::vocab::Vocabulary;
use covnat::{Error, Result};

#[derive(Parser)]
#[command(name = "covnat", version, about = "Coverage-aware non-autoregressive translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus as <out>.src / <out>.tgt.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
        #[arg(long, default_value_t = 32)]
        words: usize,
        #[arg(long, default_value_t = 2)]
        synonyms: usize,
        #[arg(long, default_value_t = 0.25)]
        fertility2_prob: f64,
        /// Shared by every split of one task.
        #[arg(long, default_value_t = 0)]
        lexicon_seed: u64,
    },
    /// Train the autoregressive teacher on paths.train.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace corpus targets with teacher beam outputs.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus prefix (<input>.src / <input>.tgt).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-phase NAT training with dev-BLEU checkpoint selection.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        disable_tcir: bool,
        #[arg(long)]
        disable_sca: bool,
    },
    /// Translate a file of source sentences, one hypothesis per line.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        kdec: usize,
        #[arg(long, default_value_t = 0)]
        lpd_radius: usize,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Also time single-sentence decoding and report the mean.
        #[arg(long)]
        latency: bool,
    },
    /// BLEU, repeated-token ratio and length buckets for a hypothesis file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        src: PathBuf,
        /// Decode metadata written by translate (defaults to <hyp>.meta when present).
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Writes <out>.txt and <out>.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// BLEU and latency for a range of decoding iterations.
    SweepKdec {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Dev corpus prefix.
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value_t = 1)]
        kmin: usize,
        #[arg(long, default_value_t = 8)]
        kmax: usize,
        #[arg(long, default_value_t = 100)]
        latency_sentences: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump attention and coverage of every iteration for one sentence.
    AnalyzeCoverage {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        sentence: String,
        #[arg(long, default_value_t = 5)]
        kdec: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_config(path: &Path, seed: u64, out: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.seed = seed;
    cfg.paths.out_dir = Some(out.to_path_buf());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            task,
            size,
            seed,
            out,
            min_len,
            max_len,
            words,
            synonyms,
            fertility2_prob,
            lexicon_seed,
        } => {
            let spec = SyntheticSpec {
                task,
                size,
                seed,
                min_len,
                max_len,
                words,
                synonyms,
                fertility2_prob,
                lexicon_seed,
            };
            let corpus = pipeline::gen_data(&spec, &out)?;
            println!("wrote {} pairs to {}.src/.tgt", corpus.len(), out.display());
        }
        Command::TrainTeacher { config, seed, out } => {
            let cfg = run_config(&config, seed, &out)?;
            let (_, log) = pipeline::train_teacher_run(&cfg, &out)?;
            println!("teacher trained: final loss {:.4}", log.recent_mean(50));
        }
        Command::Distill {
            teacher,
            vocab,
            input,
            beam,
            out,
        } => {
            let teacher = load_teacher(&teacher)?;
            let vocab = Vocabulary::load(&vocab)?;
            let corpus = pipeline::distill_run(&teacher, &vocab, &input, beam, &out)?;
            println!("distilled {} pairs into {}.src/.tgt", corpus.len(), out.display());
        }
        Command::Train {
            config,
            seed,
            out,
            disable_tcir,
            disable_sca,
        } => {
            let mut cfg = run_config(&config, seed, &out)?;
            cfg.disable_tcir |= disable_tcir;
            cfg.disable_sca |= disable_sca;
            let outcome = pipeline::train_run(&cfg, &out)?;
            println!(
                "best dev BLEU {:.2} at step {}",
                outcome.final_phase.best_bleu, outcome.final_phase.best_step
            );
        }
        Command::Translate {
            ckpt,
            vocab,
            input,
            output,
            kdec,
            lpd_radius,
            teacher,
            latency,
        } => {
            if lpd_radius > 0 && teacher.is_none() {
                return Err(Error::Config("--lpd-radius > 0 requires --teacher".into()));
            }
            let model = load_model(&ckpt)?;
            let teacher = teacher.as_deref().map(load_teacher).transpose()?;
            let vocab = Vocabulary::load(&vocab)?;
            let lines = read_lines(&input)?;
            let t = pipeline::translate(&model, teacher.as_ref(), &vocab, &lines, kdec, lpd_radius, 64)?;
            pipeline::write_translation(&t, &output)?;
            if latency {
                let srcs: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode(l)).collect();
                let ms = mean_latency_ms(&model, teacher.as_ref(), &srcs, kdec, lpd_radius)?;
                println!("mean latency {ms:.3} ms/sentence");
            }
            println!("wrote {} hypotheses to {}", t.hypotheses.len(), output.display());
        }
        Command::Evaluate {
            hyp,
            reference,
            src,
            meta,
            out,
        } => {
            let meta_file = meta.or_else(|| Some(meta_path(&hyp)).filter(|p| p.exists()));
            let meta = meta_file.as_deref().map(read_meta).transpose()?;
            let report = pipeline::evaluate_files(
                &read_lines(&hyp)?,
                &read_lines(&reference)?,
                &read_lines(&src)?,
                meta.as_deref(),
            )?;
            write_text(&with_suffix(&out, ".txt"), &report.to_text())?;
            write_text(&with_suffix(&out, ".csv"), &report.to_csv())?;
            print!("{}", report.to_text());
        }
        Command::SweepKdec {
            ckpt,
            vocab,
            dev,
            kmin,
            kmax,
            latency_sentences,
            out,
        } => {
            if kmin == 0 || kmin > kmax {
                return Err(Error::Config(format!("invalid k range {kmin}..={kmax}")));
            }
            let model = load_model(&ckpt)?;
            let vocab = Vocabulary::load(&vocab)?;
            let pairs = covnat::data::TextCorpus::read(&dev)?.encode(&vocab)?;
            let ks: Vec<usize> = (kmin..=kmax).collect();
            let rows = pipeline::sweep_kdec(&model, &vocab, &pairs, &ks, latency_sentences, 5)?;
            let csv = pipeline::sweep_csv(&rows);
            write_text(&out, &csv)?;
            print!("{csv}");
        }
        Command::AnalyzeCoverage {
            ckpt,
            vocab,
            sentence,
            kdec,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let vocab = Vocabulary::load(&vocab)?;
            let csv = pipeline::analyze_coverage(&model, &vocab, &sentence, kdec)?;
            write_text(&out, &csv)?;
            println!("wrote coverage dump to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
