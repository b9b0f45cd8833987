//! Two-phase NAT training: pretraining on `L_mle + α L_length` with early
//! stopping on dev BLEU, then fine-tuning with the agreement loss added at a
//! small fixed learning rate.

use std::cell::Cell;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::{batch_by_tokens, Batch, SentencePair};
use crate::decode::corpus_bleu;
use crate::error::{Error, Result};
use crate::losses::objective;
use crate::model::NatModel;
use crate::optim::{lr_schedule, Adam};

const EVAL_BATCH_ROWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    /// All losses from step 0 under the warmup schedule.
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub phase: Phase,
    pub loss_mle: f64,
    pub loss_len: f64,
    pub loss_sca: Option<f64>,
    pub lr: f64,
    pub dev_bleu: Option<f64>,
}

impl LogRow {
    /// `step \t phase \t loss_mle \t loss_len \t loss_sca \t lr \t dev_bleu`, with
    /// absent values left empty.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6e}\t{}",
            self.step,
            self.phase,
            self.loss_mle,
            self.loss_len,
            opt(self.loss_sca),
            self.lr,
            opt(self.dev_bleu)
        )
    }
}

/// Append-only metrics log; rows are also kept in memory.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh log file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        File::create(path).map_err(|e| Error::io(path, e))?;
        let f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            rows: Vec::new(),
            file: Some((path.to_path_buf(), f)),
        })
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some((path, f)) = self.file.as_mut() {
            writeln!(f, "{}", row.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last_step(&self) -> usize {
        self.rows.last().map_or(0, |r| r.step)
    }
}

/// Source and reference ids used for checkpoint selection.
#[derive(Clone, Debug)]
pub struct DevSet {
    pub srcs: Vec<Vec<usize>>,
    pub refs: Vec<Vec<usize>>,
}

impl DevSet {
    pub fn new(pairs: &[SentencePair], limit: usize) -> Self {
        let take = if limit == 0 { pairs.len() } else { limit.min(pairs.len()) };
        DevSet {
            srcs: pairs[..take].iter().map(|p| p.source.clone()).collect(),
            refs: pairs[..take].iter().map(|p| p.target.clone()).collect(),
        }
    }

    pub fn bleu(&self, model: &NatModel) -> Result<f64> {
        corpus_bleu(model, &self.srcs, &self.refs, model.config.k_train, EVAL_BATCH_ROWS)
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    /// Best checkpoint of the phase by dev BLEU.
    pub model: NatModel,
    pub best_bleu: f64,
    pub best_step: usize,
    pub steps_run: usize,
    /// Length offsets that fell outside the predictor's range.
    pub clamped_lengths: usize,
}

/// Cycles through token-budget batches, reshuffling every epoch.
struct BatchStream<'a> {
    pairs: &'a [SentencePair],
    max_tokens: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Batch>,
}

impl<'a> BatchStream<'a> {
    fn new(pairs: &'a [SentencePair], max_tokens: usize, seed: u64) -> Self {
        BatchStream {
            pairs,
            max_tokens,
            seed,
            epoch: 0,
            queue: Vec::new(),
        }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            let b = batch_by_tokens(self.pairs, self.max_tokens, self.seed.wrapping_add(self.epoch))?;
            if b.batches.is_empty() {
                return Err(Error::Data("no training pair fits the token budget".into()));
            }
            self.queue = b.batches;
            self.queue.reverse();
            self.epoch += 1;
        }
        Ok(self.queue.pop().expect("refilled above"))
    }
}

struct PhasePlan {
    phase: Phase,
    steps: usize,
    beta: Option<f64>,
    /// `None`: fixed `fixed_lr`; `Some((warmup, peak))`: warmup and inverse square root.
    schedule: Option<(usize, f64)>,
    fixed_lr: f64,
    early_stop: bool,
    data_seed: u64,
}

fn run_phase(
    model: NatModel,
    train: &[SentencePair],
    dev: &DevSet,
    cfg: &TrainConfig,
    plan: PhasePlan,
    log: &mut MetricsLog,
) -> Result<PhaseOutcome> {
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut model = model;
    let mut adam = Adam::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut stream = BatchStream::new(train, cfg.max_tokens, plan.data_seed);
    let clamped = Cell::new(0);
    let first_step = log.last_step();
    let mut best: Option<(f64, usize, NatModel)> = None;
    let mut since_best = 0;
    let mut steps_run = 0;
    let k = model.config.k_train;
    for local in 1..=plan.steps {
        let step = first_step + local;
        let lr = match plan.schedule {
            Some((warmup, peak)) => lr_schedule(local, warmup, peak),
            None => plan.fixed_lr,
        };
        let batch = stream.next_batch()?;
        let mut g = Graph::new().with_dropout_seed(cfg.seed.wrapping_mul(7_919).wrapping_add(step as u64));
        let terms = objective(&mut g, &model, &model.params, &batch, cfg.alpha, plan.beta, k, &clamped)?;
        let (mle, len, sca, total) = terms.values(&g);
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{} loss {total} (mle {mle}, length {len}, sca {sca:?}) at lr {lr:e}", plan.phase),
            });
        }
        g.backward(terms.total)?;
        model.params.zero_grads();
        g.accumulate_param_grads(&mut model.params);
        adam.step(&mut model.params, lr);
        steps_run = local;

        let eval_now = local % cfg.eval_interval == 0 || local == plan.steps;
        let dev_bleu = if eval_now { Some(dev.bleu(&model)?) } else { None };
        if eval_now || (cfg.log_interval > 0 && local % cfg.log_interval == 0) {
            log.push(LogRow {
                step,
                phase: plan.phase,
                loss_mle: mle,
                loss_len: len,
                loss_sca: sca,
                lr,
                dev_bleu,
            })?;
        }
        if let Some(b) = dev_bleu {
            log::info!("{} step {step}: loss {total:.4}, dev BLEU {b:.2}", plan.phase);
            if best.as_ref().map_or(true, |(bb, _, _)| b > *bb) {
                best = Some((b, step, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if plan.early_stop && since_best >= cfg.patience {
                    log::info!("{} stopped early at step {step}", plan.phase);
                    break;
                }
            }
        }
    }
    if clamped.get() > 0 {
        log::warn!("{} target lengths fell outside the length predictor range", clamped.get());
    }
    let (best_bleu, best_step, model) = match best {
        Some(b) => b,
        None => (dev.bleu(&model)?, first_step + steps_run, model),
    };
    Ok(PhaseOutcome {
        model,
        best_bleu,
        best_step,
        steps_run,
        clamped_lengths: clamped.get(),
    })
}

/// Pretraining with the warmup / inverse-square-root schedule and dev-BLEU
/// early stopping.
pub fn pretrain(model: NatModel, train: &[SentencePair], dev: &DevSet, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<PhaseOutcome> {
    cfg.validate()?;
    run_phase(
        model,
        train,
        dev,
        cfg,
        PhasePlan {
            phase: Phase::Pretrain,
            steps: cfg.pretrain_steps,
            beta: None,
            schedule: Some((cfg.warmup, cfg.peak_lr)),
            fixed_lr: 0.0,
            early_stop: true,
            data_seed: cfg.seed,
        },
        log,
    )
}

/// Fine-tuning at the fixed learning rate with weight `beta` on the agreement loss.
pub fn finetune(
    model: NatModel,
    train: &[SentencePair],
    dev: &DevSet,
    cfg: &TrainConfig,
    beta: f64,
    log: &mut MetricsLog,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    run_phase(
        model,
        train,
        dev,
        cfg,
        PhasePlan {
            phase: Phase::Finetune,
            steps: cfg.finetune_steps,
            beta: Some(beta),
            schedule: None,
            fixed_lr: cfg.finetune_lr,
            early_stop: false,
            data_seed: cfg.seed.wrapping_add(1 << 32),
        },
        log,
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NatModel,
    pub pretrain: Option<PhaseOutcome>,
    pub final_phase: PhaseOutcome,
}

/// Pretrain then fine-tune, or a single joint phase when `joint_from_scratch` is set.
pub fn two_phase_train(
    model: NatModel,
    train: &[SentencePair],
    dev: &DevSet,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.joint_from_scratch {
        let joint = run_phase(
            model,
            train,
            dev,
            cfg,
            PhasePlan {
                phase: Phase::Joint,
                steps: cfg.pretrain_steps + cfg.finetune_steps,
                beta: Some(cfg.beta),
                schedule: Some((cfg.warmup, cfg.peak_lr)),
                fixed_lr: 0.0,
                early_stop: true,
                data_seed: cfg.seed,
            },
            log,
        )?;
        return Ok(TrainOutcome {
            model: joint.model.clone(),
            pretrain: None,
            final_phase: joint,
        });
    }
    let pre = pretrain(model, train, dev, cfg, log)?;
    let fine = finetune(pre.model.clone(), train, dev, cfg, cfg.beta, log)?;
    Ok(TrainOutcome {
        model: fine.model.clone(),
        pretrain: Some(pre),
        final_phase: fine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_format() {
        let row = LogRow {
            step: 3,
            phase: Phase::Pretrain,
            loss_mle: 1.5,
            loss_len: 2.0,
            loss_sca: None,
            lr: 1e-4,
            dev_bleu: None,
        };
        assert_eq!(row.to_line(), "3\tpretrain\t1.500000\t2.000000\t\t1.000000e-4\t");
    }
}
