//! The two-phase training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::eval::{evaluate_params, EvalReport};
use super::log::{LogRecord, MetricsLog};
use super::optim::lr_schedule;
use super::step::{burnin_step, ssl_step, Phase, StepReport, TrainContext, TrainState};
use crate::error::{Error, Result};
use crate::model::{init_params, Checkpoint, CheckpointHeader, Vocabulary};
use crate::rng::{stream, Stream};
use crate::synthdata::{Dataset, Split};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BURNIN_CHECKPOINT: &str = "burnin.ckpt";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Adds wall-clock `time` fields to log records (breaks byte equality
    /// between runs).
    pub timestamps: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub best_val_dice: f64,
    /// 1-based epoch of the best checkpoint.
    pub best_epoch: usize,
    pub steps: u64,
}

/// Epoch and step counts of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub burnin_epochs: usize,
    pub ssl_epochs: usize,
    pub burnin_steps_per_epoch: usize,
    pub ssl_steps_per_epoch: usize,
}

impl Schedule {
    /// Burn-in epochs pass once over the labeled set. Semi-supervised epochs
    /// pass once over the unlabeled set (over the labeled set when there is
    /// none), whichever components are enabled, so ablations train for the
    /// same number of steps.
    pub fn new(config: &TrainConfig, n_labeled: usize, n_unlabeled: usize) -> Self {
        let bs = config.batch_size;
        let burnin_epochs = config.burnin_epochs();
        let ssl_source = if n_unlabeled > 0 {
            n_unlabeled
        } else {
            n_labeled
        };
        Self {
            burnin_epochs,
            ssl_epochs: config.epochs_total - burnin_epochs,
            burnin_steps_per_epoch: n_labeled.div_ceil(bs),
            ssl_steps_per_epoch: ssl_source.div_ceil(bs),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.burnin_epochs * self.burnin_steps_per_epoch
            + self.ssl_epochs * self.ssl_steps_per_epoch
    }
}

/// Endless stream of labeled indices, reshuffled on every pass.
struct LabeledCycler<'a> {
    pool: &'a [usize],
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl<'a> LabeledCycler<'a> {
    fn new(pool: &'a [usize], seed: u64) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
            pass: 0,
            seed,
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.pool.to_vec();
                // pass numbers are offset so they never collide with burn-in epochs
                let mut rng = stream(self.seed, Stream::LabeledOrder, &[1 << 32 | self.pass]);
                self.order.shuffle(&mut rng);
                self.pass += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Run<'a> {
    ctx: TrainContext<'a>,
    state: TrainState,
    log: MetricsLog,
    out_dir: PathBuf,
    schedule: Schedule,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    best: Option<(f64, usize)>,
    observer: &'a mut dyn FnMut(&LogRecord),
}

impl<'a> Run<'a> {
    fn start(
        config: &'a TrainConfig,
        data: &'a Dataset,
        out_dir: &Path,
        options: &TrainOptions,
        observer: &'a mut dyn FnMut(&LogRecord),
    ) -> Result<Self> {
        config.validate()?;
        let labeled = data.labeled(config.label_ratio)?.to_vec();
        if labeled.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no labeled samples at ratio {}",
                config.label_ratio
            )));
        }
        if data.split(Split::Val).is_empty() {
            return Err(Error::InvalidArgument("validation split is empty".into()));
        }
        let unlabeled = data.unlabeled(config.label_ratio)?;
        let vocab = Vocabulary::from_corpus(data.train_texts());
        let ctx = TrainContext::new(config, data, vocab)?;
        let mut rng = stream(config.seed, Stream::Init, &[]);
        let student = init_params(&mut rng, &ctx.model)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log = MetricsLog::create(&out_dir.join(METRICS_LOG), options.timestamps)?;
        Ok(Self {
            schedule: Schedule::new(config, labeled.len(), unlabeled.len()),
            ctx,
            state: TrainState::new(student),
            log,
            out_dir: out_dir.to_path_buf(),
            labeled,
            unlabeled,
            best: None,
            observer,
        })
    }

    fn record(&mut self, r: LogRecord) -> Result<()> {
        self.log.write(&r)?;
        (self.observer)(&r);
        Ok(())
    }

    fn lr(&self) -> Result<f64> {
        let c = self.ctx.config;
        lr_schedule(
            self.state.step as usize,
            self.schedule.total_steps(),
            c.lr_max,
            c.lr_min,
        )
    }

    fn log_step(&mut self, epoch: usize, lr: f64, report: StepReport) -> Result<()> {
        let l = report.losses;
        self.record(LogRecord::Step {
            epoch,
            step: self.state.step,
            phase: self.state.phase,
            lr,
            sup: l.sup,
            unsup: l.unsup,
            itcl_sup: l.itcl_sup,
            itcl_unsup: l.itcl_unsup,
            total: l.total,
            n_mixed: report.n_mixed,
        })
    }

    fn burnin_epochs(&mut self) -> Result<()> {
        let bs = self.ctx.config.batch_size;
        for e in 0..self.schedule.burnin_epochs {
            let mut order = self.labeled.clone();
            order.shuffle(&mut stream(
                self.ctx.config.seed,
                Stream::LabeledOrder,
                &[e as u64],
            ));
            for batch in order.chunks(bs) {
                let lr = self.lr()?;
                let report = burnin_step(&mut self.state, &self.ctx, batch, lr)?;
                self.log_step(e + 1, lr, report)?;
            }
            self.validate(e + 1)?;
        }
        Ok(())
    }

    fn ssl_epochs(&mut self) -> Result<()> {
        let c = self.ctx.config;
        let bs = c.batch_size;
        let labeled = self.labeled.clone();
        let mut cycler = LabeledCycler::new(&labeled, c.seed);
        let first = self.schedule.burnin_epochs;
        for e in first..first + self.schedule.ssl_epochs {
            let mut order = self.unlabeled.clone();
            order.shuffle(&mut stream(c.seed, Stream::UnlabeledOrder, &[e as u64]));
            for s in 0..self.schedule.ssl_steps_per_epoch {
                let unl: &[usize] = if order.is_empty() {
                    &[]
                } else {
                    &order[s * bs..((s + 1) * bs).min(order.len())]
                };
                let n = if unl.is_empty() {
                    bs.min(labeled.len())
                } else {
                    unl.len()
                };
                let lab = cycler.take(n);
                let lr = self.lr()?;
                let report = ssl_step(&mut self.state, &self.ctx, &lab, unl, lr)?;
                self.log_step(e + 1, lr, report)?;
            }
            self.validate(e + 1)?;
        }
        Ok(())
    }

    fn evaluate_split(&self, split: Split) -> Result<EvalReport> {
        let ctx = &self.ctx;
        evaluate_params(
            &self.state.student,
            &ctx.model,
            ctx.data,
            ctx.data.split(split),
            |i| ctx.tokens[i].clone(),
        )
    }

    fn validate(&mut self, epoch: usize) -> Result<()> {
        let report = self.evaluate_split(Split::Val)?;
        self.record(LogRecord::Val {
            epoch,
            step: self.state.step,
            val_dice: report.mean_dice,
            val_miou: report.miou,
        })?;
        if self.best.is_none_or(|(d, _)| report.mean_dice > d) {
            self.best = Some((report.mean_dice, epoch));
            self.save(BEST_CHECKPOINT)?;
        }
        Ok(())
    }

    fn save(&self, name: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let header = CheckpointHeader {
            format_version: crate::model::checkpoint::FORMAT_VERSION,
            config: serde_json::to_value(self.ctx.config).expect("config serializes"),
            step: self.state.step,
            vocabulary: self.ctx.vocab.words().to_vec(),
            model: self.ctx.model.clone(),
        };
        Checkpoint {
            header,
            student: self.state.student.clone(),
            teacher: self.state.teacher.clone(),
        }
        .save(&path)?;
        Ok(path)
    }

    fn outcome(&self, final_checkpoint: PathBuf) -> TrainOutcome {
        let (best_val_dice, best_epoch) = self.best.unwrap_or((f64::NAN, 0));
        TrainOutcome {
            best_checkpoint: self.out_dir.join(BEST_CHECKPOINT),
            final_checkpoint,
            metrics_log: self.log.path().to_path_buf(),
            best_val_dice,
            best_epoch,
            steps: self.state.step,
        }
    }
}

/// Burn-in followed by teacher-student training. Writes the metrics log,
/// the best-validation and the final checkpoint into `out_dir`.
pub fn train(config: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    train_with(config, data, out_dir, &TrainOptions::default(), &mut |_| {})
}

/// [`train`] with options and a callback that sees every log record.
pub fn train_with(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    options: &TrainOptions,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let mut run = Run::start(config, data, out_dir, options, observer)?;
    run.burnin_epochs()?;
    run.state.start_ssl()?;
    run.ssl_epochs()?;
    let final_path = run.save(FINAL_CHECKPOINT)?;
    Ok(run.outcome(final_path))
}

/// Runs only the burn-in epochs and saves the resulting student (with its
/// teacher copy) as `burnin.ckpt`.
pub fn burnin(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    options: &TrainOptions,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<(TrainState, TrainOutcome)> {
    let mut run = Run::start(config, data, out_dir, options, observer)?;
    run.burnin_epochs()?;
    run.state.start_ssl()?;
    debug_assert_eq!(run.state.phase, Phase::Ssl);
    let path = run.save(BURNIN_CHECKPOINT)?;
    let outcome = run.outcome(path);
    Ok((run.state, outcome))
}
