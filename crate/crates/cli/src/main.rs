use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lungref::synthdata::{self, load_dataset, SampleSpec, Split};
use lungref::trainer::{self, ablation_ladder, evaluate, LogRecord, TrainConfig, TrainOptions};

mod augshow;

/// Semi-supervised referring segmentation on synthetic chest images.
#[derive(Parser)]
#[command(name = "lungref", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 40)]
        n_val: usize,
        #[arg(long, default_value_t = 40)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run only the labeled burn-in phase.
    Burnin(TrainArgs),
    /// Burn-in followed by teacher-student training.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report file (defaults to `eval_<split>.jsonl` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for uniformity; evaluation is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write weak/strong/mixed views and caption edits for inspection.
    Augshow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config supplying block_size, delta_gate, rho and use_posaug.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the five-row component ladder and tabulate test scores.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `label_ratio` from the config.
    #[arg(long)]
    label_ratio: Option<f64>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated components to disable: ema, posaug, tpatchmix, itcl, all.
    #[arg(long)]
    ablate: Option<String>,
    /// Add wall-clock times to the metrics log.
    #[arg(long)]
    timestamps: bool,
    /// Do not print per-step progress.
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::load(&self.config)?;
        if let Some(r) = self.label_ratio {
            c.label_ratio = r;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(list) = &self.ablate {
            c.disable(list)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn progress(quiet: bool) -> impl FnMut(&LogRecord) {
    move |r: &LogRecord| match r {
        LogRecord::Val {
            epoch,
            val_dice,
            val_miou,
            ..
        } => {
            println!("epoch {epoch:>3}  val dice {val_dice:.4}  miou {val_miou:.4}")
        }
        LogRecord::Step {
            step,
            phase,
            total,
            n_mixed,
            ..
        } if !quiet && step % 10 == 0 => {
            println!("  step {step:>5} {phase:?} loss {total:.4} mixed {n_mixed}")
        }
        _ => {}
    }
}

fn gen_data(out: &Path, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<()> {
    let manifest =
        synthdata::generate_dataset(seed, n_train, n_val, n_test, out, &SampleSpec::default())?;
    println!("{}", out.join(synthdata::MANIFEST).display());
    println!("samples: {}", manifest.sample_count());
    for (ratio, ids) in manifest.subsets() {
        println!("ratio {ratio}: {} labeled", ids.len());
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs, burnin_only: bool) -> Result<()> {
    let config = args.config()?;
    let data = load_dataset(&args.data)?;
    let options = TrainOptions {
        timestamps: args.timestamps,
    };
    let mut observer = progress(args.quiet);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.json"), config.to_json())
        .with_context(|| format!("writing config into {}", args.out.display()))?;
    let outcome = if burnin_only {
        trainer::burnin(&config, &data, &args.out, &options, &mut observer)?.1
    } else {
        trainer::train_with(&config, &data, &args.out, &options, &mut observer)?
    };
    println!(
        "best val dice {:.4} at epoch {} -> {}",
        outcome.best_val_dice,
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    println!("metrics log {}", outcome.metrics_log.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let split = Split::parse(split)?;
    let data = load_dataset(data)?;
    let report = evaluate(ckpt, &data, split)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.jsonl", split.name())),
    };
    std::fs::write(&path, report.to_jsonl())
        .with_context(|| format!("writing {}", path.display()))?;
    println!("mean_dice {:.4}", report.mean_dice);
    println!("miou {:.4}", report.miou);
    println!("(two empty masks count as a perfect match)");
    println!("report {}", path.display());
    Ok(())
}

fn ablate_cmd(
    data: &Path,
    config: &Path,
    out: &Path,
    ratio: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut base = TrainConfig::load(config)?;
    if let Some(r) = ratio {
        base.label_ratio = r;
    }
    if let Some(s) = seed {
        base.seed = s;
    }
    base.validate()?;
    let data = load_dataset(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    for (i, (name, c)) in ablation_ladder(&base).into_iter().enumerate() {
        println!("== {name}");
        let dir = out.join(format!("row{i}"));
        let outcome = trainer::train_with(
            &c,
            &data,
            &dir,
            &TrainOptions::default(),
            &mut progress(true),
        )?;
        let report = evaluate(&outcome.best_checkpoint, &data, Split::Test)?;
        println!(
            "{name}: test dice {:.4} miou {:.4}",
            report.mean_dice, report.miou
        );
        rows.push((name, c, report));
    }
    let mut table = String::from("| Row | T-S EMA | PosAug | T-PatchMix | ITCL | Dice | mIoU |\n");
    table.push_str("|---|---|---|---|---|---|---|\n");
    let mut jsonl = String::new();
    let mark = |b: bool| if b { "x" } else { "" };
    for (name, c, r) in &rows {
        table.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {:.4} | {:.4} |\n",
            mark(c.use_ema_ssl),
            mark(c.use_posaug),
            mark(c.use_tpatchmix),
            mark(c.use_itcl),
            r.mean_dice,
            r.miou
        ));
        let rec = serde_json::json!({
            "row": name,
            "use_ema_ssl": c.use_ema_ssl,
            "use_posaug": c.use_posaug,
            "use_tpatchmix": c.use_tpatchmix,
            "use_itcl": c.use_itcl,
            "test_dice": r.mean_dice,
            "test_miou": r.miou,
        });
        jsonl.push_str(&rec.to_string());
        jsonl.push('\n');
    }
    let md = out.join("ablation.md");
    std::fs::write(&md, &table).with_context(|| format!("writing {}", md.display()))?;
    let js = out.join("ablation.jsonl");
    std::fs::write(&js, jsonl).with_context(|| format!("writing {}", js.display()))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n_train,
            n_val,
            n_test,
            seed,
        } => gen_data(&out, n_train, n_val, n_test, seed),
        Command::Burnin(args) => train_cmd(&args, true),
        Command::Train(args) => train_cmd(&args, false),
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            ..
        } => eval_cmd(&ckpt, &data, &split, out.as_deref()),
        Command::Augshow {
            data,
            out,
            n,
            seed,
            config,
        } => {
            let config = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let data = load_dataset(&data)?;
            let s = augshow::run(&data, &config, n, seed, &out)?;
            println!(
                "wrote {} samples ({} mixed) to {}",
                s.written,
                s.applied,
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            data,
            config,
            out,
            label_ratio,
            seed,
        } => ablate_cmd(&data, &config, &out, label_ratio, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err.chain().any(|e| {
                e.downcast_ref::<lungref::Error>()
                    .is_some_and(lungref::Error::is_numerical)
            });
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}
