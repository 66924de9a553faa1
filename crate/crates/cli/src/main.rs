use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selftransfer::data::{ensure_normalized, read_dataset};
use selftransfer::datagen::build_case_study;
use selftransfer::net::{load_checkpoint, save_checkpoint, Checkpoint, DanTr};
use selftransfer::orchestrator::{run_framework, FrameworkData, RunConfig};
use selftransfer::report::{report_run, summary_table};
use selftransfer::train::{evaluate_mse, train_dantr, train_supervised, MetricRecord, TrainConfig};
use selftransfer::{Error, Result};

#[derive(Parser)]
#[command(name = "selftransfer", version, about = "Iterative self-transfer learning for sequence surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic case-study datasets described by a run config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `data.case_study.master_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model: a surrogate on the target set (or `--train`), or a
    /// transfer network between `--source` and the target set.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Labeled dataset to train the surrogate on instead of the target set.
        #[arg(long, conflicts_with = "source")]
        train: Option<PathBuf>,
        /// Pseudo-labeled source dataset; selects transfer training.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a labeled dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run (or resume) the whole framework; the run lives in `<out>/seed-<master_seed>`.
    Iterate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `framework.master_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write tables (and with `--plots`, figures) for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        plots: bool,
        /// Output directory; defaults to `<run>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of validation samples to overlay with `--plots`.
        #[arg(long, default_value_t = 3)]
        overlays: usize,
    },
}

fn write_history(path: &Path, history: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in history {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?.data.case_study;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let cs = build_case_study(&cfg)?;
    cs.write(out)?;
    println!(
        "wrote {}: train {} target {} validation {} test {} unlabeled {}",
        out.display(),
        cs.train.len(),
        cs.target.len(),
        cs.validation.len(),
        cs.test.len(),
        cs.unlabeled.len()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, train_set: Option<&Path>, source: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = FrameworkData::load(&cfg.data)?;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let ckpt = out.join("model.ckpt");
    match source {
        None => {
            let train = match train_set {
                Some(p) => ensure_normalized(read_dataset(p)?)?,
                None => data.target.clone(),
            };
            let tcfg = TrainConfig {
                seed: seed.unwrap_or(cfg.direct_train().seed),
                ..cfg.direct_train().clone()
            };
            let outcome = train_supervised(&cfg.surrogate.block()?, &train, &data.validation, &tcfg, None)?;
            let (model, val) = outcome.labeler(&tcfg);
            save_checkpoint(&ckpt, &Checkpoint::from_network(model).with_meta("val_mse", val))?;
            write_history(&out.join("metrics.jsonl"), &outcome.history)?;
            println!("val_mse {val:e}\ncheckpoint {}", ckpt.display());
        }
        Some(src) => {
            let source = ensure_normalized(read_dataset(src)?)?;
            let net = DanTr::new(cfg.dantr.clone())?;
            let tcfg = TrainConfig {
                seed: seed.unwrap_or(cfg.train_dantr.seed),
                ..cfg.train_dantr.clone()
            };
            let outcome = train_dantr(&net, &source, &data.target, &data.validation, &tcfg, &cfg.transfer, None)?;
            let (_, val) = outcome.labeler(&net, &tcfg)?;
            let params = match (&outcome.teacher, tcfg.teacher_labels) {
                (Some(t), true) => t,
                _ => &outcome.params,
            };
            save_checkpoint(&ckpt, &Checkpoint::from_dantr(&net, params).with_meta("val_mse", val))?;
            write_history(&out.join("metrics.jsonl"), &outcome.history)?;
            println!("target_val_mse {val:e}\ncheckpoint {}", ckpt.display());
        }
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, dataset: &Path) -> Result<()> {
    let net = load_checkpoint(checkpoint, None)?.surrogate()?;
    let ds = ensure_normalized(read_dataset(dataset)?)?;
    let mse = evaluate_mse(&net, &ds)?;
    println!("mse {mse:e}\nsamples {}", ds.len());
    Ok(())
}

fn iterate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.framework.master_seed = s;
    }
    let dir = out.join(format!("seed-{}", cfg.framework.master_seed));
    let data = FrameworkData::load(&cfg.data)?;
    let rec = run_framework(&dir, cfg, data)?;
    print!("{}", summary_table(&dir)?);
    if let Some(m) = rec.model_l {
        println!("model_l {}", dir.join(m).display());
    }
    Ok(())
}

fn report(run: &Path, plots: bool, out: Option<PathBuf>, overlays: usize) -> Result<()> {
    let out = out.unwrap_or_else(|| run.join("report"));
    let files = report_run(run, &out, plots, overlays)?;
    println!("{}", files.summary.display());
    if let Some(p) = files.reduction_plot {
        println!("{}", p.display());
    }
    for p in files.predictions {
        println!("{} (mse {:e})", p.path.display(), p.mse);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed),
        Command::Train {
            config,
            out,
            train: train_set,
            source,
            seed,
        } => train(&config, &out, train_set.as_deref(), source.as_deref(), seed),
        Command::Evaluate { checkpoint, dataset } => evaluate(&checkpoint, &dataset),
        Command::Iterate { config, out, seed } => iterate(&config, &out, seed),
        Command::Report {
            run,
            plots,
            out,
            overlays,
        } => report(&run, plots, out, overlays),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
