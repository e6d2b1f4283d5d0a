//! Command-line front end: `train`, `eval`, `verify-theory`, `report`.
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, bad config,
//! invalid arguments), 2 runtime failure (I/O, malformed files, divergence).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{self, evaluate, Trainer};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "BITSNN_OUT";
const DEFAULT_OUT: &str = "bitsnn-out";

#[derive(Debug, Parser)]
#[command(name = "bitsnn", version, about = "Bit-adaptive multi-bit spiking network training", after_long_help = Config::describe_keys())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Print per-epoch progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, logs and a cost report.
    #[command(after_long_help = Config::describe_keys())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the quantization-error theory checks.
    VerifyTheory(TheoryArgs),
    /// Print the cost summary row of a checkpoint.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $BITSNN_OUT or ./bitsnn-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override `train_harness.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint manifest.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Images (IDX) or CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// IDX labels; inferred from the image file name when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Where to write the cost report (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Monte Carlo samples per claim.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation data; adds NS-ACE and Top-1 to the row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.verbose),
        Command::Eval(a) => cmd_eval(a),
        Command::VerifyTheory(a) => cmd_theory(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn out_dir(given: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = given
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_record(dir: &Path, command: &str, config_text: &str, seed: Option<u64>, extra: serde_json::Value) -> Result<()> {
    let record = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config_sha256": hex::encode(Sha256::digest(config_text.as_bytes())),
        "seed": seed,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "result": extra,
    });
    write(&dir.join("run.json"), &serde_json::to_string_pretty(&record)?)
}

fn load_for(model: &Model, path: &Path, labels: Option<&Path>) -> Result<Dataset> {
    data::load(path, labels, model.spec.input, model.classes())
}

fn cmd_train(a: &TrainArgs, verbose: u8) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = a.seed {
        cfg.train_harness.seed = s;
    }
    let spec = cfg.model_spec()?;
    let tc = cfg.train_config()?;
    let dir = out_dir(&a.out)?;
    let h = &cfg.train_harness;
    let labels = (!h.train_labels.is_empty()).then(|| PathBuf::from(&h.train_labels));
    let train_set = data::load(Path::new(&h.train_data), labels.as_deref(), spec.input, spec.classes)?;
    let test_set = match cfg.test_data() {
        Some((d, l)) => Some(data::load(&d, (!l.as_os_str().is_empty()).then_some(l.as_path()), spec.input, spec.classes)?),
        None => None,
    };

    let model = Model::new(spec, tc.seed)?;
    let mut trainer = Trainer::new(model, tc.clone())?;
    while trainer.epoch < tc.epochs {
        let log = trainer.train_epoch(&train_set, test_set.as_ref())?;
        if verbose > 0 {
            eprintln!(
                "epoch {:>3} loss {:.4} reg {:.4} W/S/T {:.2}/{:.2}/{:.2} acc {:.4}",
                log.epoch, log.task_loss, log.reg_loss, log.b_w, log.b_s, log.t, log.accuracy
            );
        }
    }

    let ckpt = dir.join("checkpoint.json");
    Checkpoint::from_trainer(&trainer).save(&ckpt)?;
    write(&dir.join("train_log.csv"), &train::epoch_log_csv(&trainer.log))?;
    write(&dir.join("renewal_events.csv"), &train::renewal_events_csv(&trainer.events))?;
    write(&dir.join("bits_trajectory.csv"), &train::trajectory_csv(&trainer.trajectory))?;
    write(&dir.join("allocation.csv"), &train::allocation_csv(&trainer.model))?;
    let ev = evaluate(&trainer.model, test_set.as_ref().unwrap_or(&train_set), tc.eval_batch_size)?;
    ev.cost.write_json(&dir.join("cost_report.json"))?;
    ev.cost.write_csv(&dir.join("cost_report.csv"))?;
    let config_text = cfg.to_toml();
    write(&dir.join("config.toml"), &config_text)?;
    write_run_record(
        &dir,
        "train",
        &config_text,
        Some(tc.seed),
        json!({ "accuracy": ev.accuracy, "epochs": trainer.epoch, "steps": trainer.step }),
    )?;
    println!("accuracy {:.4}", ev.accuracy);
    println!("{}", ev.cost.table_row(Some(ev.accuracy), true));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = load_for(&ck.model, &a.data, a.labels.as_deref())?;
    let ev = evaluate(&ck.model, &ds, a.batch_size)?;
    let dir = match &a.out {
        Some(_) => out_dir(&a.out)?,
        None => a.ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    ev.cost.write_json(&dir.join("eval_cost_report.json"))?;
    ev.cost.write_csv(&dir.join("eval_cost_report.csv"))?;
    println!("accuracy {:.4} ({}/{})", ev.accuracy, ev.correct, ev.total);
    Ok(())
}

fn cmd_theory(a: &TheoryArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let dir = out_dir(&a.out)?;
    let claims = crate::theory::verify_all(a.samples, a.seed)?;
    let csv = crate::theory::claims_to_csv(&claims);
    write(&dir.join("theory.csv"), &csv)?;
    print!("{csv}");
    let failed = claims.iter().filter(|c| !c.pass).count();
    write_run_record(
        &dir,
        "verify-theory",
        &format!("samples={} seed={}", a.samples, a.seed),
        Some(a.seed),
        json!({ "claims": claims.len(), "failed": failed }),
    )?;
    if failed > 0 {
        return Err(Error::Data(format!("{failed} of {} theory claims failed", claims.len())));
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let row = match &a.data {
        Some(d) => {
            let ds = load_for(&ck.model, d, a.labels.as_deref())?;
            let ev = evaluate(&ck.model, &ds, 128)?;
            ev.cost.table_row(Some(ev.accuracy), true)
        }
        None => {
            let none = vec![(0, 0); ck.model.spiking_layers()];
            ck.model.cost_report(&none)?.table_row(None, false)
        }
    };
    println!("{row}");
    Ok(())
}
