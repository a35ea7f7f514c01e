//! `memaudit`: command-line driver for the membership-inference audit pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use memaudit::par::Exec;
use memaudit::pipeline::{self, Layout, PipelineConfig};
use memaudit::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "memaudit",
    version,
    about = "Shadow-model membership-inference audit of vulnerability classifiers"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Pipeline config (TOML); omitted keys keep their reference values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Feed raw features to the attack models.
    #[arg(long, global = true)]
    no_normalize: bool,
    /// Attack repeats per grid cell.
    #[arg(long, global = true, value_name = "N")]
    repeats: Option<usize>,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Partition the corpus into shadow/target × member/non-member.
    Split,
    /// Train the shadow and target surrogate classifiers.
    TrainVp,
    /// Extract logits, confidence, loss and embeddings for every subset.
    Extract,
    /// Apply every configured defense to the balanced records.
    Defend,
    /// Train and evaluate the attack grid.
    Attack,
    /// Collect grid results and distributions into the report.
    Evaluate,
    /// Render the report table.
    Report,
    /// Run every stage in order.
    RunAll,
}

const DEFAULT_OUT: &str = "memaudit-out";

fn resolve(g: &Global) -> Result<(PipelineConfig, PathBuf)> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::reference(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.no_normalize {
        cfg.normalize = false;
    }
    if let Some(r) = g.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    let out = g
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok((cfg, out))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, out) = resolve(&cli.global)?;
    let exec = if cli.global.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let lay = Layout::new(&out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    match cli.command {
        Command::Synth => {
            let samples = pipeline::stage_synth(&cfg, &lay)?;
            println!("{} samples -> {}", samples.len(), lay.corpus().display());
        }
        Command::Split => {
            let plan = pipeline::stage_split(&cfg, &lay)?;
            println!(
                "shadow {}+{}, target {}+{} -> {}",
                plan.shadow_member.len(),
                plan.shadow_nonmember.len(),
                plan.target_member.len(),
                plan.target_nonmember.len(),
                lay.plan().display()
            );
        }
        Command::TrainVp => {
            for s in pipeline::stage_train_vp(&cfg, &lay, exec)? {
                println!(
                    "{}: train acc {:.4} f1 {:.4} | held-out acc {:.4} f1 {:.4} | {} epochs",
                    s.role, s.train.accuracy, s.train.f1, s.test.accuracy, s.test.f1, s.epochs
                );
            }
        }
        Command::Extract => {
            pipeline::stage_extract(&cfg, &lay, exec)?;
            println!("records -> {}", out.join("records").display());
        }
        Command::Defend => {
            for s in pipeline::stage_defend(&cfg, &lay, exec)? {
                println!(
                    "{}: {} records, {} flagged, {} argmax changed",
                    s.defense, s.records, s.flagged, s.argmax_changed
                );
            }
        }
        Command::Attack => {
            let cells = pipeline::stage_attack(&cfg, &lay, exec)?;
            println!("{} grid cells -> {}", cells.len(), out.join("grid").display());
        }
        Command::Evaluate => {
            let report = pipeline::stage_evaluate(&cfg, &lay)?;
            println!("{} rows -> {}", report.rows.len(), lay.report_tsv().display());
        }
        Command::Report => print!("{}", pipeline::stage_report(&lay)?),
        Command::RunAll => {
            pipeline::run_all(&cfg, &out, exec)?;
            print!(
                "{}",
                std::fs::read_to_string(lay.report_txt()).map_err(|e| Error::io(lay.report_txt(), e))?
            );
        }
    }
    info!("done: {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
