use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ezvsl::config::Config;
use ezvsl::pipeline::{self, SweepAxis, Workdir};
use ezvsl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ezvsl", version, about = "Sound source localization on a synthetic shape-tone world")]
struct Cli {
    /// Directory holding data/, checkpoints/ and reports/.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate every dataset split under data/.
    Generate {
        /// Replace an existing non-empty data/ directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the objectness network on the objects split.
    PretrainObjectness,
    /// Contrastive audio-visual training.
    Train,
    /// Score the trained model on a test split.
    Evaluate {
        #[arg(long, default_value = "test_heard")]
        split: String,
        /// Also report the random-map and oracle baselines.
        #[arg(long)]
        baselines: bool,
    },
    /// Evaluate across values of one setting.
    Sweep {
        /// alpha, dim, tau or strategy.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "test_heard")]
        split: String,
    },
    /// Dump the maps of one sample.
    Localize {
        #[arg(long, default_value = "test_heard")]
        split: String,
        #[arg(long)]
        index: usize,
        /// Output stem relative to the work directory; `.ezvl` and `.pgm` are added.
        #[arg(long, default_value = "maps/sample")]
        out: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{o}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.apply_env()?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli)?;
    let wd = Workdir::new(&cli.workdir);
    match cli.command {
        Command::Generate { force } => {
            let splits = pipeline::cmd_generate(&wd, &config, force)?;
            for s in splits {
                println!("{}: {} samples, classes {:?}", s.name, s.samples.len(), s.classes);
            }
        }
        Command::PretrainObjectness => {
            let out = pipeline::cmd_pretrain(&wd, &config)?;
            println!(
                "objectness loss {:.4} -> {:.4}, held-out accuracy {:.3}",
                out.report.initial_loss,
                out.report.curve.last().copied().unwrap_or(f64::NAN),
                out.held_out_accuracy
            );
        }
        Command::Train => {
            let out = pipeline::cmd_train(&wd, &config)?;
            if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
                println!("loss {:.4} -> {:.4} over {} epochs", first.total, last.total, out.curve.len());
            }
            println!("checkpoint {}", wd.model_checkpoint().display());
        }
        Command::Evaluate { split, baselines } => {
            let report = pipeline::cmd_evaluate(&wd, &config, &split)?;
            print!("{}", report.to_table());
            if baselines {
                let b = pipeline::cmd_baselines(&wd, &config, &split)?;
                println!(
                    "random baseline {:.4} +- {:.4} ({} runs), oracle {:.4}",
                    b.random_mean, b.random_sd, config.baseline_runs, b.oracle
                );
            }
        }
        Command::Sweep { axis, values, split } => {
            let rows = pipeline::cmd_sweep(&wd, &config, axis, &values, &split)?;
            print!("{}", pipeline::sweep_csv(axis, &rows));
        }
        Command::Localize { split, index, out } => {
            let path = pipeline::cmd_localize(&wd, &config, &split, index, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
