use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use xferbench::runner::{self, ExperimentConfig, RunManifest};

#[derive(Parser)]
#[command(name = "xferbench", version, about = "Cross-task transfer experiments for text-to-text NLI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configured experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact root; defaults to $XFERBENCH_OUT, then ./runs.
        #[arg(long, env = "XFERBENCH_OUT")]
        out: Option<PathBuf>,
    },
    /// Regular / hypothesis-only / premise-only runs of one config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "XFERBENCH_OUT")]
        out: Option<PathBuf>,
    },
    /// Accuracy table and per-type deltas across completed runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        manifests: Vec<PathBuf>,
    },
    /// Re-evaluate a saved checkpoint on a JSONL file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the config JSON schema.
    Schema,
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let root = out.unwrap_or_else(runner::default_out_root);
            let m = runner::run_experiment(&cfg, &root)?;
            let r = m.report.as_ref().context("completed run without report")?;
            println!("{}", root.join(&m.run_name).display());
            print!("{}", r.to_csv(&m.setting)?);
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let root = out.unwrap_or_else(runner::default_out_root);
            let res = runner::run_bias_ablation(&cfg, &root)?;
            println!("{}", res.dir.display());
            print!("{}", res.csv);
        }
        Command::Compare { manifests } => {
            let loaded = manifests
                .iter()
                .map(RunManifest::load)
                .collect::<Result<Vec<_>, _>>()?;
            let table = runner::emit_comparison(&loaded)?;
            print!("{}", table.to_csv()?);
            if !table.type_deltas.is_empty() {
                println!();
                print!("{}", table.type_delta_csv()?);
            }
        }
        Command::Evaluate { checkpoint, data } => {
            let (report, _) = runner::evaluate_checkpoint(&checkpoint, &data)?;
            println!("{}", report.to_json());
        }
        Command::Schema => print!("{}", runner::CONFIG_SCHEMA),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
