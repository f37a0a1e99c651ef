use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semi_core::config::ExperimentConfig;
use semi_core::eval::{HeldOut, Method};
use semi_core::pipeline::{self, Layout};
use semi_core::{Exec, Result};

/// Few-shot modality integration with hypernetwork-generated adapters.
#[derive(Parser, Debug)]
#[command(name = "semi", version)]
struct Cli {
    /// TOML experiment config; defaults apply to absent keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage2.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; defaults to $SEMI_OUT, then `runs`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Run grid cells on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the decoder if needed, then the shared projector.
    Stage1,
    /// Train the hypernetwork against the saved projector.
    Stage2,
    /// Adapt to one held-out encoder with one method.
    Adapt {
        /// SEMI, FT-Projector, Projector or LoRA.
        #[arg(long, default_value = "SEMI")]
        method: String,
        #[arg(long, default_value_t = 3)]
        modality: usize,
        #[arg(long, default_value_t = 64)]
        enc_dim: usize,
        #[arg(long, default_value_t = 5000)]
        encoder_seed: u64,
        #[arg(long, default_value_t = 8)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full method x shots x seeds grid.
    Benchmark,
    /// Train and score every configured hypernetwork variant.
    Ablate,
    /// Print the effective config as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            semi_core::SemiError::Config(format!("cannot read {}: {e}", path.display()))
        })?,
        None => String::new(),
    };
    ExperimentConfig::from_toml_with_overrides(&text, &cli.overrides)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(cli.out.clone().unwrap_or_else(pipeline::default_out_dir));
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::Stage1 => {
            pipeline::cmd_stage1(&cfg, &layout)?;
            println!("projector saved to {}", layout.projector().display());
        }
        Command::Stage2 => {
            let out = pipeline::cmd_stage2(&cfg, &layout)?;
            println!(
                "hypernetwork saved to {}; validation loss {:.4} -> {:.4}",
                layout.hypernet().display(),
                out.summary.initial_val_loss,
                out.summary.final_val_loss
            );
        }
        Command::Adapt {
            method,
            modality,
            enc_dim,
            encoder_seed,
            shots,
            seed,
        } => {
            let held = HeldOut {
                modality: *modality,
                enc_dim: *enc_dim,
                seed: *encoder_seed,
            };
            let rec = pipeline::cmd_adapt(&cfg, &layout, Method::parse(method)?, &held, *shots, *seed)?;
            println!("{}", semi_core::eval::METRICS_HEADER);
            println!("{}", rec.row.csv_line(true));
        }
        Command::Benchmark => {
            let report = pipeline::cmd_benchmark(&cfg, &layout, exec)?;
            print!("{}", report.csv());
        }
        Command::Ablate => {
            let rows = pipeline::cmd_ablate(&cfg, &layout, exec)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
