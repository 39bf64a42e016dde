use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use snn_forge::config;
use snn_forge::runner;

#[derive(Parser)]
#[command(name = "snn-forge", version, about = "Spiking-network training and analysis runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one experiment described by a JSON config.
    ///
    /// Exit codes: 0 success, 2 usage or invalid config, 3 training
    /// divergence, 4 I/O or damaged artifact.
    Run {
        /// Path to the JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, repeatable: --set train.lr=0.05
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory, overriding the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_cmd(cli: Cli) -> snn_forge::Result<i32> {
    match cli.cmd {
        Cmd::Run { config, set, out } => {
            let sets = set
                .iter()
                .map(|s| {
                    config::parse_set_arg(s).map(|(k, v)| (k.to_string(), v.to_string()))
                })
                .collect::<snn_forge::Result<Vec<_>>>()?;
            let mut cfg = config::load_config(&config, &sets)?;
            if let Some(out) = out {
                cfg.out_dir = out.display().to_string();
            }
            let outcome = runner::run(&cfg)?;
            if let Some(msg) = outcome.summary.get("diverged").and_then(|d| d.as_str()) {
                eprintln!("diverged: {}", msg);
            }
            println!(
                "{} run complete, artifacts in {}",
                cfg.mode.as_str(),
                outcome.out_dir.display()
            );
            Ok(outcome.exit_code)
        }
    }
}

fn main() -> ExitCode {
    runner::init_thread_pool();
    let cli = Cli::parse();
    match run_cmd(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(runner::exit_code_for(&e) as u8)
        }
    }
}
