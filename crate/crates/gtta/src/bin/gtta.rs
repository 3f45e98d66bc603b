use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtta::harness::{preset, run_experiment, summarize_dir, ExperimentConfig, PRESET_NAMES};

#[derive(Parser)]
#[command(name = "gtta", about = "Gradual test-time adaptation toy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config or a named preset
    Run {
        /// path to an experiment config (JSON)
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// named preset instead of a config file
        #[arg(long, value_parser = PRESET_NAMES)]
        preset: Option<String>,
        /// override the seed list, e.g. --seeds 0,1,2
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// output directory for JSON reports and results.csv
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Summarize a results directory produced by `run`
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> gtta::Result<()> {
    match cli.command {
        Command::Run {
            config,
            preset: preset_name,
            seeds,
            out,
        } => {
            let mut cfg = match (config, preset_name) {
                (Some(path), None) => ExperimentConfig::from_json_file(&path)?,
                (None, Some(name)) => preset(&name)?,
                _ => unreachable!("clap enforces exactly one source"),
            };
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            cfg.validate()?;
            println!("experiment '{}': {} methods, {} seeds", cfg.name, cfg.methods.len(), cfg.seeds.len());
            std::fs::create_dir_all(&out)?;
            cfg.to_json_file(&out.join("config.json"))?;
            let table = run_experiment(&cfg, Some(&out))?;
            println!("wrote {} rows to {}", table.rows.len(), out.join("results.csv").display());
            for m in table.methods() {
                println!("{m:<28} mean error {:6.2}%", table.mean_error(&m).unwrap());
            }
            Ok(())
        }
        Command::Report { input } => {
            print!("{}", summarize_dir(&input)?);
            Ok(())
        }
    }
}
