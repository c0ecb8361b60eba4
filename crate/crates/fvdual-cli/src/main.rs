use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use fvdual_cli::config::EXPERIMENT_KINDS;
use fvdual_cli::runner::{all_passed, summary_table};
use fvdual_cli::{parse_config, run, write_reports, Overrides};

/// Run duality and ergodicity experiments described by a TOML config.
#[derive(Parser, Debug)]
#[command(name = "fvdual", version)]
struct Args {
    /// Experiment config file.
    #[arg(required_unless_present = "list_experiments")]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker count (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Run only experiments whose id contains this text or whose kind equals it.
    #[arg(long)]
    filter: Option<String>,
    /// Print the registered experiment kinds and exit.
    #[arg(long)]
    list_experiments: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_experiments {
        for (kind, about) in EXPERIMENT_KINDS {
            println!("{kind:<16} {about}");
        }
        return ExitCode::SUCCESS;
    }
    match execute(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(args: Args) -> anyhow::Result<bool> {
    let path = args.config.expect("clap requires a config path");
    let mut config = parse_config(&path)?;
    Overrides { seed: args.seed, workers: args.workers, outdir: args.outdir, filter: args.filter }.apply(&mut config)?;
    let start = Instant::now();
    let outcomes = run(&config)?;
    let written = write_reports(&config, &outcomes)?;
    print!("{}", summary_table(&outcomes));
    println!("total runtime {:.2}s", start.elapsed().as_secs_f64());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(all_passed(&outcomes))
}
