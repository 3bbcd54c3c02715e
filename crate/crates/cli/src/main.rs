use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metatta_core::harness::{
    cmd_ablate, cmd_adapt, cmd_gen_data, cmd_report, cmd_sweep_beta, cmd_train, summary_table, RunConfig, RunSummary,
};
use metatta_core::Error;

#[derive(Parser)]
#[command(name = "metatta", version, about = "Meta-learned online test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint per seed.
    Train(RunArgs),
    /// Adapt on the test streams and write per-seed result files.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint manifest; defaults to the one `train` writes per seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the test-time learning rate.
    SweepBeta {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the ablation variants.
    Ablate(RunArgs),
    /// Aggregate the result files under a directory.
    Report {
        /// Directory holding result files (searched recursively).
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured datasets in the binary format.
    GenData(RunArgs),
}

fn load(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summaries(rows: &[RunSummary]) {
    let named: Vec<(String, &RunSummary)> = rows.iter().map(|r| (r.label.clone(), r)).collect();
    print!("{}", summary_table("method", &named));
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            for t in cmd_train(&cfg)? {
                println!("seed {}: {} sha256 {}", t.seed, t.checkpoint.display(), t.sha256);
            }
        }
        Command::Adapt { run, checkpoint } => {
            let cfg = load(&run)?;
            print_summaries(&cmd_adapt(&cfg, checkpoint.as_deref())?);
        }
        Command::SweepBeta { run, checkpoint } => {
            let cfg = load(&run)?;
            let rows = cmd_sweep_beta(&cfg, checkpoint.as_deref())?;
            let named: Vec<(String, &RunSummary)> = rows.iter().map(|r| (r.beta.to_string(), &r.summary)).collect();
            print!("{}", summary_table("beta", &named));
        }
        Command::Ablate(args) => {
            let cfg = load(&args)?;
            print_summaries(&cmd_ablate(&cfg)?);
        }
        Command::Report { out } => {
            let report = cmd_report(&out)?;
            print!("{}", report.to_text());
            println!("wrote {}", Path::new(&out).join("report.json").display());
        }
        Command::GenData(args) => {
            let cfg = load(&args)?;
            let seed = cfg.seeds[0];
            let (train, test) = cmd_gen_data(&cfg, seed)?;
            println!("{}\n{}", train.display(), test.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
