use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dist_lqr::{run, CliError, Command, ExperimentConfig, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Solve,
    Dist,
    Compare,
    Optimize,
    Bound,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Solve => Command::Solve,
            Cmd::Dist => Command::Dist,
            Cmd::Compare => Command::Compare,
            Cmd::Optimize => Command::Optimize,
            Cmd::Bound => Command::Bound,
        }
    }
}

/// Return distributions of discounted LQR: solve, sample, compare, bound, optimize.
#[derive(Debug, Parser)]
#[command(name = "dist-lqr", version)]
struct Args {
    command: Cmd,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `[output].directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the configuration without sampling or writing files.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dist-lqr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        out: args.out.clone(),
        check: args.check,
        config_path: Some(args.config.clone()),
    };
    let report = run(args.command.into(), &cfg, &opts)?;
    for line in &report.lines {
        println!("{line}");
    }
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
