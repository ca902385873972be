use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use miat::harness::config::{RunConfig, TaskKind};
use miat::harness::run;
use miat::harness::sweep::gradcheck_sweep;
use miat::{Error, Result};

/// Gradient checks whose relative error exceeds this fail the sweep.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "miat", version, about = "Multi-input attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits of a synthetic task.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Parameter counts of one LTMI layer and one naive extension layer.
    Params {
        #[arg(long, default_value_t = 3)]
        u: usize,
        #[arg(long, default_value_t = 512)]
        d: usize,
    },
    /// Finite-difference check of every op and layer.
    Gradcheck,
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { task, seed, out } => {
            let task: TaskKind = task
                .parse()
                .map_err(|e: Error| Error::Usage(e.to_string()))?;
            run::gen_data(task, seed, &out)?;
            println!("wrote {} data to {}", task.name(), out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = run::train(&cfg, &mut std::io::stdout())?;
            println!("checkpoint={}", out.checkpoint.display());
        }
        Command::Eval { checkpoint, data } => {
            print!("{}", run::evaluate(&checkpoint, &data)?.report());
        }
        Command::Params { u, d } => print!("{}", run::params_report(u, d)?),
        Command::Gradcheck => {
            let mut failed = 0;
            for (name, r) in gradcheck_sweep()? {
                let ok = r.max_rel_error < GRADCHECK_TOL;
                failed += usize::from(!ok);
                println!(
                    "check={name} max_rel_error={:.3e} entries={} {}",
                    r.max_rel_error,
                    r.checked,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Numeric(format!(
                    "{failed} gradient checks exceed {GRADCHECK_TOL}"
                )));
            }
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
