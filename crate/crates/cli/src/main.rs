use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pacmeta::commands::{
    cmd_bound, cmd_eval, cmd_report, cmd_train, load_run_config, parse_overrides, BoundArgs, CmdError, SEED_ENV,
};
use pacmeta::config::RunConfig;

#[derive(Parser)]
#[command(name = "pacmeta", version, about = "PAC-Bayes meta-learning with stochastic networks")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write a checkpoint, trace and resolved config.
    Train {
        config: PathBuf,
        /// `--key=value` config overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Adapt a checkpoint to the test tasks and write the test table.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate one bound from the catalog.
    Bound {
        #[arg(long)]
        which: String,
        /// Use the single-task catalog instead of the meta-level one.
        #[arg(long)]
        single: bool,
        #[arg(long, value_delimiter = ',', required = true)]
        emp: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        kl_task: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        m: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        kl_hyper: f64,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// First-power denominators for the meta λ bound.
        #[arg(long)]
        proof_form: bool,
    },
    /// Run the experiment sweep and write every report table.
    Report {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn config(path: &Path, overrides: &[String]) -> Result<RunConfig, CmdError> {
    let overrides = parse_overrides(overrides)?;
    let seed = std::env::var(SEED_ENV).ok();
    load_run_config(path, &overrides, seed.as_deref())
}

fn run(cli: Cli) -> Result<(), CmdError> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train { config: path, overrides } => {
            cmd_train(&config(&path, &overrides)?, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            config: path,
            overrides,
        } => {
            cmd_eval(&config(&path, &overrides)?, &checkpoint, &mut out)?;
        }
        Command::Bound {
            which,
            single,
            emp,
            kl_task,
            m,
            kl_hyper,
            n,
            delta,
            lambda,
            proof_form,
        } => {
            let text = cmd_bound(&BoundArgs {
                which,
                single,
                emp,
                kl_task,
                m,
                kl_hyper,
                n,
                delta,
                lambda,
                proof_form,
            })?;
            print!("{text}");
        }
        Command::Report { config: path, overrides } => {
            cmd_report(&config(&path, &overrides)?, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
