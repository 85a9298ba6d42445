use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod client;
mod run;
mod serve;

#[derive(Parser, Debug)]
#[command(name = "mpa", version, about = "Multi-factor mobile payment authentication")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    /// In-process simulator over the config's state files.
    Sim,
    /// Running `mpa serve` processes.
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// Deployment config (JSON).
    #[arg(long, env = "MPA_CONFIG")]
    pub config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Provision the configured wallet's card and enroll it with every node.
    Enroll {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "sim")]
        transport: Transport,
    },
    /// Make one payment from the configured wallet.
    Pay(client::PayArgs),
    /// Run a scenario file (or a bundled scenario by name).
    Simulate {
        #[arg(long)]
        scenario: String,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: run::OutputArgs,
    },
    /// Run one of the bundled attack suites.
    Attack {
        #[arg(long)]
        kind: String,
        /// Number of seeded runs; replay defaults to 100, the others to 1.
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 1)]
        first_seed: u64,
        #[command(flatten)]
        output: run::OutputArgs,
    },
    /// Run one role as a TCP server until interrupted.
    Serve(serve::ServeArgs),
    /// Render a saved report.
    Report {
        /// Report JSON; `-` reads standard input.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

/// Outcome of a command that ran: did its checks hold?
pub enum Outcome {
    Ok,
    AssertionsFailed,
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Enroll { config, transport } => client::enroll(&config.config, transport),
        Command::Pay(args) => client::pay(&args),
        Command::Simulate {
            scenario,
            seed,
            output,
        } => run::simulate(&scenario, seed, &output),
        Command::Attack {
            kind,
            trials,
            first_seed,
            output,
        } => run::attack(&kind, trials, first_seed, &output),
        Command::Serve(args) => serve::serve(&args),
        Command::Report { input, format } => run::report(&input, format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::AssertionsFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
