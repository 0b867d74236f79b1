use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use etmhe_cli::{commands, configure_threads, load, CliError, Overrides};
use etmhe_core::Scheme;

#[derive(Parser)]
#[command(name = "etmhe", version, about = "Event-triggered moving horizon estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation.
    Simulate(Common),
    /// Sweep the trigger parameter over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alphas (overrides `[sweep] alphas`).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Seeds per alpha (overrides `[sweep] seeds`).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Validate parameters, print the minimum horizon and check the bounds.
    Check(Common),
    /// Compare fixed and varying horizons on paired seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Number of paired seeds (overrides `[compare] seeds`).
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render SVG plots.
    #[arg(long)]
    svg: bool,
    /// Audit every N-th untriggered step against a full solve.
    #[arg(long, value_name = "N")]
    audit_prop1: Option<usize>,
    /// Print only warnings and errors.
    #[arg(short, long)]
    quiet: bool,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse()
}

fn overrides(c: &Common, alphas: Option<Vec<f64>>, seeds: Option<usize>) -> Overrides {
    Overrides {
        alpha: c.alpha,
        seed: c.seed,
        scheme: c.scheme,
        out: c.out.clone(),
        svg: c.svg,
        audit_prop1: c.audit_prop1,
        alphas,
        seeds,
    }
}

fn run(cli: Cli) -> Result<(String, bool), CliError> {
    configure_threads(std::env::var("ETMHE_THREADS").ok().as_deref())?;
    let (common, o, cmd): (&Common, Overrides, fn(&etmhe_cli::RunSpec) -> Result<String, CliError>) = match &cli.command {
        Command::Simulate(c) => (c, overrides(c, None, None), commands::simulate),
        Command::Sweep { common, alphas, seeds } => (common, overrides(common, alphas.clone(), *seeds), commands::sweep),
        Command::Check(c) => (c, overrides(c, None, None), commands::check),
        Command::Compare { common, seeds } => (common, overrides(common, None, *seeds), commands::compare),
    };
    let spec = load(&common.config, &o)?;
    Ok((cmd(&spec)?, common.quiet))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((out, quiet)) => {
            if quiet {
                for line in out.lines().filter(|l| l.starts_with("warning:")) {
                    eprintln!("{line}");
                }
            } else {
                print!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
