use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtorch_cli::{cmd_analyze, cmd_plan, cmd_simulate, AnalyzeArgs, Overrides, EXIT_INPUT};
use rtorch_core::orchestrator::Strategy;

#[derive(Parser)]
#[command(
    name = "rtorch",
    version,
    about = "Probabilistic real-time scheduling simulator and orchestrator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario with the orchestrator attached.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration_us: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        u_max: Option<f64>,
        /// Monitor and log only; never move tasks.
        #[arg(long)]
        no_orchestrator: bool,
    },
    /// Fit runtime samples and report miss probabilities.
    Analyze {
        #[arg(long)]
        runtimes: PathBuf,
        #[arg(long)]
        period_us: Option<u64>,
        #[arg(long, default_value_t = 1.0)]
        u_max: f64,
        #[arg(long)]
        threshold: Option<f64>,
        /// Group tasks by their initial resource in this scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Compute a placement and print it as JSON.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        u_max: Option<f64>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "naive" => Ok(Strategy::Naive),
        "monte_carlo" => Ok(Strategy::MonteCarlo),
        _ => Err(format!(
            "unknown strategy `{s}` (expected naive or monte_carlo)"
        )),
    }
}

fn run(cli: Cli) -> Result<i32, rtorch_cli::CliError> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            duration_us,
            out,
            strategy,
            mc_samples,
            u_max,
            no_orchestrator,
        } => {
            let overrides = Overrides {
                seed,
                duration_us,
                strategy,
                mc_samples,
                u_max,
                disable_orchestrator: no_orchestrator,
            };
            let outcome = cmd_simulate(&scenario, &overrides, &out)?;
            print!("{}", outcome.report.render_text());
            let misses = outcome.run.hard_misses();
            if misses > 0 {
                eprintln!("{misses} hard deadline miss(es)");
            }
            Ok(outcome.exit_code())
        }
        Command::Analyze {
            runtimes,
            period_us,
            u_max,
            threshold,
            scenario,
        } => {
            let report = cmd_analyze(&AnalyzeArgs {
                runtimes: &runtimes,
                period_us,
                u_max,
                threshold,
                scenario: scenario.as_deref(),
            })?;
            print!("{}", report.render());
            Ok(0)
        }
        Command::Plan {
            scenario,
            strategy,
            mc_samples,
            seed,
            u_max,
        } => {
            let overrides = Overrides {
                seed,
                strategy,
                mc_samples,
                u_max,
                ..Default::default()
            };
            let plan = cmd_plan(&scenario, &overrides)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&plan).expect("plan serializes")
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RTORCH_LOG", "warn")).init();
    // Usage errors share the input-error status; 2 is reserved for hard misses.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
