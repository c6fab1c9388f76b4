use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod exit;
mod pipeline;
mod render;
mod simulate;

use config::{CommonArgs, RunConfig};
use exit::{usage, CliResult};
use render::RenderArgs;
use simulate::SimulateArgs;

/// Conformal sufficient-explanation masks for image classifiers.
#[derive(Debug, Parser)]
#[command(name = "confex", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute SLIC super-pixels for manifest images that lack them.
    Segment,
    /// Conformity scores for the calibration split.
    Scores,
    /// Threshold from calibration scores at one significance level.
    Calibrate,
    /// Explanation masks for the test split.
    Explain,
    /// Fidelity and size of the saved masks, or a confidence sweep.
    Evaluate {
        /// Recompute every kind over all --epsilon values.
        #[arg(long)]
        sweep: bool,
    },
    /// Coverage trial on a synthetic scenario with a known ground truth.
    Simulate(SimulateArgs),
    /// PNG overlays of explanation masks or sweep charts.
    Render(RenderArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::resolve(&cli.common)?;
    if let Some(n) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match cli.command {
        Command::Segment => {
            let fresh = pipeline::cmd_segment(&cfg)?;
            println!("{}", if fresh { "segmentation written" } else { "segmentation up to date" });
        }
        Command::Scores => {
            let meta = pipeline::cmd_scores(&cfg)?;
            println!(
                "{} calibration scores ({} invalid) for {}",
                meta.count, meta.invalid, meta.kind
            );
        }
        Command::Calibrate => {
            let art = pipeline::cmd_calibrate(&cfg)?;
            println!(
                "threshold {} for {} at eps={} from k={}{}",
                art.threshold,
                art.kind,
                art.epsilon,
                art.k,
                if art.sentinel { " (sentinel)" } else { "" }
            );
        }
        Command::Explain => {
            let s = pipeline::cmd_explain(&cfg)?;
            println!("{} masks, {} reproduce the full prediction", s.count, s.matches);
        }
        Command::Evaluate { sweep: false } => println!("{}", pipeline::cmd_evaluate(&cfg)?),
        Command::Evaluate { sweep: true } => {
            for r in pipeline::cmd_sweep(&cfg)? {
                println!("{}", pipeline::sweep_line(&r));
            }
        }
        Command::Simulate(args) => {
            let eps_given = !cli.common.epsilon.is_empty();
            for line in simulate::cmd_simulate(&cfg, &args, eps_given)?.lines {
                println!("{line}");
            }
        }
        Command::Render(args) if args.sweep => {
            for p in render::render_sweep(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Render(args) => {
            for line in render::render_masks(&cfg, &args)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
