use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbf_cli::commands::{self, Overrides};
use fbf_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fbf", version, about = "Flow-based Bayesian filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file (defaults to a fixed name under `paths.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Posterior samples per step.
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Dataset file to read.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Checkpoint file to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Sample file to evaluate.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate a dataset.
    Generate,
    /// Train a filter on the leading trajectories.
    Train,
    /// Filter the held-out trajectories and draw posterior samples.
    Filter,
    /// Run the bootstrap particle filter on the held-out trajectories.
    Pf,
    /// Score a sample file against the true states.
    Evaluate,
    /// Train and score every configured method over the noise levels.
    Compare,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let ov = Overrides {
        out: cli.out,
        data: cli.data,
        checkpoint: cli.checkpoint,
        input: cli.input,
        samples: cli.samples,
    };
    match cli.command {
        Command::Generate => {
            let s = commands::cmd_generate(&cfg, &ov)?;
            println!(
                "wrote {}: N = {}, K = {}, m = {}, n = {}, {} bytes",
                s.path.display(),
                s.trajectories,
                s.steps,
                s.state_dim,
                s.meas_dim,
                s.bytes
            );
        }
        Command::Train => {
            let p = commands::cmd_train(&cfg, &ov)?;
            println!("wrote {}", p.display());
        }
        Command::Filter => {
            let p = commands::cmd_filter(&cfg, &ov)?;
            println!("wrote {}", p.display());
        }
        Command::Pf => {
            let p = commands::cmd_pf(&cfg, &ov)?;
            println!("wrote {}", p.display());
        }
        Command::Evaluate => {
            let r = commands::cmd_evaluate(&cfg, &ov)?;
            for c in &r.metrics {
                println!("{} {}: {:.6} +- {:.6}", r.method, c.name, c.mean, c.std);
            }
        }
        Command::Compare => {
            let (p, rows) = commands::cmd_compare(&cfg, &ov)?;
            print!("{}", commands::compare_csv(&cfg, &rows));
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
