use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use director_cli::{cmd_eval, cmd_generate, cmd_report, cmd_run, cmd_train, AppConfig, CliError};
use director_core::suite::SuiteSpec;

#[derive(Parser)]
#[command(name = "director", version, about = "Closed-loop image editing director")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file. Built-in defaults (all simulated) apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task of a suite and write one trajectory per task.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum number of tasks in flight.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Trained policy file driving the planner decisions.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Score the trajectories in an output directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the planner policy on simulated rollouts.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training suite; generated from the config when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the policy and history in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compare the reports of one or more output directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Write a synthetic task suite.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        tasks: usize,
        #[arg(long, default_value_t = 15)]
        min_goals: usize,
        #[arg(long, default_value_t = 23)]
        max_goals: usize,
        #[arg(long, default_value_t = 0.0)]
        i2i_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        conflict_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<AppConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::parse("")?,
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            common,
            suite,
            out,
            jobs,
            policy,
        } => {
            let cfg = load_config(&common)?;
            let suite = required(suite, &cfg.paths.suite, "suite")?;
            let out = required(out, &cfg.paths.out, "out")?;
            let manifest = cmd_run(&cfg, &suite, &out, jobs, policy.as_deref())?;
            println!("ran {} tasks into {}", manifest.tasks.len(), out.display());
        }
        Command::Eval { common, out } => {
            let cfg = load_config(&common)?;
            let out = required(out, &cfg.paths.out, "out")?;
            let (_, table) = cmd_eval(&out, cfg.run.confidence_threshold)?;
            print!("{table}");
        }
        Command::Train {
            common,
            suite,
            out,
            resume,
        } => {
            let cfg = load_config(&common)?;
            let out = required(out, &cfg.paths.out, "out")?;
            let summary = cmd_train(&cfg, suite.as_deref().or(cfg.paths.suite.as_deref()), &out, resume)?;
            println!("epochs: {}", summary.epochs);
            println!(
                "mean iterations: before {:.3} after {:.3}",
                summary.before.mean_iterations, summary.after.mean_iterations
            );
            println!(
                "mean reward: before {:.3} after {:.3}",
                summary.before.mean_reward, summary.after.mean_reward
            );
        }
        Command::Report { dirs } => print!("{}", cmd_report(&dirs)?),
        Command::Generate {
            out,
            tasks,
            min_goals,
            max_goals,
            i2i_fraction,
            conflict_rate,
            seed,
        } => {
            let spec = SuiteSpec {
                tasks,
                min_goals,
                max_goals,
                i2i_fraction,
                conflict_rate,
                seed,
            };
            let n = cmd_generate(&spec, Path::new(&out))?;
            println!("wrote {n} tasks to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
