use clap::{Parser, Subcommand};
use gazedrop::config::{ExperimentConfig, Variant};
use gazedrop::experiment::Experiment;
use gazedrop::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Gaze-modulated dropout laboratory: synthetic driving data, behavioral
/// cloning with spatially modulated dropout, and the comparative benchmarks.
#[derive(Parser)]
#[command(name = "gazedrop", version, about)]
struct Cli {
    /// Experiment configuration (JSON). Omit to use the built-in default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in default experiment config to a file.
    InitConfig {
        /// Destination path.
        #[arg(long, default_value = "gazedrop-config.json")]
        path: PathBuf,
    },
    /// Generate the dataset (frames, gaze maps, index, hashed manifest).
    GenData,
    /// Train both branches of one variant for one or all seeds.
    Train {
        /// Variant name: uniform | uniform_matched | gaze_real | gaze_est |
        /// center_blob | all (every configured variant plus the matched
        /// control and the dp sweep).
        #[arg(long, default_value = "all")]
        variant: String,
        /// Training seed (defaults to every configured seed).
        #[arg(long)]
        train_seed: Option<u64>,
    },
    /// Offline steering MAE per variant and split.
    Eval,
    /// MC-dropout uncertainty at matched average drop probability, plus the
    /// dp sweep.
    Uncertainty,
    /// Closed-loop benchmark on unseen tracks, with and without traffic.
    ClosedLoop,
    /// Gaze-map similarity (KL, CC) of estimated maps and center blobs
    /// against the oracle maps.
    Metrics,
    /// Run the whole pipeline; --check verifies the comparative claims.
    ReproducePaper {
        /// Evaluate claims after the run; exit code 4 if any fail.
        #[arg(long)]
        check: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("gazedrop-out"));
            ExperimentConfig::default_experiment(out)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32, Error> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    if let Command::InitConfig { path } = &cli.command {
        let cfg = load_config(&cli)?;
        cfg.save(path)?;
        println!("wrote {}", path.display());
        return Ok(0);
    }

    let cfg = load_config(&cli)?;
    let exp = Experiment::new(cfg)?;
    match &cli.command {
        Command::InitConfig { .. } => unreachable!("handled above"),
        Command::GenData => {
            let index = exp.gen_data()?;
            println!(
                "dataset: {} samples under {}",
                index.records.len(),
                exp.dataset_dir().display()
            );
        }
        Command::Train {
            variant,
            train_seed,
        } => {
            let index = exp.load_index()?;
            if variant == "all" {
                exp.train_all(&index)?;
            } else {
                let variant = Variant::parse(variant)?;
                let part = exp.partition(&index)?;
                let matched = exp.matched_dp(&index, &part)?;
                let seeds: Vec<u64> = match train_seed {
                    Some(s) => vec![*s],
                    None => exp.cfg.train_seeds.clone(),
                };
                for seed in seeds {
                    exp.train_variant(&index, &part, variant, seed, matched)?;
                }
            }
            println!("checkpoints under {}", exp.checkpoints_dir().display());
        }
        Command::Eval => {
            exp.eval_report()?;
            println!(
                "wrote {}",
                exp.reports_dir().join("eval_summary.csv").display()
            );
        }
        Command::Uncertainty => {
            exp.uncertainty_report()?;
            println!(
                "wrote {}",
                exp.reports_dir().join("uncertainty_summary.csv").display()
            );
        }
        Command::ClosedLoop => {
            exp.closed_loop_report()?;
            println!(
                "wrote {}",
                exp.reports_dir().join("closed_loop_summary.json").display()
            );
        }
        Command::Metrics => {
            exp.gaze_metrics_report()?;
            println!(
                "wrote {}",
                exp.reports_dir().join("gaze_metrics.csv").display()
            );
        }
        Command::ReproducePaper { check } => {
            let claims = exp.reproduce(*check)?;
            if *check {
                let mut failed = false;
                for claim in &claims {
                    let verdict = if claim.pass { "PASS" } else { "FAIL" };
                    println!("{verdict} {}: {}", claim.name, claim.details);
                    failed |= !claim.pass;
                }
                if failed {
                    return Ok(4);
                }
            }
            println!("reports under {}", exp.reports_dir().display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
