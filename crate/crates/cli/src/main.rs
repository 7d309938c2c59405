use std::path::PathBuf;
use std::process::ExitCode;

use adadiffuse::config::RunConfig;
use adadiffuse::error::Error;
use adadiffuse::harness;
use adadiffuse::metrics::Method;
use adadiffuse::schedule::{cumulative_alpha_bar, solve_fibonacci, solve_linear, ScheduleKind};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adadiffuse", version, about = "Adaptive noise-schedule diffusion experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training, sampling and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Linear,
    Fibonacci,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMethod {
    Fixed,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise predictor and save its checkpoint.
    TrainDenoiser,
    /// Train the noise-level estimator and save its checkpoint.
    TrainEstimator,
    /// Write the estimator's error curve to curve.csv.
    EvalEstimator,
    /// Print the schedule solved for a target noise level.
    SolveSchedule {
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long)]
        alpha_bar: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        beta0: f64,
    },
    /// Generate samples with the trained models.
    Sample {
        #[arg(long, value_enum, default_value = "adaptive")]
        method: SampleMethod,
        /// Overrides sampler.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare fixed and adaptive sampling over the configured step counts and seeds.
    Benchmark,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn solve_schedule(family: Family, alpha_bar: f64, steps: usize, beta0: f64) -> Result<(), Error> {
    let solved = match family {
        Family::Linear => solve_linear(alpha_bar, steps, beta0),
        Family::Fibonacci => solve_fibonacci(alpha_bar, steps, beta0),
    }
    .map_err(|e| Error::Config(e.to_string()))?;
    let alpha_bars = cumulative_alpha_bar(&solved.betas)?;
    let kind = match family {
        Family::Linear => ScheduleKind::Linear,
        Family::Fibonacci => ScheduleKind::Fibonacci,
    };
    println!("# family={kind:?} alpha_bar_hat={alpha_bar} steps={steps} beta0={beta0}");
    println!("i,beta_raw,beta,alpha_bar");
    for (i, ((raw, b), a)) in solved.raw.iter().zip(&solved.betas).zip(&alpha_bars).enumerate() {
        println!("{},{raw:.12e},{b:.12e},{a:.12}", i + 1);
    }
    let sum: f64 = solved.raw.iter().sum();
    println!("# sum(beta_raw)={sum:.12e} -log(alpha_bar_hat)={:.12e}", -alpha_bar.ln());
    println!(
        "# prod(1-beta)={:.12} clamped={}",
        alpha_bars.last().copied().unwrap_or(1.0),
        solved.clamped
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::SolveSchedule {
        family,
        alpha_bar,
        steps,
        beta0,
    } = cli.command
    {
        return solve_schedule(family, alpha_bar, steps, beta0);
    }
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::TrainDenoiser => {
            let r = harness::run_train_denoiser(&cfg)?;
            println!("denoiser saved to {} (final loss {:.6})", r.checkpoint.display(), r.final_loss);
        }
        Command::TrainEstimator => {
            let r = harness::run_train_estimator(&cfg)?;
            println!("estimator saved to {} (final loss {:.6})", r.checkpoint.display(), r.final_loss);
        }
        Command::EvalEstimator => {
            let curve = harness::run_eval_estimator(&cfg)?;
            println!("alpha_bar,mse");
            for p in curve {
                println!("{},{:.6e}", p.alpha_bar, p.mse);
            }
        }
        Command::Sample { method, steps } => {
            if let Some(n) = steps {
                cfg.sampler.steps = *n;
                cfg.sampler.adjust = None;
                cfg.validate()?;
            }
            let method = match method {
                SampleMethod::Fixed => Method::Fixed,
                SampleMethod::Adaptive => Method::Adaptive,
            };
            let out = harness::run_sample(&cfg, method)?;
            println!(
                "{} samples written to {} ({:.1} ms, {} estimator queries, {} clamps)",
                out.samples.rows(),
                cfg.output_dir.join("samples.csv").display(),
                out.wall_ms,
                out.estimator_queries,
                out.clamp_events
            );
        }
        Command::Benchmark => {
            let m = harness::run_benchmark(&cfg)?;
            println!("method,N,mean_energy_distance,mean_wall_ms");
            for w in &m.wall_time_ms {
                let rows: Vec<f64> = m
                    .energy_distance
                    .iter()
                    .filter(|r| r.method == w.method && r.steps == w.steps)
                    .map(|r| r.energy_distance)
                    .collect();
                let mean = rows.iter().sum::<f64>() / rows.len() as f64;
                println!("{},{},{mean:.6},{:.3}", w.method.as_str(), w.steps, w.mean_ms);
            }
        }
        Command::SolveSchedule { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
