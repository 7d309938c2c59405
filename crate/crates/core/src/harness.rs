//! Experiment runners behind the command-line tool. Each runner reads a
//! [`RunConfig`], does its work and writes its outputs under `output_dir`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, write_samples_csv};
use crate::diffusion::{train_denoiser, train_estimator};
use crate::error::{Error, Result};
use crate::metrics::{energy_distance, eval_estimator_curve, write_bench_csv, write_curve_csv, BenchRow, CurvePoint, Method, MetricsRecord};
use crate::model::{Denoiser, NoiseEstimator};
use crate::rng::stream_rng;
use crate::sampler::{initial_noise_schedule, sample_adaptive, sample_fixed, write_trace_jsonl, SampleOutput, SamplerConfig};
use crate::tensor::RealBuffer;

pub const THREADS_ENV: &str = "ADADIFFUSE_THREADS";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Worker count from `ADADIFFUSE_THREADS`, or the machine's parallelism when unset.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

fn load_part<T>(path: &Path, part: &str, pick: impl FnOnce(Checkpoint) -> Option<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("{part} checkpoint not found"),
        });
    }
    pick(Checkpoint::load(path)?).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("file holds no {part}"),
    })
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    load_part(path, "denoiser", |c| c.denoiser)
}

pub fn load_estimator(path: &Path) -> Result<NoiseEstimator> {
    load_part(path, "estimator", |c| c.estimator)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
}

/// Streams `(step, loss)` rows and writes periodic checkpoints.
struct Progress {
    losses: csv::Writer<BufWriter<File>>,
    loss_path: PathBuf,
    interval: usize,
    last: f64,
}

impl Progress {
    fn new(path: PathBuf, interval: usize) -> Result<Self> {
        let mut losses = csv::Writer::from_writer(create(&path)?);
        losses.write_record(["step", "loss"])?;
        Ok(Self {
            losses,
            loss_path: path,
            interval,
            last: f64::NAN,
        })
    }

    fn record(&mut self, step: usize, loss: f64, save: impl FnOnce() -> Result<()>) -> Result<()> {
        self.losses.serialize((step, loss))?;
        self.last = loss;
        if self.interval > 0 && step.is_multiple_of(self.interval) {
            self.losses.flush().map_err(|e| Error::io(&self.loss_path, e))?;
            save()?;
        }
        Ok(())
    }

    fn close(mut self) -> Result<(PathBuf, f64)> {
        self.losses.flush().map_err(|e| Error::io(&self.loss_path, e))?;
        Ok((self.loss_path, self.last))
    }
}

pub fn run_train_denoiser(cfg: &RunConfig) -> Result<TrainReport> {
    let data = generate(&cfg.dataset)?;
    let path = cfg.denoiser_path();
    let mut progress = Progress::new(cfg.output_dir.join("denoiser_loss.csv"), cfg.train.checkpoint_interval)?;
    let save = |d: &Denoiser| {
        Checkpoint {
            denoiser: Some(d.clone()),
            ..Checkpoint::default()
        }
        .save(&path)
    };
    let denoiser = train_denoiser(&data, &cfg.train, cfg.sampler.conditioning_mode, &mut |step, loss, d| {
        progress.record(step, loss, || save(d))
    })?;
    save(&denoiser)?;
    let (loss_csv, final_loss) = progress.close()?;
    Ok(TrainReport {
        checkpoint: path,
        loss_csv,
        final_loss,
    })
}

pub fn run_train_estimator(cfg: &RunConfig) -> Result<TrainReport> {
    let data = generate(&cfg.dataset)?;
    let path = cfg.estimator_path();
    let mut progress = Progress::new(cfg.output_dir.join("estimator_loss.csv"), cfg.train.checkpoint_interval)?;
    let save = |e: &NoiseEstimator| {
        Checkpoint {
            estimator: Some(e.clone()),
            ..Checkpoint::default()
        }
        .save(&path)
    };
    let estimator = train_estimator(&data, &cfg.train, &mut |step, loss, e| progress.record(step, loss, || save(e)))?;
    save(&estimator)?;
    let (loss_csv, final_loss) = progress.close()?;
    Ok(TrainReport {
        checkpoint: path,
        loss_csv,
        final_loss,
    })
}

fn write_metrics(cfg: &RunConfig, metrics: &MetricsRecord) -> Result<()> {
    let path = cfg.output_dir.join("metrics.json");
    let mut w = create(&path)?;
    metrics.write_json(&mut w)?;
    finish(w, &path)
}

pub fn run_eval_estimator(cfg: &RunConfig) -> Result<Vec<CurvePoint>> {
    let estimator = load_estimator(&cfg.estimator_path())?;
    let data = generate(&cfg.dataset)?;
    let curve = eval_estimator_curve(&estimator, &data, &cfg.eval.grid, cfg.eval.samples_per_point, cfg.eval.seed)?;
    let path = cfg.output_dir.join("curve.csv");
    let mut w = create(&path)?;
    write_curve_csv(&curve, &mut w)?;
    finish(w, &path)?;
    let mut metrics = MetricsRecord::new();
    metrics.estimator_curve = curve.clone();
    write_metrics(cfg, &metrics)?;
    Ok(curve)
}

fn write_traces(dir: &Path, stem: &str, traces: &[Vec<crate::sampler::TraceStep>]) -> Result<()> {
    for (row, trace) in traces.iter().enumerate() {
        let suffix = if traces.len() > 1 { format!("_row{row}") } else { String::new() };
        let path = dir.join(format!("{stem}{suffix}.jsonl"));
        let mut w = create(&path)?;
        write_trace_jsonl(trace, &mut w)?;
        finish(w, &path)?;
    }
    Ok(())
}

/// One sampling run with `cfg.sampler`; writes `samples.csv` and the trace.
pub fn run_sample(cfg: &RunConfig, method: Method) -> Result<SampleOutput> {
    let denoiser = load_denoiser(&cfg.denoiser_path())?;
    let mut rng = stream_rng(cfg.sampler.seed, cfg.sampler.steps as u64);
    let result = match method {
        Method::Fixed => sample_fixed(&denoiser, &initial_noise_schedule(&cfg.sampler)?, &cfg.sampler, &mut rng),
        Method::Adaptive => {
            let estimator = load_estimator(&cfg.estimator_path())?;
            sample_adaptive(&denoiser, &estimator, &cfg.sampler, &mut rng)
        }
    };
    let out = match result {
        Ok(out) => out,
        Err(abort) => {
            write_traces(&cfg.output_dir, "trace", &abort.traces)?;
            return Err(abort.into());
        }
    };
    write_traces(&cfg.output_dir, "trace", &out.traces)?;
    let path = cfg.output_dir.join("samples.csv");
    let mut w = create(&path)?;
    write_samples_csv(&out.samples, &mut w)?;
    finish(w, &path)?;
    Ok(out)
}

struct Job {
    steps: usize,
    seed: u64,
}

struct JobResult {
    rows: Vec<BenchRow>,
    clamp_events: usize,
    traces: Vec<(String, Vec<Vec<crate::sampler::TraceStep>>)>,
}

fn run_job(job: &Job, cfg: &RunConfig, denoiser: &Denoiser, estimator: &NoiseEstimator, holdout: &RealBuffer) -> Result<JobResult> {
    let sampler = SamplerConfig {
        steps: job.steps,
        seed: job.seed,
        trace_rows: if job.steps <= cfg.bench.trace_max_steps {
            cfg.sampler.trace_rows
        } else {
            0
        },
        ..cfg.sampler.clone()
    };
    // Same stream for both methods: paired runs start from identical noise.
    let rng = || stream_rng(job.seed, job.steps as u64);
    let fixed = sample_fixed(denoiser, &initial_noise_schedule(&sampler)?, &sampler, &mut rng())?;
    let adaptive = sample_adaptive(denoiser, estimator, &sampler, &mut rng())?;
    if fixed.initial_noise_hash != adaptive.initial_noise_hash {
        return Err(Error::State(format!(
            "paired runs at N={} seed={} started from different noise",
            job.steps, job.seed
        )));
    }
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (method, out) in [(Method::Fixed, &fixed), (Method::Adaptive, &adaptive)] {
        rows.push(BenchRow {
            method,
            steps: job.steps,
            seed: job.seed,
            energy_distance: energy_distance(&out.samples, holdout)?,
            wall_ms: out.wall_ms,
        });
        traces.push((format!("{}_N{}_seed{}", method.as_str(), job.steps, job.seed), out.traces.clone()));
    }
    Ok(JobResult {
        rows,
        clamp_events: adaptive.clamp_events,
        traces,
    })
}

/// Paired fixed-versus-adaptive comparison over every configured `N` and seed.
///
/// Writes `bench.csv`, `metrics.json` and per-run traces under
/// `traces/`. When some runs fail, the completed ones are still written and
/// the first failure is returned.
pub fn run_benchmark(cfg: &RunConfig) -> Result<MetricsRecord> {
    let denoiser = load_denoiser(&cfg.denoiser_path())?;
    let estimator = load_estimator(&cfg.estimator_path())?;
    let holdout = generate(&cfg.dataset.with_seed(cfg.bench.holdout_seed, cfg.bench.holdout_size))?;
    let jobs: Vec<Job> = cfg
        .bench
        .steps
        .iter()
        .flat_map(|&steps| cfg.seeds.iter().map(move |&seed| Job { steps, seed }))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    let results: Vec<Result<JobResult>> =
        pool.install(|| jobs.par_iter().map(|job| run_job(job, cfg, &denoiser, &estimator, &holdout)).collect());

    let mut metrics = MetricsRecord::new();
    let mut first_error = None;
    let trace_dir = cfg.output_dir.join("traces");
    for result in results {
        match result {
            Ok(r) => {
                metrics.energy_distance.extend(r.rows);
                metrics.clamp_events += r.clamp_events;
                for (stem, traces) in &r.traces {
                    write_traces(&trace_dir, stem, traces)?;
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    metrics.failure = first_error.as_ref().map(|e| e.to_string());
    metrics.summarize_wall_times(cfg.sampler.samples);
    metrics.sort();

    let bench_path = cfg.output_dir.join("bench.csv");
    let mut w = create(&bench_path)?;
    write_bench_csv(&metrics.energy_distance, &mut w)?;
    finish(w, &bench_path)?;
    write_metrics(cfg, &metrics)?;

    match first_error {
        Some(e) => Err(e),
        None => Ok(metrics),
    }
}
