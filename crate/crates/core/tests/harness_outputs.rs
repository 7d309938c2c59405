use std::fs::File;
use std::path::Path;

use adadiffuse::config::RunConfig;
use adadiffuse::data::read_samples_csv;
use adadiffuse::harness::{run_benchmark, run_eval_estimator, run_sample, run_train_denoiser, run_train_estimator};
use adadiffuse::metrics::{read_bench_csv, read_curve_csv, Method, MetricsRecord, DISTANCE_METRIC};
use adadiffuse::sampler::read_trace_jsonl;
use adadiffuse::Error;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.seeds = vec![4];
    cfg.dataset.size = 300;
    cfg.train.total_steps = 30;
    cfg.train.batch_size = 32;
    cfg.train.checkpoint_interval = 10;
    cfg.sampler.samples = 40;
    cfg.eval.samples_per_point = 16;
    cfg.bench.steps = vec![5];
    cfg.bench.holdout_size = 100;
    cfg
}

#[test]
fn full_pipeline_writes_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());

    let d = run_train_denoiser(&cfg).unwrap();
    let e = run_train_estimator(&cfg).unwrap();
    assert!(d.checkpoint.exists() && e.checkpoint.exists());
    assert!(d.final_loss.is_finite() && e.final_loss.is_finite());
    let losses = std::fs::read_to_string(&d.loss_csv).unwrap();
    assert_eq!(losses.lines().next(), Some("step,loss"));
    assert_eq!(losses.lines().count(), 31);

    let curve = run_eval_estimator(&cfg).unwrap();
    assert_eq!(curve.len(), cfg.eval.grid.len());
    assert_eq!(read_curve_csv(File::open(dir.path().join("curve.csv")).unwrap()).unwrap(), curve);

    let out = run_sample(&cfg, Method::Adaptive).unwrap();
    let samples = read_samples_csv(File::open(dir.path().join("samples.csv")).unwrap()).unwrap();
    assert_eq!(samples, out.samples);
    let trace = read_trace_jsonl(&std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.len(), cfg.sampler.steps);

    let record = run_benchmark(&cfg).unwrap();
    let rows = read_bench_csv(File::open(dir.path().join("bench.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows, record.energy_distance);
    assert_eq!(rows.iter().map(|r| r.method).collect::<Vec<_>>(), vec![Method::Fixed, Method::Adaptive]);
    assert!(rows.iter().all(|r| r.steps == 5 && r.seed == 4 && r.energy_distance >= 0.0));

    let parsed = MetricsRecord::read_json(File::open(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(parsed, record);
    assert_eq!(parsed.distance_metric, DISTANCE_METRIC);
    assert_eq!(parsed.wall_time_ms.len(), 2);
    assert!(parsed.failure.is_none());
    for method in ["fixed", "adaptive"] {
        assert!(dir.path().join(format!("traces/{method}_N5_seed4.jsonl")).exists());
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = run_benchmark(&cfg).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }));
    let message = err.to_string();
    assert!(message.contains(&cfg.denoiser_path().display().to_string()), "{message}");
}
