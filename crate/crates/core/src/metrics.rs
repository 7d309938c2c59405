//! Sample-quality and estimator metrics, and the records written by the harness.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffusion::forward_diffuse;
use crate::error::{Error, Result};
use crate::model::NoiseLevelEstimator;
use crate::rng::{standard_normals, stream_rng};
use crate::tensor::RealBuffer;

/// Sets larger than this are thinned by a fixed stride before pairing, which
/// keeps every pair term under a million evaluations.
pub const ENERGY_MAX_ROWS: usize = 1000;

fn thin(buf: &RealBuffer) -> Vec<&[f64]> {
    let stride = buf.rows().div_ceil(ENERGY_MAX_ROWS);
    (0..buf.rows()).step_by(stride).map(|i| buf.row(i)).collect()
}

fn mean_distance(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += x.iter().zip(*y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|`, each expectation taken over all
/// ordered pairs including coincident ones.
pub fn energy_distance(a: &RealBuffer, b: &RealBuffer) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs non-empty sets".into()));
    }
    if a.width() != b.width() {
        return Err(Error::Shape(format!(
            "energy distance between widths {} and {}",
            a.width(),
            b.width()
        )));
    }
    let (a, b) = (thin(a), thin(b));
    Ok(2.0 * mean_distance(&a, &b) - mean_distance(&a, &a) - mean_distance(&b, &b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha_bar: f64,
    pub mse: f64,
}

/// For each grid level, noise `samples_per_point` data rows to exactly that
/// level and record the estimator's mean squared error.
pub fn eval_estimator_curve(
    estimator: &dyn NoiseLevelEstimator,
    data: &RealBuffer,
    grid: &[f64],
    samples_per_point: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation grid".into()));
    }
    if samples_per_point == 0 {
        return Err(Error::InvalidArgument("samples_per_point must be positive".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::InvalidArgument(format!("grid level {a} outside (0, 1)")));
    }
    grid.iter()
        .enumerate()
        .map(|(k, &alpha_bar)| {
            let mut rng = stream_rng(seed, k as u64);
            let idx: Vec<usize> = (0..samples_per_point)
                .map(|_| rand::Rng::random_range(&mut rng, 0..data.rows()))
                .collect();
            let y0 = data.gather_rows(&idx)?;
            let eps = RealBuffer::new(y0.shape().to_vec(), standard_normals(&mut rng, y0.len()))?;
            let noisy = forward_diffuse(&y0, alpha_bar, &eps)?;
            let est = estimator.estimate_alpha_bar(&noisy)?;
            let mse = est.iter().map(|e| (e - alpha_bar).powi(2)).sum::<f64>() / est.len() as f64;
            Ok(CurvePoint { alpha_bar, mse })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fixed,
    Adaptive,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fixed => "fixed",
            Method::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    #[serde(rename = "N")]
    pub steps: usize,
    pub seed: u64,
    pub energy_distance: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallTime {
    pub method: Method,
    #[serde(rename = "N")]
    pub steps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean wall time divided by the number of generated samples.
    pub per_sample_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Names the sample-quality statistic so outputs are not mistaken for FID.
    pub distance_metric: String,
    pub estimator_curve: Vec<CurvePoint>,
    pub energy_distance: Vec<BenchRow>,
    pub wall_time_ms: Vec<WallTime>,
    pub clamp_events: usize,
    /// Set when a run stopped early; everything above is what completed.
    pub failure: Option<String>,
}

pub const DISTANCE_METRIC: &str = "energy_distance";

impl MetricsRecord {
    pub fn new() -> Self {
        Self {
            distance_metric: DISTANCE_METRIC.into(),
            ..Self::default()
        }
    }

    /// Order rows by (method, N, seed) so output is independent of completion order.
    pub fn sort(&mut self) {
        self.energy_distance.sort_by_key(|r| (r.method, r.steps, r.seed));
        self.wall_time_ms.sort_by_key(|w| (w.method, w.steps));
    }

    /// Recompute wall-time summaries from the per-run rows.
    pub fn summarize_wall_times(&mut self, samples_per_run: usize) {
        let mut keys: Vec<(Method, usize)> = self.energy_distance.iter().map(|r| (r.method, r.steps)).collect();
        keys.sort();
        keys.dedup();
        self.wall_time_ms = keys
            .into_iter()
            .map(|(method, steps)| {
                let times: Vec<f64> = self
                    .energy_distance
                    .iter()
                    .filter(|r| r.method == method && r.steps == steps)
                    .map(|r| r.wall_ms)
                    .collect();
                let (mean_ms, std_ms) = mean_std(&times);
                WallTime {
                    method,
                    steps,
                    mean_ms,
                    std_ms,
                    per_sample_ms: mean_ms / samples_per_run.max(1) as f64,
                }
            })
            .collect();
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(r: R) -> Result<Vec<CurvePoint>> {
    Ok(csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()?)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_bench_csv<R: Read>(r: R) -> Result<Vec<BenchRow>> {
    Ok(csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(center: f64, n: usize, seed: u64) -> RealBuffer {
        let v = standard_normals(&mut stream_rng(seed, 0), 2 * n);
        RealBuffer::matrix(n, 2, v.into_iter().map(|x| center + 0.1 * x).collect()).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = cluster(0.0, 50, 1);
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singletons_give_twice_the_gap() {
        let a = RealBuffer::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let b = RealBuffer::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert!((energy_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_score_higher_than_a_split() {
        let near = energy_distance(&cluster(0.0, 100, 1), &cluster(0.0, 100, 2)).unwrap();
        let far = energy_distance(&cluster(0.0, 100, 1), &cluster(5.0, 100, 3)).unwrap();
        assert!(far > near);
        assert!(near >= -1e-12);
        let ab = energy_distance(&cluster(0.0, 30, 1), &cluster(1.0, 40, 2)).unwrap();
        let ba = energy_distance(&cluster(1.0, 40, 2), &cluster(0.0, 30, 1)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let a = RealBuffer::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let b = RealBuffer::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(energy_distance(&a, &b), Err(Error::Shape(_))));
    }

    struct Exact(f64);
    impl NoiseLevelEstimator for Exact {
        fn estimate_alpha_bar(&self, states: &RealBuffer) -> Result<Vec<f64>> {
            Ok(vec![self.0; states.rows()])
        }
    }

    #[test]
    fn perfect_estimator_has_zero_curve() {
        let data = cluster(0.0, 20, 4);
        let curve = eval_estimator_curve(&Exact(0.5), &data, &[0.5], 16, 0).unwrap();
        assert_eq!(curve[0].mse, 0.0);
        let curve = eval_estimator_curve(&Exact(0.5), &data, &[0.25], 16, 0).unwrap();
        assert!((curve[0].mse - 0.0625).abs() < 1e-15);
        assert!(eval_estimator_curve(&Exact(0.5), &data, &[], 16, 0).is_err());
        assert!(eval_estimator_curve(&Exact(0.5), &data, &[1.0], 16, 0).is_err());
    }

    #[test]
    fn records_round_trip() {
        let mut m = MetricsRecord::new();
        m.estimator_curve = vec![CurvePoint { alpha_bar: 0.5, mse: 0.01 }];
        m.energy_distance = vec![
            BenchRow { method: Method::Adaptive, steps: 6, seed: 1, energy_distance: 0.07, wall_ms: 3.0 },
            BenchRow { method: Method::Fixed, steps: 6, seed: 1, energy_distance: 0.01, wall_ms: 2.0 },
            BenchRow { method: Method::Fixed, steps: 6, seed: 0, energy_distance: 0.02, wall_ms: 4.0 },
        ];
        m.sort();
        m.summarize_wall_times(10);
        assert_eq!(m.energy_distance[0].seed, 0);
        assert_eq!(m.wall_time_ms[0].mean_ms, 3.0);
        assert_eq!(m.wall_time_ms[0].std_ms, 1.0);

        let mut json = Vec::new();
        m.write_json(&mut json).unwrap();
        assert_eq!(MetricsRecord::read_json(json.as_slice()).unwrap(), m);

        let mut csv_buf = Vec::new();
        write_bench_csv(&m.energy_distance, &mut csv_buf).unwrap();
        assert_eq!(read_bench_csv(csv_buf.as_slice()).unwrap(), m.energy_distance);

        let mut curve_buf = Vec::new();
        write_curve_csv(&m.estimator_curve, &mut curve_buf).unwrap();
        assert_eq!(read_curve_csv(curve_buf.as_slice()).unwrap(), m.estimator_curve);
    }
}
