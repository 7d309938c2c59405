//! Deterministic toy datasets.

use std::f64::consts::TAU;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normals, stream_rng};
use crate::tensor::RealBuffer;

pub const SINUSOID_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "gaussian_mixture_2d")]
    GaussianMixture2d,
    #[serde(rename = "swiss_roll_2d")]
    SwissRoll2d,
    #[serde(rename = "sinusoid_1d")]
    Sinusoid1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub center: [f64; 2],
    pub weight: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
    /// Mixture components; empty selects eight equal-weight components of
    /// std 0.1 on a circle of radius 2.
    pub components: Vec<MixtureComponent>,
    pub roll_noise: f64,
    pub min_cycles: f64,
    pub max_cycles: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture2d,
            size: 10_000,
            seed: 0,
            components: Vec::new(),
            roll_noise: 0.05,
            min_cycles: 1.0,
            max_cycles: 8.0,
        }
    }
}

pub fn default_mixture() -> Vec<MixtureComponent> {
    (0..8)
        .map(|k| {
            let t = TAU * k as f64 / 8.0;
            MixtureComponent {
                center: [2.0 * t.cos(), 2.0 * t.sin()],
                weight: 1.0,
                std: 0.1,
            }
        })
        .collect()
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianMixture2d | DatasetKind::SwissRoll2d => 2,
            DatasetKind::Sinusoid1d => SINUSOID_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("dataset: size must be positive".into()));
        }
        let bad_component = self
            .components
            .iter()
            .any(|c| !(c.weight > 0.0 && c.std >= 0.0 && c.center.iter().all(|v| v.is_finite())));
        if bad_component {
            return Err(Error::Config("dataset: components need positive weight and nonnegative std".into()));
        }
        if self.roll_noise.is_nan() || self.roll_noise < 0.0 {
            return Err(Error::Config("dataset: roll_noise must be nonnegative".into()));
        }
        if !(self.min_cycles > 0.0 && self.min_cycles <= self.max_cycles) {
            return Err(Error::Config("dataset: need 0 < min_cycles <= max_cycles".into()));
        }
        Ok(())
    }

    /// The same spec with a different seed and size, used for held-out batches.
    pub fn with_seed(&self, seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            ..self.clone()
        }
    }
}

fn mixture<R: Rng>(components: &[MixtureComponent], size: usize, rng: &mut R) -> Vec<f64> {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    let mut out = Vec::with_capacity(2 * size);
    for _ in 0..size {
        let mut u = rng.random::<f64>() * total;
        let c = components
            .iter()
            .find(|c| {
                u -= c.weight;
                u < 0.0
            })
            .unwrap_or(&components[components.len() - 1]);
        let g = standard_normals(rng, 2);
        out.push(c.center[0] + c.std * g[0]);
        out.push(c.center[1] + c.std * g[1]);
    }
    out
}

fn swiss_roll<R: Rng>(noise: f64, size: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * size);
    for _ in 0..size {
        let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.random::<f64>());
        let g = standard_normals(rng, 2);
        out.push(t * t.cos() + noise * g[0]);
        out.push(t * t.sin() + noise * g[1]);
    }
    out
}

fn sinusoids<R: Rng>(min_cycles: f64, max_cycles: f64, size: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(SINUSOID_LEN * size);
    for _ in 0..size {
        let cycles = min_cycles + (max_cycles - min_cycles) * rng.random::<f64>();
        let phase = TAU * rng.random::<f64>();
        out.extend((0..SINUSOID_LEN).map(|k| (TAU * cycles * k as f64 / SINUSOID_LEN as f64 + phase).sin()));
    }
    out
}

/// Shift and scale every column to zero mean and unit variance. Constant
/// columns are only centered.
pub fn standardize(buf: &mut RealBuffer) {
    let (rows, w) = (buf.rows(), buf.width());
    for j in 0..w {
        let mean = (0..rows).map(|i| buf.row(i)[j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (buf.row(i)[j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..rows {
            let v = &mut buf.row_mut(i)[j];
            *v = (*v - mean) * scale;
        }
    }
}

/// Generate the dataset described by `spec`, standardized per dimension.
pub fn generate(spec: &DatasetSpec) -> Result<RealBuffer> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let data = match spec.kind {
        DatasetKind::GaussianMixture2d => {
            let comps = if spec.components.is_empty() {
                default_mixture()
            } else {
                spec.components.clone()
            };
            mixture(&comps, spec.size, &mut rng)
        }
        DatasetKind::SwissRoll2d => swiss_roll(spec.roll_noise, spec.size, &mut rng),
        DatasetKind::Sinusoid1d => sinusoids(spec.min_cycles, spec.max_cycles, spec.size, &mut rng),
    };
    let mut buf = RealBuffer::matrix(spec.size, spec.dim(), data)?;
    standardize(&mut buf);
    Ok(buf)
}

/// Rows as CSV with a `x0, x1, ...` header.
pub fn write_samples_csv<W: Write>(samples: &RealBuffer, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((0..samples.width()).map(|j| format!("x{j}")))?;
    for i in 0..samples.rows() {
        w.serialize(samples.row(i))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<RealBuffer> {
    let mut r = csv::Reader::from_reader(reader);
    let rows = r
        .deserialize::<Vec<f64>>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("sample CSV has no rows".into()));
    }
    RealBuffer::from_rows(&rows)
}
