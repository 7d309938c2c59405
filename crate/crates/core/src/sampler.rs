//! Reverse-process samplers: fixed-schedule DDPM/DDIM and adaptive sampling
//! that re-solves the remaining schedule from estimated noise levels.

use std::hash::{Hash, Hasher};
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConditioningMode, NoiseLevelEstimator, NoisePredictor};
use crate::rng::standard_normals;
use crate::schedule::{fibonacci_betas, linear_betas, update_noise_schedule, NoiseSchedule, ScheduleFamily, ScheduleKind, StepParams};
use crate::tensor::RealBuffer;

/// Last beta of the linear initial schedule.
pub const LINEAR_BETA_END: f64 = 2e-2;
/// Tolerance below zero before a DDIM variance counts as inconsistent.
pub const DDIM_VARIANCE_SLACK: f64 = 1e-9;
/// Estimator outputs are kept this far from 0 and 1 before solving.
pub const ESTIMATE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(UpdateRule::Ddpm),
            "ddim" => Ok(UpdateRule::Ddim),
            other => Err(Error::InvalidArgument(format!("unknown update rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Steps at which the estimator is queried; `None` means every step.
    pub adjust: Option<Vec<usize>>,
    pub family: ScheduleKind,
    pub beta0: f64,
    pub update_rule: UpdateRule,
    pub eta: f64,
    pub conditioning_mode: ConditioningMode,
    pub seed: u64,
    pub samples: usize,
    /// How many leading rows get a per-step trace.
    pub trace_rows: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            adjust: None,
            family: ScheduleKind::Linear,
            beta0: 1e-4,
            update_rule: UpdateRule::Ddim,
            eta: 0.0,
            conditioning_mode: ConditioningMode::ContinuousAlpha,
            seed: 0,
            samples: 512,
            trace_rows: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.samples == 0 {
            return Err(Error::Config("sampler: steps and samples must be positive".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("sampler: eta {} must be a nonnegative real", self.eta)));
        }
        if let Some(u) = &self.adjust {
            if let Some(bad) = u.iter().find(|&&n| n == 0 || n > self.steps) {
                return Err(Error::Config(format!(
                    "sampler: adjustment step {bad} outside 1..={}",
                    self.steps
                )));
            }
        }
        self.schedule_family().map_err(|e| Error::Config(format!("sampler: {e}")))?;
        initial_noise_schedule(self).map_err(|e| Error::Config(format!("sampler: {e}")))?;
        Ok(())
    }

    pub fn schedule_family(&self) -> Result<ScheduleFamily> {
        ScheduleFamily::new(self.family, self.beta0)
    }

    /// Whether the estimator is queried after step `n`.
    pub fn adjusts_at(&self, n: usize) -> bool {
        self.adjust.as_ref().is_none_or(|u| u.contains(&n))
    }

    /// A copy with an empty adjustment set.
    pub fn without_adjustment(&self) -> Self {
        Self {
            adjust: Some(Vec::new()),
            ..self.clone()
        }
    }
}

/// The fixed `N`-step baseline schedule for the configured family.
pub fn initial_noise_schedule(cfg: &SamplerConfig) -> Result<NoiseSchedule> {
    let family = cfg.schedule_family()?;
    let betas = match family.kind {
        ScheduleKind::Linear => linear_betas(cfg.steps, family.beta0, LINEAR_BETA_END),
        ScheduleKind::Fibonacci => fibonacci_betas(cfg.steps, family.beta0),
    };
    NoiseSchedule::new(betas)
}

fn check_pair(y: &[f64], eps_hat: &[f64], z: Option<&[f64]>) -> Result<()> {
    if y.len() != eps_hat.len() || z.is_some_and(|z| z.len() != y.len()) {
        return Err(Error::Shape("state, noise estimate and z differ in length".into()));
    }
    Ok(())
}

/// Deterministic part of the DDPM step:
/// `(y_n - beta_n / sqrt(1 - alpha_bar_n) * eps_hat) / sqrt(alpha_n)`.
pub fn ddpm_mean(y: &[f64], eps_hat: &[f64], p: &StepParams) -> Result<Vec<f64>> {
    check_pair(y, eps_hat, None)?;
    let coef = if p.beta == 0.0 {
        0.0
    } else {
        p.beta / (1.0 - p.alpha_bar).sqrt()
    };
    let scale = 1.0 / p.alpha.sqrt();
    Ok(y.iter().zip(eps_hat).map(|(y, e)| (y - coef * e) * scale).collect())
}

/// Full DDPM step; noise of variance `beta_n` is added except at `n = 1`.
pub fn ddpm_update(y: &[f64], eps_hat: &[f64], n: usize, schedule: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    let p = schedule.step(n)?;
    check_pair(y, eps_hat, Some(z))?;
    let mut out = ddpm_mean(y, eps_hat, &p)?;
    if n != 1 {
        let sigma = p.beta.sqrt();
        out.iter_mut().zip(z).for_each(|(o, z)| *o += sigma * z);
    }
    Ok(out)
}

/// `y0_hat = (y_n - sqrt(1 - alpha_bar_n) eps_hat) / sqrt(alpha_bar_n)`.
pub fn predict_clean(y: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y.iter().zip(eps_hat).map(|(y, e)| (y - b * e) / a).collect()
}

/// `eta * sqrt(beta_n (1 - alpha_bar_{n-1}) (1 - alpha_bar_n))`.
pub fn ddim_sigma(p: &StepParams, eta: f64) -> f64 {
    eta * (p.beta * (1.0 - p.alpha_bar_prev) * (1.0 - p.alpha_bar)).sqrt()
}

/// Deterministic part of the DDIM step and the noise scale to pair with `z`.
pub fn ddim_mean(y: &[f64], eps_hat: &[f64], p: &StepParams, eta: f64) -> Result<(Vec<f64>, f64)> {
    check_pair(y, eps_hat, None)?;
    let sigma = ddim_sigma(p, eta);
    let var = 1.0 - p.alpha_bar_prev - sigma * sigma;
    if var < -DDIM_VARIANCE_SLACK {
        return Err(Error::ScheduleInconsistency(format!(
            "DDIM direction variance {var} is negative at step {}",
            p.n
        )));
    }
    let dir = var.max(0.0).sqrt();
    let keep = p.alpha_bar_prev.sqrt();
    let y0 = predict_clean(y, eps_hat, p.alpha_bar);
    Ok((y0.iter().zip(eps_hat).map(|(x, e)| keep * x + dir * e).collect(), sigma))
}

pub fn ddim_update(y: &[f64], eps_hat: &[f64], n: usize, schedule: &NoiseSchedule, eta: f64, z: &[f64]) -> Result<Vec<f64>> {
    let p = schedule.step(n)?;
    check_pair(y, eps_hat, Some(z))?;
    let (mut out, sigma) = ddim_mean(y, eps_hat, &p, eta)?;
    out.iter_mut().zip(z).for_each(|(o, z)| *o += sigma * z);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub n: usize,
    pub alpha_hat: Option<f64>,
    /// Schedule in force while step `n` executed.
    pub betas: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: RealBuffer,
    /// One trace per traced row, each with one entry per executed step.
    pub traces: Vec<Vec<TraceStep>>,
    pub initial_noise_hash: u64,
    /// Batched estimator calls.
    pub estimator_queries: usize,
    /// Steps after which the remaining schedule was replaced.
    pub resolves: usize,
    pub clamp_events: usize,
    pub wall_ms: f64,
}

/// A run that stopped early; carries the trace recorded up to the failure.
#[derive(Debug)]
pub struct SampleAbort {
    pub error: Error,
    pub traces: Vec<Vec<TraceStep>>,
}

impl std::fmt::Display for SampleAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sampling aborted after {} steps: {}", self.traces.first().map_or(0, Vec::len), self.error)
    }
}

impl std::error::Error for SampleAbort {}

impl From<SampleAbort> for Error {
    fn from(a: SampleAbort) -> Self {
        a.error
    }
}

pub type SampleResult = std::result::Result<SampleOutput, SampleAbort>;

pub fn hash_state(state: &RealBuffer) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    state.shape().hash(&mut h);
    for v in state.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Draw `y_N ~ N(0, I)` for `rows` samples of width `dim`.
pub fn initial_state<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Result<RealBuffer> {
    RealBuffer::matrix(rows, dim, standard_normals(rng, rows * dim))
}

/// Run the reverse process with the given initial schedule.
pub fn sample_fixed<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> SampleResult {
    let fixed = cfg.without_adjustment();
    run(denoiser, None, schedule.clone(), &fixed, rng)
}

/// Reverse process that queries the estimator after each step in the
/// adjustment set and replaces the rest of that sample's schedule.
pub fn sample_adaptive<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    estimator: &dyn NoiseLevelEstimator,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> SampleResult {
    let initial = initial_noise_schedule(cfg).map_err(|error| SampleAbort { error, traces: Vec::new() })?;
    run(denoiser, Some(estimator), initial, cfg, rng)
}

fn run<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    estimator: Option<&dyn NoiseLevelEstimator>,
    initial: NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> SampleResult {
    let mut traces: Vec<Vec<TraceStep>> = vec![Vec::new(); cfg.trace_rows.min(cfg.samples)];
    match run_inner(denoiser, estimator, initial, cfg, rng, &mut traces) {
        Ok(out) => Ok(SampleOutput { traces, ..out }),
        Err(error) => Err(SampleAbort { error, traces }),
    }
}

fn run_inner<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    estimator: Option<&dyn NoiseLevelEstimator>,
    initial: NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
    traces: &mut [Vec<TraceStep>],
) -> Result<SampleOutput> {
    if initial.len() != cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps, sampler expects {}",
            initial.len(),
            cfg.steps
        )));
    }
    if denoiser.conditioning_mode() != cfg.conditioning_mode {
        return Err(Error::InvalidArgument(format!(
            "denoiser was trained with {:?} conditioning, sampler requests {:?}",
            denoiser.conditioning_mode(),
            cfg.conditioning_mode
        )));
    }
    let family = cfg.schedule_family()?;
    let rows = cfg.samples;
    let dim = denoiser.data_dim();
    let started = Instant::now();

    let mut state = initial_state(rows, dim, rng)?;
    let initial_noise_hash = hash_state(&state);
    // Every row starts on the shared schedule; adaptive steps give rows their own.
    let mut schedules: Vec<NoiseSchedule> = vec![initial; rows];
    let (mut queries, mut resolves, mut clamp_events) = (0, 0, 0);

    for n in (1..=cfg.steps).rev() {
        let step_started = Instant::now();
        let params: Vec<StepParams> = schedules.iter().map(|s| s.step(n)).collect::<Result<_>>()?;
        let levels: Vec<f64> = params.iter().map(|p| p.alpha_bar).collect();
        let eps_hat = denoiser.predict_noise(&state, &levels)?;

        let mut next = Vec::with_capacity(state.len());
        let mut sigmas = Vec::with_capacity(rows);
        for (i, p) in params.iter().enumerate() {
            let (mean, sigma) = match cfg.update_rule {
                UpdateRule::Ddpm => (ddpm_mean(state.row(i), eps_hat.row(i), p)?, p.beta.sqrt()),
                UpdateRule::Ddim => ddim_mean(state.row(i), eps_hat.row(i), p, cfg.eta)?,
            };
            next.extend(mean);
            sigmas.push(sigma);
        }
        let mut next = RealBuffer::matrix(rows, dim, next)?;
        let before: Vec<Vec<f64>> = traces.iter().enumerate().map(|(i, _)| schedules[i].betas().to_vec()).collect();

        let mut alpha_hat = None;
        if let Some(est) = estimator.filter(|_| cfg.adjusts_at(n)) {
            let estimates = est.estimate_alpha_bar(&next)?;
            queries += 1;
            resolves += 1;
            if n > 1 {
                for (i, &a) in estimates.iter().enumerate() {
                    let solved = update_noise_schedule(a.clamp(ESTIMATE_CLAMP, 1.0 - ESTIMATE_CLAMP), n - 1, family)?;
                    clamp_events += solved.clamped();
                    // The DDPM noise for this step follows the newly installed schedule.
                    if cfg.update_rule == UpdateRule::Ddpm {
                        sigmas[i] = solved.betas()[n - 2].sqrt();
                    }
                    schedules[i] = solved;
                }
            }
            alpha_hat = Some(estimates);
        }

        if n != 1 {
            let z = standard_normals(rng, next.len());
            for (i, sigma) in sigmas.iter().enumerate() {
                next.row_mut(i)
                    .iter_mut()
                    .zip(&z[i * dim..(i + 1) * dim])
                    .for_each(|(v, z)| *v += sigma * z);
            }
        }
        next.ensure_finite(&format!("state after step {n}"))?;
        state = next;

        let wall_ms = step_started.elapsed().as_secs_f64() * 1e3;
        for (i, (trace, betas)) in traces.iter_mut().zip(before).enumerate() {
            trace.push(TraceStep {
                n,
                alpha_hat: alpha_hat.as_ref().map(|a| a[i]),
                betas,
                wall_ms,
            });
        }
    }

    Ok(SampleOutput {
        samples: state,
        traces: Vec::new(),
        initial_noise_hash,
        estimator_queries: queries,
        resolves,
        clamp_events,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Write one JSON object per step.
pub fn write_trace_jsonl<W: Write>(trace: &[TraceStep], mut w: W) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<TraceStep>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
