//! Forward diffusion, noise-level sampling and the two training loops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, NoiseEstimator};
use crate::optim::{adam_step, AdamState};
use crate::rng::{standard_normals, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::RealBuffer;

/// Clamp applied to noise levels before taking `log(1 - alpha_bar)`.
pub const LEVEL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Training-time diffusion length `N`.
    pub stage_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final model.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            total_steps: 20_000,
            seed: 0,
            stage_count: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.total_steps > 0
            && self.stage_count > 0;
        if !positive {
            return Err(Error::Config(
                "train: learning_rate, batch_size, total_steps and stage_count must be positive".into(),
            ));
        }
        self.training_schedule().map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(())
    }

    pub fn training_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.stage_count, self.beta_start, self.beta_end)
    }
}

/// `sqrt(alpha_bar) * y0 + sqrt(1 - alpha_bar) * eps`.
pub fn forward_diffuse(y0: &RealBuffer, alpha_bar: f64, epsilon: &RealBuffer) -> Result<RealBuffer> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    if !y0.same_shape(epsilon) {
        return Err(Error::Shape(format!(
            "clean sample {:?} and noise {:?} differ in shape",
            y0.shape(),
            epsilon.shape()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = y0.data().iter().zip(epsilon.data()).map(|(y, e)| a * y + b * e).collect();
    RealBuffer::new(y0.shape().to_vec(), data)
}

/// Draw a stage `s` uniformly from `1..=N` and `sqrt(alpha_bar)` uniformly
/// between `l_s` and `l_{s-1}`.
pub fn sample_noise_level<R: Rng + ?Sized>(rng: &mut R, boundaries: &[f64], stage_count: usize) -> (usize, f64) {
    debug_assert_eq!(boundaries.len(), stage_count + 1);
    let s = rng.random_range(1..=stage_count);
    let u: f64 = rng.random();
    let (lo, hi) = (boundaries[s], boundaries[s - 1]);
    (s, lo + u * (hi - lo))
}

/// Clean samples together with their noised versions.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub y0: RealBuffer,
    pub y_s: RealBuffer,
    pub stages: Vec<usize>,
    pub sqrt_alpha_bar: Vec<f64>,
    pub epsilon: RealBuffer,
}

impl NoisyBatch {
    pub fn draw<R: Rng + ?Sized>(y0: RealBuffer, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let rows = y0.rows();
        let mut stages = Vec::with_capacity(rows);
        let mut levels = Vec::with_capacity(rows);
        for _ in 0..rows {
            let (s, level) = sample_noise_level(rng, schedule.boundaries(), schedule.len());
            stages.push(s);
            levels.push(level);
        }
        let epsilon = RealBuffer::new(y0.shape().to_vec(), standard_normals(rng, y0.len()))?;
        let w = y0.width();
        let mut y_s = Vec::with_capacity(y0.len());
        for (i, &level) in levels.iter().enumerate() {
            let noise_scale = (1.0 - level * level).sqrt();
            y_s.extend(
                y0.row(i)
                    .iter()
                    .zip(&epsilon.data()[i * w..(i + 1) * w])
                    .map(|(y, e)| level * y + noise_scale * e),
            );
        }
        Ok(Self {
            y_s: RealBuffer::new(y0.shape().to_vec(), y_s)?,
            y0,
            stages,
            sqrt_alpha_bar: levels,
            epsilon,
        })
    }
}

/// Mean over the batch of the per-sample L1 norm, with its gradient w.r.t. the prediction.
pub fn l1_noise_loss(predicted: &RealBuffer, target: &RealBuffer) -> (f64, RealBuffer) {
    let rows = predicted.rows() as f64;
    let mut loss = 0.0;
    let grad = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / rows
            } else if d < 0.0 {
                -1.0 / rows
            } else {
                0.0
            }
        })
        .collect();
    let grad = RealBuffer::new(predicted.shape().to_vec(), grad).expect("shape copied");
    (loss / rows, grad)
}

fn clamp_level(a: f64) -> f64 {
    a.clamp(LEVEL_CLAMP, 1.0 - LEVEL_CLAMP)
}

/// Root mean square of `log(1 - alpha_bar) - log(1 - alpha_bar_hat)` over the batch.
pub fn estimator_loss(alpha_bar_true: &[f64], alpha_bar_hat: &[f64]) -> f64 {
    estimator_loss_with_gradient(alpha_bar_true, alpha_bar_hat).0
}

/// Loss together with its gradient w.r.t. each `alpha_bar_hat`.
pub fn estimator_loss_with_gradient(alpha_bar_true: &[f64], alpha_bar_hat: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(alpha_bar_true.len(), alpha_bar_hat.len());
    let n = alpha_bar_true.len() as f64;
    let gaps: Vec<f64> = alpha_bar_true
        .iter()
        .zip(alpha_bar_hat)
        .map(|(&a, &h)| (1.0 - clamp_level(a)).ln() - (1.0 - clamp_level(h)).ln())
        .collect();
    let rms = (gaps.iter().map(|g| g * g).sum::<f64>() / n).sqrt();
    if rms == 0.0 {
        return (0.0, vec![0.0; gaps.len()]);
    }
    let grad = gaps
        .iter()
        .zip(alpha_bar_hat)
        .map(|(g, &h)| {
            if (LEVEL_CLAMP..=1.0 - LEVEL_CLAMP).contains(&h) {
                g / (n * rms) / (1.0 - h)
            } else {
                0.0
            }
        })
        .collect();
    (rms, grad)
}

/// One step of denoiser training: noise a batch at sampled levels, predict
/// the noise, and descend on the L1 error.
pub fn denoiser_train_step<R: Rng + ?Sized>(
    denoiser: &mut Denoiser,
    optimizer: &mut AdamState,
    y0: RealBuffer,
    rng: &mut R,
) -> Result<f64> {
    let batch = NoisyBatch::draw(y0, denoiser.training_schedule(), rng)?;
    let conditioning: Vec<f64> = match denoiser.mode() {
        crate::model::ConditioningMode::ContinuousAlpha => batch.sqrt_alpha_bar.clone(),
        crate::model::ConditioningMode::DiscreteIndex => batch
            .stages
            .iter()
            .map(|&s| denoiser.conditioning_for_stage(s))
            .collect(),
    };
    let input = denoiser.build_input(&batch.y_s, &conditioning)?;
    let predicted = denoiser.net.forward(&input)?;
    let (loss, grad_out) = l1_noise_loss(&predicted, &batch.epsilon);
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoiser loss".into()));
    }
    let grads = denoiser.net.backward(&grad_out)?;
    adam_step(denoiser.net.params_mut(), &grads, optimizer)?;
    Ok(loss)
}

/// One step of estimator training on the log-space level loss.
pub fn estimator_train_step<R: Rng + ?Sized>(
    estimator: &mut NoiseEstimator,
    optimizer: &mut AdamState,
    training_schedule: &NoiseSchedule,
    y0: RealBuffer,
    rng: &mut R,
) -> Result<f64> {
    let batch = NoisyBatch::draw(y0, training_schedule, rng)?;
    let predicted = estimator.net.forward(&batch.y_s)?;
    let truth: Vec<f64> = batch.sqrt_alpha_bar.iter().map(|l| l * l).collect();
    let (loss, grad) = estimator_loss_with_gradient(&truth, predicted.data());
    if !loss.is_finite() {
        return Err(Error::NonFinite("estimator loss".into()));
    }
    let grads = estimator.net.backward(&RealBuffer::matrix(grad.len(), 1, grad)?)?;
    adam_step(estimator.net.params_mut(), &grads, optimizer)?;
    Ok(loss)
}

fn draw_minibatch<R: Rng + ?Sized>(data: &RealBuffer, batch_size: usize, rng: &mut R) -> Result<RealBuffer> {
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.rows())).collect();
    data.gather_rows(&idx)
}

/// Progress hook invoked after every step with `(step, loss)`; returning an
/// error aborts training.
pub type StepHook<'a, M> = dyn FnMut(usize, f64, &M) -> Result<()> + 'a;

/// Train a fresh denoiser. Step `k` draws all of its randomness from stream
/// `k` of `cfg.seed`, so the loss sequence is a function of the config.
pub fn train_denoiser(
    data: &RealBuffer,
    cfg: &TrainConfig,
    mode: crate::model::ConditioningMode,
    hook: &mut StepHook<'_, Denoiser>,
) -> Result<Denoiser> {
    cfg.validate()?;
    let schedule = cfg.training_schedule()?;
    let mut init = stream_rng(cfg.seed, crate::rng::INIT_STREAM);
    let mut denoiser = Denoiser::new(data.width(), mode, schedule, &mut init)?;
    let mut opt = AdamState::new(denoiser.net.params(), cfg.learning_rate);
    for step in 0..cfg.total_steps {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let y0 = draw_minibatch(data, cfg.batch_size, &mut rng)?;
        let loss = denoiser_train_step(&mut denoiser, &mut opt, y0, &mut rng)?;
        hook(step + 1, loss, &denoiser)?;
    }
    Ok(denoiser)
}

/// Train a fresh noise-level estimator; same stream discipline as
/// [`train_denoiser`] under a distinct seed offset.
pub fn train_estimator(data: &RealBuffer, cfg: &TrainConfig, hook: &mut StepHook<'_, NoiseEstimator>) -> Result<NoiseEstimator> {
    cfg.validate()?;
    let schedule = cfg.training_schedule()?;
    let seed = cfg.seed ^ ESTIMATOR_SEED_OFFSET;
    let mut init = stream_rng(seed, crate::rng::INIT_STREAM);
    let mut estimator = NoiseEstimator::new(data.width(), &mut init)?;
    let mut opt = AdamState::new(estimator.net.params(), cfg.learning_rate);
    for step in 0..cfg.total_steps {
        let mut rng = stream_rng(seed, step as u64);
        let y0 = draw_minibatch(data, cfg.batch_size, &mut rng)?;
        let loss = estimator_train_step(&mut estimator, &mut opt, &schedule, y0, &mut rng)?;
        hook(step + 1, loss, &estimator)?;
    }
    Ok(estimator)
}

const ESTIMATOR_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
