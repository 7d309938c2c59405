//! The two networks used by the samplers: the noise predictor and the
//! noise-level estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Network, NetworkParams};
use crate::schedule::{index_for_level, NoiseSchedule};
use crate::tensor::RealBuffer;

pub const DENOISER_HIDDEN: [usize; 3] = [128, 128, 128];
pub const ESTIMATOR_HIDDEN: [usize; 2] = [64, 64];
pub const EMBEDDING_DIM: usize = 16;

/// How the noise predictor is told the noise level of its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// The continuous level `sqrt(alpha_bar)`.
    ContinuousAlpha,
    /// The training-stage index `t` whose interval contains the level, fed as `t / N`.
    DiscreteIndex,
}

impl ConditioningMode {
    pub fn tag(self) -> u32 {
        match self {
            ConditioningMode::ContinuousAlpha => 0,
            ConditioningMode::DiscreteIndex => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ConditioningMode::ContinuousAlpha),
            1 => Some(ConditioningMode::DiscreteIndex),
            _ => None,
        }
    }
}

/// Sinusoidal features of a conditioning scalar in `[0, 1]`.
pub fn sinusoidal_embedding(c: f64) -> [f64; EMBEDDING_DIM] {
    let half = EMBEDDING_DIM / 2;
    let mut out = [0.0; EMBEDDING_DIM];
    for k in 0..half {
        // Frequencies from 1000 down to 1.
        let freq = 1000f64.powf(1.0 - k as f64 / (half - 1) as f64);
        let arg = c * freq;
        out[k] = arg.sin();
        out[k + half] = arg.cos();
    }
    out
}

/// Predicts the injected noise from a noisy state and its noise level.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;
    fn conditioning_mode(&self) -> ConditioningMode;
    /// `states` is `[batch, dim]`; `alpha_bars` holds the level of each row.
    fn predict_noise(&self, states: &RealBuffer, alpha_bars: &[f64]) -> Result<RealBuffer>;
}

/// Estimates the cumulative noise level `alpha_bar` of each state.
pub trait NoiseLevelEstimator: Sync {
    fn estimate_alpha_bar(&self, states: &RealBuffer) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: Network,
    mode: ConditioningMode,
    training_schedule: NoiseSchedule,
    data_dim: usize,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        mode: ConditioningMode,
        training_schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let params = NetworkParams::mlp(
            data_dim + 1 + EMBEDDING_DIM,
            &DENOISER_HIDDEN,
            data_dim,
            Activation::Identity,
            rng,
        )?;
        Self::from_params(params, mode, training_schedule)
    }

    pub fn from_params(params: NetworkParams, mode: ConditioningMode, training_schedule: NoiseSchedule) -> Result<Self> {
        let data_dim = params.output_dim();
        if params.input_dim() != data_dim + 1 + EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "denoiser input width {} does not match data dim {data_dim}",
                params.input_dim()
            )));
        }
        Ok(Self {
            net: Network::new(params),
            mode,
            training_schedule,
            data_dim,
        })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    /// The schedule the denoiser was trained with; its boundaries define the
    /// discrete index table.
    pub fn training_schedule(&self) -> &NoiseSchedule {
        &self.training_schedule
    }

    pub fn stage_count(&self) -> usize {
        self.training_schedule.len()
    }

    pub fn conditioning_for_stage(&self, stage: usize) -> f64 {
        stage as f64 / self.stage_count() as f64
    }

    pub fn conditioning_for_level(&self, alpha_bar: f64) -> f64 {
        match self.mode {
            ConditioningMode::ContinuousAlpha => alpha_bar.max(0.0).sqrt(),
            ConditioningMode::DiscreteIndex => {
                let t = index_for_level(alpha_bar, self.training_schedule.boundaries());
                self.conditioning_for_stage(t)
            }
        }
    }

    /// Network input rows `[state, c, embed(c)]`.
    pub fn build_input(&self, states: &RealBuffer, conditioning: &[f64]) -> Result<RealBuffer> {
        if states.width() != self.data_dim || states.rows() != conditioning.len() {
            return Err(Error::Shape(format!(
                "expected {} states of width {}, got shape {:?}",
                conditioning.len(),
                self.data_dim,
                states.shape()
            )));
        }
        let width = self.data_dim + 1 + EMBEDDING_DIM;
        let mut data = Vec::with_capacity(conditioning.len() * width);
        for (i, &c) in conditioning.iter().enumerate() {
            data.extend_from_slice(states.row(i));
            data.push(c);
            data.extend_from_slice(&sinusoidal_embedding(c));
        }
        RealBuffer::matrix(conditioning.len(), width, data)
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn conditioning_mode(&self) -> ConditioningMode {
        self.mode
    }

    fn predict_noise(&self, states: &RealBuffer, alpha_bars: &[f64]) -> Result<RealBuffer> {
        let c: Vec<f64> = alpha_bars.iter().map(|&a| self.conditioning_for_level(a)).collect();
        self.net.predict(&self.build_input(states, &c)?)
    }
}

#[derive(Debug, Clone)]
pub struct NoiseEstimator {
    pub net: Network,
}

impl NoiseEstimator {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, rng: &mut R) -> Result<Self> {
        let params = NetworkParams::mlp(data_dim, &ESTIMATOR_HIDDEN, 1, Activation::Sigmoid, rng)?;
        Self::from_params(params)
    }

    pub fn from_params(params: NetworkParams) -> Result<Self> {
        if params.output_dim() != 1 {
            return Err(Error::Shape("estimator must have a single output".into()));
        }
        if params.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::Shape("estimator must end in a sigmoid".into()));
        }
        Ok(Self {
            net: Network::new(params),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.net.params().input_dim()
    }
}

impl NoiseLevelEstimator for NoiseEstimator {
    fn estimate_alpha_bar(&self, states: &RealBuffer) -> Result<Vec<f64>> {
        Ok(self.net.predict(states)?.into_data())
    }
}
