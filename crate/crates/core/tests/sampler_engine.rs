use adadiffuse::model::{ConditioningMode, Denoiser, NoiseEstimator, NoiseLevelEstimator, NoisePredictor};
use adadiffuse::rng::stream_rng;
use adadiffuse::sampler::{initial_noise_schedule, sample_adaptive, sample_fixed, SamplerConfig, UpdateRule};
use adadiffuse::schedule::{NoiseSchedule, ScheduleKind};
use adadiffuse::{Error, RealBuffer, Result};

fn models(mode: ConditioningMode) -> (Denoiser, NoiseEstimator) {
    let mut rng = stream_rng(77, 0);
    let training = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    (
        Denoiser::new(2, mode, training, &mut rng).unwrap(),
        NoiseEstimator::new(2, &mut rng).unwrap(),
    )
}

fn cfg(steps: usize, rule: UpdateRule) -> SamplerConfig {
    SamplerConfig {
        steps,
        samples: 16,
        update_rule: rule,
        trace_rows: 2,
        ..SamplerConfig::default()
    }
}

struct Constant(f64);

impl NoiseLevelEstimator for Constant {
    fn estimate_alpha_bar(&self, states: &RealBuffer) -> Result<Vec<f64>> {
        Ok(vec![self.0; states.rows()])
    }
}

/// Predicts zero noise; sampling then reduces to pure rescaling.
struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn data_dim(&self) -> usize {
        2
    }
    fn conditioning_mode(&self) -> ConditioningMode {
        ConditioningMode::ContinuousAlpha
    }
    fn predict_noise(&self, states: &RealBuffer, _: &[f64]) -> Result<RealBuffer> {
        RealBuffer::zeros(states.shape().to_vec())
    }
}

#[test]
fn single_step_has_single_trace_entry() {
    let (d, _) = models(ConditioningMode::ContinuousAlpha);
    let c = cfg(1, UpdateRule::Ddpm);
    let out = sample_fixed(&d, &initial_noise_schedule(&c).unwrap(), &c, &mut stream_rng(1, 0)).unwrap();
    assert_eq!(out.traces.len(), 2);
    assert_eq!(out.traces[0].len(), 1);
    assert_eq!(out.traces[0][0].n, 1);
    assert_eq!(out.traces[0][0].alpha_hat, None);
}

#[test]
fn empty_adjustment_set_reduces_to_fixed_sampling() {
    for mode in [ConditioningMode::ContinuousAlpha, ConditioningMode::DiscreteIndex] {
        let (d, e) = models(mode);
        for rule in [UpdateRule::Ddpm, UpdateRule::Ddim] {
            let mut c = cfg(6, rule);
            c.conditioning_mode = mode;
            c.eta = 0.5;
            c.adjust = Some(Vec::new());
            let fixed = sample_fixed(&d, &initial_noise_schedule(&c).unwrap(), &c, &mut stream_rng(3, 0)).unwrap();
            let adaptive = sample_adaptive(&d, &e, &c, &mut stream_rng(3, 0)).unwrap();
            let bits = |b: &RealBuffer| b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&fixed.samples), bits(&adaptive.samples));
            assert_eq!(fixed.initial_noise_hash, adaptive.initial_noise_hash);
            assert_eq!(adaptive.estimator_queries, 0);
        }
    }
}

#[test]
fn every_step_adjusted_gives_one_query_and_resolve_per_step() {
    let (d, e) = models(ConditioningMode::ContinuousAlpha);
    let c = cfg(6, UpdateRule::Ddim);
    let out = sample_adaptive(&d, &e, &c, &mut stream_rng(5, 0)).unwrap();
    assert_eq!(out.estimator_queries, 6);
    assert_eq!(out.resolves, 6);
    for trace in &out.traces {
        assert_eq!(trace.iter().map(|s| s.n).collect::<Vec<_>>(), vec![6, 5, 4, 3, 2, 1]);
        assert!(trace.iter().all(|s| s.alpha_hat.is_some_and(|a| a > 0.0 && a < 1.0)));
        // After the query at step n the row runs on an (n-1)-step schedule.
        for step in &trace[1..] {
            assert_eq!(step.betas.len(), step.n);
            NoiseSchedule::new(step.betas.clone()).unwrap();
        }
    }
}

#[test]
fn queries_follow_the_adjustment_set() {
    let (d, e) = models(ConditioningMode::ContinuousAlpha);
    let mut c = cfg(6, UpdateRule::Ddpm);
    c.adjust = Some(vec![5, 2]);
    let out = sample_adaptive(&d, &e, &c, &mut stream_rng(5, 0)).unwrap();
    assert_eq!(out.estimator_queries, 2);
    let queried: Vec<usize> = out.traces[0].iter().filter(|s| s.alpha_hat.is_some()).map(|s| s.n).collect();
    assert_eq!(queried, vec![5, 2]);
}

#[test]
fn resolved_schedule_hits_the_estimate() {
    // A constant estimate means every re-solve targets the same level.
    let c = SamplerConfig {
        adjust: Some(vec![4]),
        ..cfg(4, UpdateRule::Ddim)
    };
    let out = sample_adaptive(&ZeroNoise, &Constant(0.9), &c, &mut stream_rng(8, 0)).unwrap();
    let after = &out.traces[0][1];
    assert_eq!(after.n, 3);
    let sum: f64 = after.betas.iter().sum();
    assert!((sum + 0.9f64.ln()).abs() < 1e-12);
}

#[test]
fn eta_zero_is_deterministic_in_the_initial_noise() {
    let (d, e) = models(ConditioningMode::DiscreteIndex);
    let c = SamplerConfig {
        conditioning_mode: ConditioningMode::DiscreteIndex,
        family: ScheduleKind::Fibonacci,
        ..cfg(6, UpdateRule::Ddim)
    };
    let a = sample_adaptive(&d, &e, &c, &mut stream_rng(9, 0)).unwrap();
    let b = sample_adaptive(&d, &e, &c, &mut stream_rng(9, 0)).unwrap();
    assert_eq!(a.samples, b.samples);
    let other = sample_adaptive(&d, &e, &c, &mut stream_rng(10, 0)).unwrap();
    assert_ne!(a.initial_noise_hash, other.initial_noise_hash);
}

#[test]
fn solver_failure_aborts_with_partial_trace() {
    let c = SamplerConfig {
        adjust: Some(vec![3]),
        ..cfg(5, UpdateRule::Ddpm)
    };
    let abort = sample_adaptive(&ZeroNoise, &Constant(f64::NAN), &c, &mut stream_rng(2, 0)).unwrap_err();
    assert!(matches!(abort.error, Error::InvalidArgument(_)));
    assert_eq!(abort.traces.len(), 2);
    assert_eq!(abort.traces[0].iter().map(|s| s.n).collect::<Vec<_>>(), vec![5, 4]);
}

#[test]
fn conditioning_mismatch_is_rejected() {
    let (d, _) = models(ConditioningMode::ContinuousAlpha);
    let c = SamplerConfig {
        conditioning_mode: ConditioningMode::DiscreteIndex,
        ..cfg(3, UpdateRule::Ddim)
    };
    assert!(sample_fixed(&d, &initial_noise_schedule(&c).unwrap(), &c, &mut stream_rng(0, 0)).is_err());
}
