//! Noise-schedule algebra.
//!
//! A schedule is a sequence of noise parameters `beta_1..beta_N`, ordered from
//! the step nearest the data (`beta_1`) to the noisiest step (`beta_N`). From
//! it derive `alpha_i = 1 - beta_i`, the cumulative products
//! `alpha_bar_n = prod_{i<=n} alpha_i` and the interval boundaries
//! `l_0 = 1, l_s = sqrt(alpha_bar_s)` that partition noise levels into steps.
//!
//! The two solvers recover a full schedule of a given length from a target
//! cumulative level `alpha_bar_hat` and the first parameter `beta0`, using the
//! first-order approximation `log(alpha_bar) ~ -sum(beta)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_MIN: f64 = 1e-6;
pub const BETA_MAX: f64 = 0.999;
pub const BETA0_MAX: f64 = 1e-2;

const PHI: f64 = 1.618_033_988_749_895;
const PSI: f64 = -0.618_033_988_749_894_9;

fn check_raw_betas(betas: &[f64]) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::InvalidArgument("empty beta sequence".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
        return Err(Error::InvalidArgument(format!("beta {b} outside [0, 1)")));
    }
    Ok(())
}

/// `alpha_bar_n = prod_{i<=n} (1 - beta_i)` for `n = 1..N`.
pub fn cumulative_alpha_bar(betas: &[f64]) -> Result<Vec<f64>> {
    check_raw_betas(betas)?;
    Ok(betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect())
}

/// `l_0 = 1`, `l_s = sqrt(alpha_bar_s)`; length `N + 1`.
pub fn boundaries(betas: &[f64]) -> Result<Vec<f64>> {
    let mut l = Vec::with_capacity(betas.len() + 1);
    l.push(1.0);
    l.extend(cumulative_alpha_bar(betas)?.into_iter().map(f64::sqrt));
    Ok(l)
}

/// Index `t >= 1` of the interval `[l_t, l_{t-1}]` containing
/// `sqrt(alpha_bar_hat)`. Levels above the top interval map to 1, below the
/// last boundary to `N`; a level sitting exactly on a boundary takes the
/// smaller index.
pub fn index_for_level(alpha_bar_hat: f64, l: &[f64]) -> usize {
    assert!(l.len() >= 2, "boundary table needs at least one interval");
    let level = alpha_bar_hat.max(0.0).sqrt();
    let n = l.len() - 1;
    // l[1..] is decreasing; count the boundaries strictly above the level.
    let above = l[1..].partition_point(|&b| b > level);
    (above + 1).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Fibonacci,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "fibonacci" => Ok(ScheduleKind::Fibonacci),
            other => Err(Error::Config(format!(
                "unknown schedule family {other:?} (expected linear or fibonacci)"
            ))),
        }
    }
}

/// Solver selector together with the first noise parameter it is seeded with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFamily {
    pub kind: ScheduleKind,
    pub beta0: f64,
}

impl ScheduleFamily {
    pub fn new(kind: ScheduleKind, beta0: f64) -> Result<Self> {
        check_beta0(beta0)?;
        Ok(Self { kind, beta0 })
    }
}

fn check_beta0(beta0: f64) -> Result<()> {
    if !(BETA_MIN..=BETA0_MAX).contains(&beta0) {
        return Err(Error::InvalidArgument(format!(
            "beta0 {beta0} outside [{BETA_MIN}, {BETA0_MAX}]"
        )));
    }
    Ok(())
}

fn check_solver_args(alpha_bar_hat: f64, n: usize, beta0: f64) -> Result<()> {
    if !(alpha_bar_hat > 0.0 && alpha_bar_hat < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar_hat {alpha_bar_hat} outside (0, 1)"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("step count must be at least 1".into()));
    }
    check_beta0(beta0)
}

/// Solver output before and after clamping into `[BETA_MIN, BETA_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedBetas {
    pub raw: Vec<f64>,
    pub betas: Vec<f64>,
    pub clamped: usize,
}

impl SolvedBetas {
    fn from_raw(raw: Vec<f64>) -> Self {
        let betas: Vec<f64> = raw.iter().map(|b| b.clamp(BETA_MIN, BETA_MAX)).collect();
        let clamped = raw.iter().zip(&betas).filter(|(r, c)| r != c).count();
        Self { raw, betas, clamped }
    }
}

/// Linear schedule `beta_i = beta0 + i*x` whose sum equals `-log(alpha_bar_hat)`,
/// with `x = -2 (log(alpha_bar_hat) + n*beta0) / (n (n - 1))`.
///
/// A single step is solved exactly as `[1 - alpha_bar_hat]`.
pub fn solve_linear(alpha_bar_hat: f64, n: usize, beta0: f64) -> Result<SolvedBetas> {
    check_solver_args(alpha_bar_hat, n, beta0)?;
    if n == 1 {
        return Ok(SolvedBetas::from_raw(vec![1.0 - alpha_bar_hat]));
    }
    let x = linear_increment(alpha_bar_hat, n, beta0);
    let raw = (0..n).map(|i| beta0 + i as f64 * x).collect();
    Ok(SolvedBetas::from_raw(raw))
}

pub(crate) fn linear_increment(alpha_bar_hat: f64, n: usize, beta0: f64) -> f64 {
    let nf = n as f64;
    -2.0 * (alpha_bar_hat.ln() + nf * beta0) / (nf * (nf - 1.0))
}

/// Fibonacci schedule `beta_{i+2} = beta_{i+1} + beta_i` pinned at
/// `beta_0 = beta0` with `sum beta_i = -log(alpha_bar_hat)`.
///
/// The closed form is `beta_i = A phi^i + B psi^i` with `phi, psi` the roots
/// of `x^2 - x - 1`; `(A, B)` solve
/// `A + B = beta0`, `A S(phi) + B S(psi) = -log(alpha_bar_hat)` where
/// `S(r) = (r^n - 1) / (r - 1)` is the geometric sum over the `n` steps.
pub fn solve_fibonacci(alpha_bar_hat: f64, n: usize, beta0: f64) -> Result<SolvedBetas> {
    check_solver_args(alpha_bar_hat, n, beta0)?;
    let total = -alpha_bar_hat.ln();
    match n {
        1 => return Ok(SolvedBetas::from_raw(vec![1.0 - alpha_bar_hat])),
        2 => return Ok(SolvedBetas::from_raw(vec![beta0, total - beta0])),
        _ => {}
    }
    let (a, b) = fibonacci_constants(total, n, beta0)?;
    let mut raw: Vec<f64> = (0..n as i32)
        .map(|i| a * PHI.powi(i) + b * PSI.powi(i))
        .collect();
    // a + b can round away from beta0, enough to trip the lower clamp.
    raw[0] = beta0;
    Ok(SolvedBetas::from_raw(raw))
}

fn fibonacci_constants(total: f64, n: usize, beta0: f64) -> Result<(f64, f64)> {
    let exponent = i32::try_from(n).map_err(|_| Error::Solver(format!("step count {n} too large")))?;
    let geometric = |r: f64| (r.powi(exponent) - 1.0) / (r - 1.0);
    let (s_phi, s_psi) = (geometric(PHI), geometric(PSI));
    let det = s_phi - s_psi;
    if !det.is_finite() || det == 0.0 {
        return Err(Error::Solver(format!(
            "degenerate Fibonacci system for {n} steps"
        )));
    }
    let a = (total - beta0 * s_psi) / det;
    Ok((a, beta0 - a))
}

/// Coefficients needed to take reverse step `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub n: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    /// `alpha_bar_{n-1}`, with `alpha_bar_0 = 1`.
    pub alpha_bar_prev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    boundaries: Vec<f64>,
    clamped: usize,
}

impl NoiseSchedule {
    /// Validate `betas` against the schedule invariants and materialize the
    /// derived sequences.
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(BETA_MIN..=BETA_MAX).contains(*b)) {
            return Err(Error::InvalidArgument(format!(
                "beta {b} outside [{BETA_MIN}, {BETA_MAX}]"
            )));
        }
        let alpha_bars = cumulative_alpha_bar(&betas)?;
        let decreasing = alpha_bars[0] < 1.0
            && alpha_bars.windows(2).all(|w| w[1] < w[0])
            && alpha_bars.last().is_some_and(|&a| a > 0.0);
        if !decreasing {
            return Err(Error::ScheduleInconsistency(
                "cumulative products are not strictly decreasing (underflow?)".into(),
            ));
        }
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        let mut boundaries = Vec::with_capacity(betas.len() + 1);
        boundaries.push(1.0);
        boundaries.extend(alpha_bars.iter().map(|a| a.sqrt()));
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            boundaries,
            clamped: 0,
        })
    }

    /// Evenly spaced betas from `start` to `end` over `n` steps (`[start]` for one step).
    pub fn linear(n: usize, start: f64, end: f64) -> Result<Self> {
        Self::new(linear_betas(n, start, end))
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Number of solver outputs that were clamped when this schedule was produced.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn step(&self, n: usize) -> Result<StepParams> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "step {n} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(StepParams {
            n,
            beta: self.betas[n - 1],
            alpha: self.alphas[n - 1],
            alpha_bar: self.alpha_bars[n - 1],
            alpha_bar_prev: if n == 1 { 1.0 } else { self.alpha_bars[n - 2] },
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "beta", "alpha_bar", "l"])?;
        for (i, ((b, a), l)) in self
            .betas
            .iter()
            .zip(&self.alpha_bars)
            .zip(&self.boundaries[1..])
            .enumerate()
        {
            w.serialize((i + 1, b, a, l))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Rebuild a schedule from the beta column of [`write_csv`](Self::write_csv) output.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            #[allow(dead_code)]
            i: usize,
            beta: f64,
        }
        let mut r = csv::Reader::from_reader(reader);
        let betas = r
            .deserialize::<Row>()
            .map(|row| row.map(|r| r.beta))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(betas)
    }
}

pub fn linear_betas(n: usize, start: f64, end: f64) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + i as f64 * step).collect()
}

/// Fibonacci recurrence seeded `(beta0, beta0)`, truncated to `n` and clamped.
pub fn fibonacci_betas(n: usize, beta0: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let (mut a, mut b) = (beta0, beta0);
    for _ in 0..n {
        out.push(a.clamp(BETA_MIN, BETA_MAX));
        (a, b) = (b, a + b);
    }
    out
}

/// Re-derive the schedule for the `n` remaining steps from an estimated
/// noise level.
pub fn update_noise_schedule(alpha_bar_hat: f64, n: usize, family: ScheduleFamily) -> Result<NoiseSchedule> {
    let solved = match family.kind {
        ScheduleKind::Linear => solve_linear(alpha_bar_hat, n, family.beta0)?,
        ScheduleKind::Fibonacci => solve_fibonacci(alpha_bar_hat, n, family.beta0)?,
    };
    let mut schedule = NoiseSchedule::new(solved.betas)?;
    schedule.clamped = solved.clamped;
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundaries_small_cases() {
        assert!(boundaries(&[]).is_err());
        assert_eq!(boundaries(&[0.0]).unwrap(), vec![1.0, 1.0]);
        let l = boundaries(&[0.19]).unwrap();
        assert!((l[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn boundaries_match_direct_product() {
        let l = boundaries(&[0.01; 10]).unwrap();
        assert_eq!(l.len(), 11);
        assert!((l[10] - 0.99f64.powi(10).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn cumulative_small_cases() {
        assert_eq!(cumulative_alpha_bar(&[0.0; 3]).unwrap(), vec![1.0; 3]);
        assert_eq!(cumulative_alpha_bar(&[0.5, 0.5]).unwrap(), vec![0.5, 0.25]);
    }

    #[test]
    fn boundaries_square_to_cumulative_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let betas: Vec<f64> = (0..20).map(|_| rng.random_range(BETA_MIN..0.2)).collect();
        let l = boundaries(&betas).unwrap();
        let a = cumulative_alpha_bar(&betas).unwrap();
        for s in 1..=20 {
            assert!((l[s] * l[s] - a[s - 1]).abs() <= 1e-12);
        }
        assert!(a.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn linear_constant_when_numerator_vanishes() {
        let (n, b0) = (5, 1e-3);
        let s = solve_linear((-(n as f64) * b0).exp(), n, b0).unwrap();
        for b in &s.raw {
            assert!((b - b0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_is_exact() {
        for solve in [solve_linear, solve_fibonacci] {
            let s = solve(0.37, 1, 1e-4).unwrap();
            assert_eq!(s.raw, vec![1.0 - 0.37]);
        }
    }

    #[test]
    fn linear_two_step_example() {
        let s = solve_linear(0.8, 2, 0.01).unwrap();
        let x = -(0.8f64.ln() + 0.02);
        assert!((s.raw[1] - s.raw[0] - x).abs() < 1e-15);
        assert!((s.raw.iter().sum::<f64>() + 0.8f64.ln()).abs() < 1e-15);
        // Outside the small-beta regime: the product misses 0.8 by ~2.6%.
        let prod: f64 = s.betas.iter().map(|b| 1.0 - b).product();
        assert!((prod - 0.99 * (1.0 - (0.01 + x))).abs() < 1e-15);
        assert!(((prod - 0.8) / 0.8).abs() < 0.03);
    }

    #[test]
    fn solver_argument_errors() {
        for solve in [solve_linear, solve_fibonacci] {
            assert!(solve(0.0, 3, 1e-4).is_err());
            assert!(solve(1.0, 3, 1e-4).is_err());
            assert!(solve(0.5, 0, 1e-4).is_err());
            assert!(solve(0.5, 3, 0.5).is_err());
        }
    }

    #[test]
    fn fibonacci_two_steps() {
        let s = solve_fibonacci(0.5, 2, 1e-4).unwrap();
        assert_eq!(s.raw, vec![1e-4, 2f64.ln() - 1e-4]);
    }

    /// Independent 2x2 solve by Gaussian elimination on the explicit sums.
    fn oracle_fibonacci(alpha_bar_hat: f64, n: usize, beta0: f64) -> Vec<f64> {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let psi = (1.0 - 5f64.sqrt()) / 2.0;
        let s_phi: f64 = (0..n).map(|i| phi.powi(i as i32)).sum();
        let s_psi: f64 = (0..n).map(|i| psi.powi(i as i32)).sum();
        // [1 1; s_phi s_psi] [A B]^T = [beta0, -log a]^T
        let (m00, m01, r0) = (1.0, 1.0, beta0);
        let (m10, m11, r1) = (s_phi, s_psi, -alpha_bar_hat.ln());
        let f = m10 / m00;
        let b = (r1 - f * r0) / (m11 - f * m01);
        let a = (r0 - m01 * b) / m00;
        (0..n).map(|i| a * phi.powi(i as i32) + b * psi.powi(i as i32)).collect()
    }

    #[test]
    fn fibonacci_six_step_example() {
        let s = solve_fibonacci(0.5, 6, 1e-4).unwrap();
        let oracle = oracle_fibonacci(0.5, 6, 1e-4);
        for (a, b) in s.raw.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in s.raw.windows(3) {
            assert!((w[2] - w[1] - w[0]).abs() <= 1e-12);
        }
        assert!((s.raw.iter().sum::<f64>() - 2f64.ln()).abs() <= 1e-10);
        assert!((s.raw[0] - 1e-4).abs() <= 1e-12);
    }

    #[test]
    fn update_linear_constant_schedule() {
        let b0: f64 = 2e-3;
        let s = update_noise_schedule(
            (-3.0 * b0).exp(),
            3,
            ScheduleFamily::new(ScheduleKind::Linear, b0).unwrap(),
        )
        .unwrap();
        for b in s.betas() {
            assert!((b - b0).abs() < 1e-15);
        }
        assert_eq!(s.clamped(), 0);
    }

    #[test]
    fn update_fibonacci_monotone_over_grid() {
        for &a in &[0.95, 0.9, 0.7, 0.5, 0.3, 0.1, 0.01] {
            for &b0 in &[1e-6, 1e-5, 1e-4, 1e-3, 1e-2] {
                let fam = ScheduleFamily::new(ScheduleKind::Fibonacci, b0).unwrap();
                let s = update_noise_schedule(a, 6, fam).unwrap();
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn near_one_level_hits_clamp_floor() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Fibonacci] {
            let fam = ScheduleFamily::new(kind, 1e-6).unwrap();
            let s = update_noise_schedule(0.999_999, 6, fam).unwrap();
            assert!(s.betas().iter().all(|&b| b == BETA_MIN), "{kind:?}: {:?}", s.betas());
        }
    }

    #[test]
    fn index_examples() {
        let l = [1.0, 0.9, 0.5];
        assert_eq!(index_for_level(1.0, &l), 1);
        assert_eq!(index_for_level(0.49, &l), 2);
        assert_eq!(index_for_level(0.01, &l), 2);
        assert_eq!(index_for_level(0.95 * 0.95, &l), 1);
    }

    fn linear_scan(alpha_bar_hat: f64, l: &[f64]) -> usize {
        let level = alpha_bar_hat.max(0.0).sqrt();
        for t in 1..l.len() {
            if level >= l[t] {
                return t;
            }
        }
        l.len() - 1
    }

    #[test]
    fn index_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let betas: Vec<f64> = (0..50).map(|_| rng.random_range(1e-4..0.1)).collect();
        let l = boundaries(&betas).unwrap();
        for _ in 0..1000 {
            let a: f64 = rng.random_range(0.0..1.0);
            assert_eq!(index_for_level(a, &l), linear_scan(a, &l));
        }
        // Exact boundary hits.
        for s in 0..l.len() {
            let a = l[s] * l[s];
            assert_eq!(index_for_level(a, &l), linear_scan(a, &l));
        }
    }

    #[test]
    fn fibonacci_initial_example() {
        let got = fibonacci_betas(4, 1e-4);
        for (g, e) in got.iter().zip([1e-4, 1e-4, 2e-4, 3e-4]) {
            assert!((g - e).abs() < 1e-18);
        }
    }

    #[test]
    fn csv_round_trip() {
        let s = NoiseSchedule::linear(7, 1e-4, 2e-2).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = NoiseSchedule::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.betas(), s.betas());
    }

    #[test]
    fn schedule_rejects_invalid_betas() {
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![0.0]).is_err());
        assert!(NoiseSchedule::new(vec![0.9995]).is_err());
        assert!(NoiseSchedule::new(vec![BETA_MAX; 200]).is_err());
    }

    #[test]
    fn step_range() {
        let s = NoiseSchedule::linear(3, 1e-3, 1e-2).unwrap();
        assert!(s.step(0).is_err());
        assert!(s.step(4).is_err());
        let p = s.step(1).unwrap();
        assert_eq!(p.alpha_bar_prev, 1.0);
        assert_eq!(s.step(3).unwrap().alpha_bar_prev, s.alpha_bars()[1]);
    }

    proptest! {
        #[test]
        fn linear_sum_and_spacing(a in 0.05f64..0.99, n in 2usize..60, b0 in 1e-6f64..1e-3) {
            let s = solve_linear(a, n, b0).unwrap();
            prop_assert!((s.raw.iter().sum::<f64>() + a.ln()).abs() <= 1e-12);
            let d = s.raw[1] - s.raw[0];
            for w in s.raw.windows(2) {
                prop_assert!((w[1] - w[0] - d).abs() <= 1e-12);
            }
        }

        #[test]
        fn fibonacci_recurrence_and_sum(a in 0.05f64..0.99, n in 3usize..40, b0 in 1e-6f64..1e-2) {
            let s = solve_fibonacci(a, n, b0).unwrap();
            for w in s.raw.windows(3) {
                prop_assert!((w[2] - w[1] - w[0]).abs() <= 1e-12);
            }
            prop_assert!((s.raw[0] - b0).abs() <= 1e-12);
            prop_assert!((s.raw.iter().sum::<f64>() + a.ln()).abs() <= 1e-10);
        }

        #[test]
        fn solved_schedules_are_valid(a in 1e-7f64..(1.0 - 1e-7), n in 1usize..80, b0 in 1e-6f64..1e-2, fib in any::<bool>()) {
            let kind = if fib { ScheduleKind::Fibonacci } else { ScheduleKind::Linear };
            let s = update_noise_schedule(a, n, ScheduleFamily::new(kind, b0).unwrap()).unwrap();
            prop_assert_eq!(s.len(), n);
            prop_assert!(s.betas().iter().all(|b| (BETA_MIN..=BETA_MAX).contains(b)));
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.boundaries().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn taylor_regime_product_grid() {
        for &a in &[0.9, 0.5, 0.1] {
            for &n in &[3, 6, 10, 25] {
                for solve in [solve_linear, solve_fibonacci] {
                    let s = solve(a, n, 1e-4).unwrap();
                    if s.raw.iter().all(|&b| b <= 1e-2) {
                        let prod: f64 = s.raw.iter().map(|b| 1.0 - b).product();
                        assert!(((prod - a) / a).abs() <= 0.01);
                    }
                }
            }
        }
    }
}
