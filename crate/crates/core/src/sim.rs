//! Disturbance generation, closed-loop rollouts and Monte Carlo aggregation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{trace_header, ControlMode, Controller, Observation, StepRecord};
use crate::error::{Result, SmpcError};
use crate::selection::{GainSchedule, InitialPolicy};

/// Default truncation of the discounted violation count.
pub const DEFAULT_VIOLATION_HORIZON: usize = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[default]
    Laplace,
    Gaussian,
}

/// Zero-mean disturbances with covariance `L L^T`.
///
/// Laplace samples are the Gaussian scale mixture `sqrt(E) L z` with `E`
/// standard exponential, so the covariance is `E[E] L L^T = L L^T`.
#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    chol: DMatrix<f64>,
    distribution: Distribution,
    rng: ChaCha8Rng,
}

impl DisturbanceSampler {
    pub fn new(omega: &DMatrix<f64>, distribution: Distribution, seed: u64) -> Result<Self> {
        let chol = omega
            .clone()
            .cholesky()
            .ok_or_else(|| SmpcError::numerical("disturbance sampler", "covariance is not positive definite"))?
            .l();
        Ok(DisturbanceSampler {
            chol,
            distribution,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn sample(&mut self) -> DVector<f64> {
        let n = self.chol.nrows();
        let z = DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let scale = match self.distribution {
            Distribution::Gaussian => 1.0,
            Distribution::Laplace => self.rng.sample::<f64, _>(Exp1).sqrt(),
        };
        (&self.chol * z) * scale
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent, individually replayable per-run seed.
pub fn derive_seed(base_seed: u64, run: u64) -> u64 {
    splitmix64(splitmix64(base_seed) ^ run)
}

/// Closed-loop settings shared by every run of a campaign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopConfig {
    pub mode: ControlMode,
    /// Initial budget; the constraint bound `e` when absent.
    pub epsilon0: Option<f64>,
    pub initial_policy: InitialPolicy,
    pub distribution: Distribution,
}

impl ClosedLoopConfig {
    pub fn new(mode: ControlMode) -> Self {
        ClosedLoopConfig {
            mode,
            epsilon0: None,
            initial_policy: InitialPolicy::default(),
            distribution: Distribution::default(),
        }
    }

    pub fn with_policy(mut self, policy: InitialPolicy) -> Self {
        self.initial_policy = policy;
        self
    }
}

/// State and selection after the last applied input.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalState {
    pub x: DVector<f64>,
    pub observation: Observation,
}

/// Runs `steps` steps of the closed loop, drawing the disturbance of step
/// `k` from `disturbance(k)` and handing each applied step and successor
/// state to `visit`. The final state is observed (budget update and gain
/// selection) but no input is applied there.
pub fn rollout(
    schedule: &GainSchedule,
    cfg: &ClosedLoopConfig,
    x0: &DVector<f64>,
    steps: usize,
    mut disturbance: impl FnMut(usize) -> DVector<f64>,
    mut visit: impl FnMut(&StepRecord, &DVector<f64>),
) -> Result<FinalState> {
    let model = &schedule.model;
    let eps0 = cfg.epsilon0.unwrap_or(model.e);
    let mut ctl = Controller::scheduled(schedule, cfg.mode, x0, eps0, cfg.initial_policy)?;
    let mut x = x0.clone();
    for k in 0..steps {
        let (u, record, _) = ctl.step(&x)?;
        let next = &model.a * &x + &model.b * u + disturbance(k);
        visit(&record, &next);
        x = next;
    }
    let observation = ctl.observe(&x)?;
    Ok(FinalState { x, observation })
}

/// A recorded closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub config_hash: String,
    /// `steps + 1` states.
    pub states: Vec<DVector<f64>>,
    /// One record per applied input.
    pub steps: Vec<StepRecord>,
    /// Budget and gain in force at the final state.
    pub final_observation: Observation,
}

impl Trajectory {
    pub fn inputs(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.steps.iter().map(|s| &s.u)
    }

    /// Trace CSV, one row per applied step.
    pub fn to_csv(&self) -> String {
        let (nx, nu) = match self.steps.first() {
            Some(s) => (s.x.len(), s.u.len()),
            None => (self.states.first().map_or(0, |x| x.len()), 0),
        };
        let mut out = trace_header(nx, nu);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Simulates one run with disturbances drawn from `seed`.
pub fn run_closed_loop(
    schedule: &GainSchedule,
    cfg: &ClosedLoopConfig,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut sampler = DisturbanceSampler::new(&schedule.model.omega, cfg.distribution, seed)?;
    run_with_disturbances(schedule, cfg, x0, steps, seed, |_| sampler.sample())
}

/// As [`run_closed_loop`] with caller-supplied disturbances (e.g. all zero).
pub fn run_with_disturbances(
    schedule: &GainSchedule,
    cfg: &ClosedLoopConfig,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    disturbance: impl FnMut(usize) -> DVector<f64>,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut records = Vec::with_capacity(steps);
    states.push(x0.clone());
    let fin = rollout(schedule, cfg, x0, steps, disturbance, |rec, next| {
        records.push(rec.clone());
        states.push(next.clone());
    })
    .map_err(|e| SmpcError::Run { seed, source: Box::new(e) })?;
    Ok(Trajectory {
        seed,
        config_hash: campaign_hash(schedule, cfg, x0, 1, steps, DEFAULT_VIOLATION_HORIZON, seed),
        states,
        steps: records,
        final_observation: fin.observation,
    })
}

/// Per-run statistics kept by Monte Carlo campaigns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: u64,
    pub seed: u64,
    /// Mean stage cost over the applied steps.
    pub mean_cost: f64,
    /// `sum_{k=0}^{min(H, T)} gamma^k 1{||C x_k|| >= 1}`.
    pub discounted_violations: f64,
    pub final_mu: f64,
    pub final_mu_index: usize,
    pub final_epsilon: f64,
    pub safeguard_events: usize,
    pub stall_events: usize,
    /// Mean over steps of `gamma eps_{k+1} - eps_k + ||C x_k||^2`.
    pub budget_drift: f64,
}

fn summarise(
    schedule: &GainSchedule,
    cfg: &ClosedLoopConfig,
    x0: &DVector<f64>,
    steps: usize,
    horizon: usize,
    run: u64,
    seed: u64,
) -> Result<RunSummary> {
    let model = &schedule.model;
    let gamma = model.gamma;
    let mut sampler = DisturbanceSampler::new(&model.omega, cfg.distribution, seed)?;
    let mut cost = 0.0;
    let mut viol = 0.0;
    let mut weight = 1.0;
    let mut safeguard_events = 0;
    let mut stall_events = 0;
    let mut drift = 0.0;
    let mut prev: Option<(f64, f64)> = None; // (eps_k, ||C x_k||^2)
    let fin = rollout(schedule, cfg, x0, steps, |_| sampler.sample(), |rec, _| {
        cost += rec.stage_cost;
        if rec.k <= horizon && rec.violation {
            viol += weight;
        }
        weight *= gamma;
        safeguard_events += usize::from(rec.safeguard_applied);
        stall_events += usize::from(rec.stalled);
        if let Some((eps_prev, cx_prev)) = prev {
            drift += gamma * rec.epsilon - eps_prev + cx_prev;
        }
        prev = Some((rec.epsilon, (&model.c * &rec.x).norm_squared()));
    })
    .map_err(|e| SmpcError::Run { seed, source: Box::new(e) })?;
    if steps <= horizon && crate::controller::violates(model, &fin.x) {
        viol += weight;
    }
    if let Some((eps_prev, cx_prev)) = prev {
        drift += gamma * fin.observation.epsilon - eps_prev + cx_prev;
    }
    Ok(RunSummary {
        run,
        seed,
        mean_cost: if steps == 0 { 0.0 } else { cost / steps as f64 },
        discounted_violations: viol,
        final_mu: fin.observation.selection.mu,
        final_mu_index: fin.observation.selection.mu_index,
        final_epsilon: fin.observation.epsilon,
        safeguard_events,
        stall_events,
        budget_drift: if steps == 0 { 0.0 } else { drift / steps as f64 },
    })
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub standard_error: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(values: impl IntoIterator<Item = f64>) -> Self {
        let values: Vec<f64> = values.into_iter().collect();
        let n = values.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                standard_error: f64::NAN,
                half_width: f64::NAN,
                samples: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let se = (var / n as f64).sqrt();
        Estimate {
            mean,
            standard_error: se,
            half_width: 1.96 * se,
            samples: n,
        }
    }
}

/// Campaign-level estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: ControlMode,
    pub runs: usize,
    pub steps: usize,
    pub violation_horizon: usize,
    pub base_seed: u64,
    pub config_hash: String,
    /// Mean stage cost across runs and steps (run means are the samples).
    #[serde(rename = "J_average")]
    pub j_average: Estimate,
    /// Mean over runs of the truncated discounted violation count.
    #[serde(rename = "P_violation")]
    pub p_violation: Estimate,
    /// Fraction of runs whose final selected weight is 1.
    pub mu_convergence: Estimate,
    pub final_mu: Estimate,
    pub budget_drift: Estimate,
    pub feasibility_failures: usize,
    pub safeguard_events: usize,
    pub stall_events: usize,
    pub stage_cost_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub metrics: Metrics,
    /// In run order.
    pub runs: Vec<RunSummary>,
}

/// Content hash of everything that determines a campaign's output.
pub fn campaign_hash(
    schedule: &GainSchedule,
    cfg: &ClosedLoopConfig,
    x0: &DVector<f64>,
    runs: usize,
    steps: usize,
    horizon: usize,
    base_seed: u64,
) -> String {
    let doc = serde_json::json!({
        "model": schedule.library.model_hash,
        "grid": schedule.library.grid,
        "config": cfg,
        "x0": x0.as_slice(),
        "runs": runs,
        "steps": steps,
        "violation_horizon": horizon,
        "base_seed": base_seed,
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Independent runs in parallel, reduced in run order so the result does not
/// depend on scheduling. The first failing run aborts the campaign with its
/// seed.
pub fn monte_carlo(
    schedule: &GainSchedule,
    cfg: &ClosedLoopConfig,
    x0: &DVector<f64>,
    runs: usize,
    steps: usize,
    violation_horizon: usize,
    base_seed: u64,
) -> Result<MonteCarloResult> {
    if runs == 0 {
        return Err(SmpcError::Usage("runs must be at least 1".into()));
    }
    let summaries = (0..runs as u64)
        .into_par_iter()
        .map(|run| summarise(schedule, cfg, x0, steps, violation_horizon, run, derive_seed(base_seed, run)))
        .collect::<Result<Vec<_>>>()?;
    let last = schedule.last_index();
    let metrics = Metrics {
        mode: cfg.mode,
        runs,
        steps,
        violation_horizon,
        base_seed,
        config_hash: campaign_hash(schedule, cfg, x0, runs, steps, violation_horizon, base_seed),
        j_average: Estimate::from_samples(summaries.iter().map(|s| s.mean_cost)),
        p_violation: Estimate::from_samples(summaries.iter().map(|s| s.discounted_violations)),
        mu_convergence: Estimate::from_samples(
            summaries.iter().map(|s| if s.final_mu_index == last { 1.0 } else { 0.0 }),
        ),
        final_mu: Estimate::from_samples(summaries.iter().map(|s| s.final_mu)),
        budget_drift: Estimate::from_samples(summaries.iter().map(|s| s.budget_drift)),
        feasibility_failures: 0,
        safeguard_events: summaries.iter().map(|s| s.safeguard_events).sum(),
        stall_events: summaries.iter().map(|s| s.stall_events).sum(),
        stage_cost_samples: runs * steps,
    };
    Ok(MonteCarloResult { metrics, runs: summaries })
}

/// Paired difference `a - b` over matched runs.
pub fn paired_difference(a: &[RunSummary], b: &[RunSummary], field: impl Fn(&RunSummary) -> f64) -> Result<Estimate> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.seed != y.seed) {
        return Err(SmpcError::Usage("paired comparison needs runs with matching seeds".into()));
    }
    Ok(Estimate::from_samples(a.iter().zip(b).map(|(x, y)| field(x) - field(y))))
}

/// Discounted violation estimator over recorded indicator sequences, truncated
/// at `horizon` (indices `0..=horizon`).
pub fn discounted_violation_estimate(indicators: &[Vec<bool>], gamma: f64, horizon: usize) -> f64 {
    if indicators.is_empty() {
        return 0.0;
    }
    let total: f64 = indicators
        .iter()
        .map(|run| {
            run.iter()
                .take(horizon + 1)
                .enumerate()
                .filter(|(_, v)| **v)
                .map(|(k, _)| gamma.powi(k as i32))
                .sum::<f64>()
        })
        .sum();
    total / indicators.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len());
        assert_eq!(derive_seed(7, 3), a[3]);
        assert_ne!(derive_seed(8, 3), a[3]);
    }

    #[test]
    fn sampler_is_reproducible() {
        let omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut s1 = DisturbanceSampler::new(&omega, Distribution::Laplace, 11).unwrap();
        let mut s2 = DisturbanceSampler::new(&omega, Distribution::Laplace, 11).unwrap();
        for _ in 0..10 {
            assert_eq!(s1.sample(), s2.sample());
        }
        let l = s1.cholesky_factor();
        assert!((l * l.transpose() - omega).norm() < 1e-14);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let omega = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(DisturbanceSampler::new(&omega, Distribution::Gaussian, 0).is_err());
    }

    #[test]
    fn violation_estimator_hand_cases() {
        assert_eq!(discounted_violation_estimate(&[vec![false, false]], 0.9, 150), 0.0);
        let runs = vec![vec![true, false, false], vec![false, false, false]];
        assert_eq!(discounted_violation_estimate(&runs, 0.9, 150), 0.5);
        let late = vec![vec![false, false, true]];
        assert_eq!(discounted_violation_estimate(&late, 0.5, 1), 0.0);
        assert_eq!(discounted_violation_estimate(&late, 0.5, 2), 0.25);
    }

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::from_samples([2.0, 2.0, 2.0]);
        assert_eq!((e.mean, e.standard_error, e.samples), (2.0, 0.0, 3));
    }
}
