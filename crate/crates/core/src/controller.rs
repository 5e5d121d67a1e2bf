//! Receding-horizon controller: budget update, gain selection, online solve.
//!
//! At every step the budget is first tightened from the shifted tail of the
//! previous solution under the previous gain; only then is the gain
//! re-selected and the online problem solved with the new operators.

use std::fmt::Write as _;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};
use crate::model::PlantModel;
use crate::prediction::PredictionOperators;
use crate::qcqp::{solve_mpc, QcqpSolution};
use crate::selection::{initial_gain, select_method1, select_method2, GainSchedule, InitialPolicy, SelectionOutcome};
use crate::synthesis::GainRecord;

/// How the feedback gain evolves over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMode {
    #[serde(rename = "fixed-gain")]
    Fixed,
    #[serde(rename = "method1")]
    Method1,
    #[serde(rename = "method2")]
    Method2,
}

impl ControlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::Fixed => "fixed-gain",
            ControlMode::Method1 => "method1",
            ControlMode::Method2 => "method2",
        }
    }
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControlMode {
    type Err = SmpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-gain" | "fixed" => Ok(ControlMode::Fixed),
            "method1" => Ok(ControlMode::Method1),
            "method2" => Ok(ControlMode::Method2),
            other => Err(SmpcError::Usage(format!("unknown mode '{other}'"))),
        }
    }
}

enum Gains<'a> {
    Fixed(Box<PredictionOperators>),
    Scheduled(&'a GainSchedule),
}

/// Budget and gain in force at the current time, before the online solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub k: usize,
    pub epsilon: f64,
    pub selection: SelectionOutcome,
}

/// Diagnostics of one applied control step (one trace row).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub epsilon: f64,
    pub mu_bar: f64,
    pub mu_index: usize,
    /// Multiplier of the online constraint (`+inf` at the collapse limit).
    pub lambda: f64,
    pub stage_cost: f64,
    pub violation: bool,
    pub constraint_value: f64,
    pub objective: f64,
    pub safeguard_applied: bool,
    pub stalled: bool,
}

pub const TRACE_HEADER_FIXED: &str = "eps,mu_bar,lambda,stage_cost,violation";

/// CSV header for a trace with `nx` states and `nu` inputs.
pub fn trace_header(nx: usize, nu: usize) -> String {
    let mut h = String::from("k");
    for i in 0..nx {
        let _ = write!(h, ",x{i}");
    }
    for i in 0..nu {
        let _ = write!(h, ",u{i}");
    }
    h.push(',');
    h.push_str(TRACE_HEADER_FIXED);
    h
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut row = self.k.to_string();
        for v in self.x.iter().chain(self.u.iter()) {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        for v in [self.epsilon, self.mu_bar, self.lambda, self.stage_cost] {
            row.push(',');
            row.push_str(&fmt_f64(v));
        }
        row.push(',');
        row.push(if self.violation { '1' } else { '0' });
        row
    }
}

/// `1{||C x|| >= 1}`.
pub fn violates(model: &PlantModel, x: &DVector<f64>) -> bool {
    (&model.c * x).norm_squared() >= 1.0
}

/// Single-owner controller state. Borrow the schedule so many controllers
/// can share one library across threads.
pub struct Controller<'a> {
    model: &'a PlantModel,
    mode: ControlMode,
    gains: Gains<'a>,
    k: usize,
    epsilon: f64,
    selection: SelectionOutcome,
    prev_c_star: Option<DVector<f64>>,
    observed: Option<usize>,
}

fn check_initial(ops: &PredictionOperators, x0: &DVector<f64>, eps0: f64, mu: f64) -> Result<()> {
    let gap = ops.min_constraint_value(x0) - eps0;
    if gap > crate::qcqp::FEASIBILITY_TOL * (1.0 + eps0.abs()) {
        return Err(SmpcError::InitialInfeasible { gap, mu });
    }
    Ok(())
}

fn warn_budget(model: &PlantModel, eps0: f64) {
    if eps0 != model.e {
        warn!(
            "initial budget {eps0} differs from the constraint bound {}; the closed-loop guarantee assumes they match",
            model.e
        );
    }
}

impl<'a> Controller<'a> {
    /// Constant-gain controller.
    pub fn fixed(model: &'a PlantModel, record: &GainRecord, x0: &DVector<f64>, eps0: f64) -> Result<Self> {
        warn_budget(model, eps0);
        if x0.len() != model.nx() {
            return Err(SmpcError::dim("model", "x0", format!("x0 has {} entries", x0.len())));
        }
        let ops = PredictionOperators::build(model, record)?;
        check_initial(&ops, x0, eps0, record.mu)?;
        Ok(Controller {
            model,
            mode: ControlMode::Fixed,
            gains: Gains::Fixed(Box::new(ops)),
            k: 0,
            epsilon: eps0,
            selection: SelectionOutcome {
                mu_index: 0,
                mu: record.mu,
                diagnostics: Default::default(),
            },
            prev_c_star: None,
            observed: None,
        })
    }

    /// Controller drawing gains from a schedule. `Fixed` mode keeps the
    /// initial selection forever.
    pub fn scheduled(
        schedule: &'a GainSchedule,
        mode: ControlMode,
        x0: &DVector<f64>,
        eps0: f64,
        policy: InitialPolicy,
    ) -> Result<Self> {
        warn_budget(&schedule.model, eps0);
        let selection = initial_gain(schedule, x0, eps0, policy)?;
        Ok(Self::scheduled_at(schedule, mode, selection, eps0))
    }

    /// Controller starting from a given selection (caller has checked
    /// initial feasibility, e.g. via [`initial_gain`]).
    pub fn scheduled_at(schedule: &'a GainSchedule, mode: ControlMode, selection: SelectionOutcome, eps0: f64) -> Self {
        Controller {
            model: &schedule.model,
            mode,
            gains: Gains::Scheduled(schedule),
            k: 0,
            epsilon: eps0,
            selection,
            prev_c_star: None,
            observed: None,
        }
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn selection(&self) -> &SelectionOutcome {
        &self.selection
    }

    pub fn previous_solution(&self) -> Option<&DVector<f64>> {
        self.prev_c_star.as_ref()
    }

    /// Operators of the gain currently in force.
    pub fn ops(&self) -> &PredictionOperators {
        match &self.gains {
            Gains::Fixed(ops) => ops,
            Gains::Scheduled(s) => s.ops(self.selection.mu_index),
        }
    }

    pub fn gain(&self) -> &GainRecord {
        &self.ops().gain
    }

    /// `[x; E c*_{k-1}]^T W1(K_{k-1}) [x; E c*_{k-1}] + trace_bar(K_{k-1})`,
    /// where `E` drops the first block and appends a zero block.
    pub fn update_epsilon(&self, x: &DVector<f64>) -> Result<f64> {
        let prev = self
            .prev_c_star
            .as_ref()
            .ok_or_else(|| SmpcError::Usage("budget update requires a previous solution (k >= 1)".into()))?;
        let ops = self.ops();
        Ok(ops.constraint_lhs(x, &shift_tail(prev, ops.nu)))
    }

    /// Budget update (for `k >= 1`) followed by gain selection at `x`.
    /// Idempotent within a time step.
    pub fn observe(&mut self, x: &DVector<f64>) -> Result<Observation> {
        if x.len() != self.model.nx() {
            return Err(SmpcError::dim("model", "state", format!("state has {} entries", x.len())));
        }
        if self.observed != Some(self.k) {
            if self.k > 0 {
                self.epsilon = self.update_epsilon(x)?;
                if let Gains::Scheduled(schedule) = self.gains {
                    let prev = self.selection;
                    self.selection = match self.mode {
                        ControlMode::Fixed => prev,
                        ControlMode::Method1 => select_method1(schedule, &prev, schedule.ops(prev.mu_index), x, self.epsilon),
                        ControlMode::Method2 => select_method2(schedule, &prev, x, self.epsilon),
                    };
                    debug_assert!(self.selection.mu_index >= prev.mu_index);
                }
            }
            self.observed = Some(self.k);
        }
        Ok(Observation {
            k: self.k,
            epsilon: self.epsilon,
            selection: self.selection,
        })
    }

    /// Observes `x`, solves the online problem and returns `u = K x + c*_0`.
    /// Infeasibility after the first step is an internal consistency failure.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepRecord, QcqpSolution)> {
        self.observe(x)?;
        let ops = self.ops();
        let sol = match solve_mpc(ops, x, self.epsilon) {
            Ok(sol) => sol,
            Err(e) if self.k > 0 => {
                return Err(SmpcError::Consistency {
                    step: self.k,
                    detail: format!("online problem infeasible after a feasible start: {e}"),
                })
            }
            Err(SmpcError::Infeasible { gap }) => {
                return Err(SmpcError::InitialInfeasible { gap, mu: self.selection.mu })
            }
            Err(e) => return Err(e),
        };
        let u = &ops.gain.l * x + sol.c_star.rows(0, ops.nu);
        let record = StepRecord {
            k: self.k,
            x: x.clone(),
            u: u.clone(),
            epsilon: self.epsilon,
            mu_bar: self.selection.mu,
            mu_index: self.selection.mu_index,
            lambda: sol.multiplier,
            stage_cost: self.model.stage_cost(x, &u),
            violation: violates(self.model, x),
            constraint_value: sol.constraint_value,
            objective: sol.objective,
            safeguard_applied: self.selection.diagnostics.safeguard_applied,
            stalled: self.selection.diagnostics.stalled,
        };
        self.prev_c_star = Some(sol.c_star.clone());
        self.k += 1;
        Ok((u, record, sol))
    }
}

/// `E c`: drop the first `nu`-block, append a zero block.
pub fn shift_tail(c: &DVector<f64>, nu: usize) -> DVector<f64> {
    let len = c.len();
    let mut out = DVector::zeros(len);
    out.rows_mut(0, len - nu).copy_from(&c.rows(nu, len - nu));
    out
}

/// The budget written as a sum over the disturbed continuation of the
/// previous nominal trajectory:
/// `sum_{i<N} gamma^i ||C (xbar_{i+1} + Phi^i w)||^2
///   + gamma^N ||xbar_{N+1} + Phi^N w||^2_Pbar + trace_bar`,
/// with `xbar_{N+1} = Phi xbar_N`. Accumulated with compensated summation.
pub fn epsilon_expansion(
    ops_prev: &PredictionOperators,
    model: &PlantModel,
    x_prev: &DVector<f64>,
    c_star_prev: &DVector<f64>,
    w: &DVector<f64>,
) -> f64 {
    let nominal = ops_prev.nominal_states(x_prev, c_star_prev);
    let n = ops_prev.horizon;
    let mut acc = Kahan::default();
    let mut drift = w.clone();
    let mut weight = 1.0;
    for i in 0..n {
        let state = &nominal[i + 1] + &drift;
        acc.add(weight * (&model.c * state).norm_squared());
        drift = &ops_prev.phi * drift;
        weight *= model.gamma;
    }
    let terminal = &ops_prev.phi * &nominal[n] + drift;
    acc.add(weight * crate::linalg::quad_form(&ops_prev.gain.p_bar, &terminal));
    acc.add(ops_prev.trace_bar());
    acc.value()
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
