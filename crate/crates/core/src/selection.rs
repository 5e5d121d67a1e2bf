//! Online selection of the feedback gain from the library.
//!
//! Both selection rules only move up the grid and only accept a gain for
//! which the online problem stays feasible at the current budget.
//!
//! * Method 1 keeps the constraint-minimising perturbation of the previous
//!   gain fixed and spends the remaining slack on the largest admissible
//!   `mu` (binary search over the monotone `trace_bar` column).
//! * Method 2 finds the largest `mu` whose own minimal constraint value fits
//!   the budget and then picks, inside `[previous mu, that mu]`, the gain
//!   whose constraint-minimising perturbation has the smallest predicted
//!   cost (ties go to the larger `mu`).

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};
use crate::model::PlantModel;
use crate::prediction::PredictionOperators;
use crate::synthesis::{GainLibrary, GainRecord};

/// Slack on feasibility comparisons against the budget.
pub const SELECTION_TOL: f64 = 1e-9;

fn fits(value: f64, eps: f64) -> bool {
    value <= eps + SELECTION_TOL * (1.0 + eps.abs())
}

/// A gain library together with the prediction operators of every record.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub model: PlantModel,
    pub library: GainLibrary,
    ops: Vec<PredictionOperators>,
}

impl GainSchedule {
    /// Builds operators for every record (in parallel, order preserved).
    pub fn new(model: PlantModel, library: GainLibrary) -> Result<Self> {
        if library.is_empty() {
            return Err(SmpcError::InvalidGrid("empty library".into()));
        }
        let ops = library
            .records
            .par_iter()
            .map(|rec| PredictionOperators::build(&model, rec))
            .collect::<Result<Vec<_>>>()?;
        Ok(GainSchedule { model, library, ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn last_index(&self) -> usize {
        self.ops.len() - 1
    }

    pub fn ops(&self, index: usize) -> &PredictionOperators {
        &self.ops[index]
    }

    pub fn record(&self, index: usize) -> &GainRecord {
        &self.library.records[index]
    }

    pub fn mu(&self, index: usize) -> f64 {
        self.library.grid[index]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionDiagnostics {
    /// Budget minus the constraint bound that justified the selection.
    pub slack: f64,
    /// Predicate evaluations performed by the searches.
    pub probes: usize,
    /// Selection stayed put below the top of the grid despite positive slack.
    pub stalled: bool,
    /// Method 1's choice had to be pulled back to keep the new problem feasible.
    pub safeguard_applied: bool,
}

/// Selected grid index (and the `mu` it stands for).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub mu_index: usize,
    pub mu: f64,
    pub diagnostics: SelectionDiagnostics,
}

impl SelectionOutcome {
    pub fn at(schedule: &GainSchedule, index: usize) -> Self {
        SelectionOutcome {
            mu_index: index,
            mu: schedule.mu(index),
            diagnostics: SelectionDiagnostics::default(),
        }
    }
}

/// Largest index in `[lo, hi]` satisfying a predicate that holds on a prefix
/// of that range; `None` when it fails at `lo`.
fn last_true(lo: usize, hi: usize, probes: &mut usize, mut pred: impl FnMut(usize) -> bool) -> Option<usize> {
    *probes += 1;
    if !pred(lo) {
        return None;
    }
    let (mut good, mut bad) = (lo, hi + 1);
    while bad - good > 1 {
        let mid = good + (bad - good) / 2;
        *probes += 1;
        if pred(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Some(good)
}

/// Method 1: binary search on `quad(c^o; K_prev) + trace_bar(mu) <= eps`.
///
/// When the chosen gain's own minimal constraint value exceeds the budget
/// (possible if the terminal weight grows with `mu` and the input cannot
/// null the state within the horizon), the choice is pulled back to the
/// largest feasible index in `[previous, chosen]`.
pub fn select_method1(
    schedule: &GainSchedule,
    prev: &SelectionOutcome,
    ops_prev: &PredictionOperators,
    x: &DVector<f64>,
    eps: f64,
) -> SelectionOutcome {
    let (c_o, value) = ops_prev.minimize_constraint(x);
    debug_assert_eq!(c_o.len(), ops_prev.decision_dim());
    let quad = value - ops_prev.trace_bar();
    let mut diag = SelectionDiagnostics::default();
    let start = prev.mu_index;
    let last = schedule.last_index();
    let mut chosen = last_true(start, last, &mut diag.probes, |i| {
        fits(quad + schedule.record(i).trace_bar, eps)
    })
    .unwrap_or(start);

    if chosen > start {
        diag.probes += 1;
        if !fits(schedule.ops(chosen).min_constraint_value(x), eps) {
            diag.safeguard_applied = true;
            chosen = last_true(start, chosen, &mut diag.probes, |i| {
                fits(schedule.ops(i).min_constraint_value(x), eps)
            })
            .unwrap_or(start);
        }
    }

    diag.slack = eps - (quad + schedule.record(chosen).trace_bar);
    diag.stalled = chosen == start && chosen < last && diag.slack > 0.0;
    SelectionOutcome {
        mu_index: chosen,
        mu: schedule.mu(chosen),
        diagnostics: diag,
    }
}

/// Method 2: binary search for the largest `mu` whose minimal constraint
/// fits, then a linear scan of the predicted cost over the admissible window.
/// Equal costs go to the larger `mu`.
pub fn select_method2(schedule: &GainSchedule, prev: &SelectionOutcome, x: &DVector<f64>, eps: f64) -> SelectionOutcome {
    let mut diag = SelectionDiagnostics::default();
    let start = prev.mu_index;
    let last = schedule.last_index();
    let top = last_true(start, last, &mut diag.probes, |i| {
        fits(schedule.ops(i).min_constraint_value(x), eps)
    })
    .unwrap_or(start);

    let costs: Vec<f64> = (start..=top).map(|i| schedule.ops(i).min_constraint_cost(x)).collect();
    diag.probes += costs.len();
    let chosen = start + last_argmin(&costs);

    diag.slack = eps - schedule.ops(chosen).min_constraint_value(x);
    diag.stalled = top == start && start < last && diag.slack > 0.0;
    SelectionOutcome {
        mu_index: chosen,
        mu: schedule.mu(chosen),
        diagnostics: diag,
    }
}

/// Index of the minimum, preferring the last of equal minima. Comparison is
/// exact: costs that tie mathematically are separated by rounding.
fn last_argmin(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    values.iter().rposition(|&c| c == best).unwrap_or(0)
}

/// Which feasible grid point to start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialPolicy {
    #[default]
    Largest,
    Smallest,
}

/// Picks the starting gain: `x0` must lie in the feasible set of the chosen
/// record, `x0^T (Wxx - Wxc Wcc^+ Wcx) x0 + trace_bar <= eps0`.
pub fn initial_gain(
    schedule: &GainSchedule,
    x0: &DVector<f64>,
    eps0: f64,
    policy: InitialPolicy,
) -> Result<SelectionOutcome> {
    if x0.len() != schedule.model.nx() {
        return Err(SmpcError::dim("model", "x0", format!("x0 has {} entries", x0.len())));
    }
    let values: Vec<f64> = (0..schedule.len()).map(|i| schedule.ops(i).min_constraint_value(x0)).collect();
    let feasible: Vec<usize> = (0..values.len()).filter(|&i| fits(values[i], eps0)).collect();
    let pick = match policy {
        InitialPolicy::Largest => feasible.last(),
        InitialPolicy::Smallest => feasible.first(),
    };
    match pick {
        Some(&index) => Ok(SelectionOutcome {
            mu_index: index,
            mu: schedule.mu(index),
            diagnostics: SelectionDiagnostics {
                slack: eps0 - values[index],
                probes: values.len(),
                ..Default::default()
            },
        }),
        None => {
            let (i, gap) = values
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v - eps0))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            Err(SmpcError::InitialInfeasible { gap, mu: schedule.mu(i) })
        }
    }
}

/// Indices of grid points whose feasible set contains `x0`.
pub fn feasible_indices(schedule: &GainSchedule, x0: &DVector<f64>, eps0: f64) -> Vec<usize> {
    (0..schedule.len())
        .filter(|&i| fits(schedule.ops(i).min_constraint_value(x0), eps0))
        .collect()
}

/// Radius of the feasible set `{x : x^T S x + trace_bar <= eps0}` along each
/// unit direction. A direction along which the form vanishes has radius
/// `+inf`; an empty set (trace_bar > eps0) has radius 0 everywhere.
pub fn feasible_set_boundary(
    record: &GainRecord,
    model: &PlantModel,
    eps0: f64,
    directions: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let ops = PredictionOperators::build(model, record)?;
    boundary_radii(&ops, eps0, directions)
}

pub fn boundary_radii(ops: &PredictionOperators, eps0: f64, directions: &[DVector<f64>]) -> Result<Vec<f64>> {
    let budget = eps0 - ops.trace_bar();
    let scale = ops.reduced_constraint.norm().max(f64::MIN_POSITIVE);
    directions
        .iter()
        .map(|d| {
            if d.len() != ops.nx {
                return Err(SmpcError::dim("model", "direction", format!("direction has {} entries", d.len())));
            }
            if budget <= 0.0 {
                return Ok(0.0);
            }
            let norm = d.norm();
            if norm == 0.0 {
                return Err(SmpcError::Usage("zero direction vector".into()));
            }
            let unit = d / norm;
            let curvature = crate::linalg::quad_form(&ops.reduced_constraint, &unit);
            if curvature <= 1e-14 * scale {
                Ok(f64::INFINITY)
            } else {
                Ok((budget / curvature).sqrt())
            }
        })
        .collect()
}

/// `count` unit vectors evenly spread on the circle spanned by the first two
/// state coordinates (`+-e_1` for scalar states).
pub fn planar_directions(count: usize, nx: usize) -> Vec<DVector<f64>> {
    if nx == 1 {
        return vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)];
    }
    (0..count)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / count as f64;
            let mut d = DVector::zeros(nx);
            d[0] = theta.cos();
            d[1] = theta.sin();
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_true_finds_prefix_boundary() {
        let mut probes = 0;
        assert_eq!(last_true(0, 9, &mut probes, |i| i <= 6), Some(6));
        assert_eq!(last_true(3, 9, &mut probes, |i| i <= 9), Some(9));
        assert_eq!(last_true(3, 9, &mut probes, |_| false), None);
        assert_eq!(last_true(4, 4, &mut probes, |_| true), Some(4));
    }

    #[test]
    fn method1_three_point_grid_by_exhaustion() {
        // trace_bar = {1, 2, 4}, quad = 0.5, eps = 3: exhaustive check says index 1.
        let traces = [1.0, 2.0, 4.0];
        let quad = 0.5;
        let eps = 3.0;
        let exhaustive = (0..3).filter(|&i| quad + traces[i] <= eps).max().unwrap();
        let mut probes = 0;
        let found = last_true(0, 2, &mut probes, |i| fits(quad + traces[i], eps)).unwrap();
        assert_eq!(found, exhaustive);
        assert_eq!(found, 1);
    }

    #[test]
    fn cost_ties_go_to_larger_mu() {
        assert_eq!(last_argmin(&[10.0, 7.0, 7.0]), 2);
        assert_eq!(last_argmin(&[3.0, 7.0, 9.0]), 0);
        assert_eq!(last_argmin(&[5.0]), 0);
    }

    #[test]
    fn planar_directions_are_unit() {
        for d in planar_directions(64, 2) {
            assert!((d.norm() - 1.0).abs() < 1e-15);
        }
        assert_eq!(planar_directions(8, 1).len(), 2);
    }
}
