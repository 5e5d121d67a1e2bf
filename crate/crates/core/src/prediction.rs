//! Stacked nominal predictions and the two quadratic forms of the online
//! problem.
//!
//! With `Phi = A + B K` and decision vector `c = [c_0; ...; c_{N-1}]` the
//! nominal states are `xbar = M_x x + M_c c`. The constraint function is
//! `[x; c]^T W1 [x; c] + trace_bar` and the predicted cost is
//! `[x; c]^T W2 [x; c]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};
use crate::linalg::{self, mat_pow, pseudo_inverse, quad_form};
use crate::model::PlantModel;
use crate::qcqp::QcqpFactor;
use crate::synthesis::{closed_loop, GainRecord};

/// Prediction matrices and quadratic forms for one gain.
#[derive(Debug, Clone)]
pub struct PredictionOperators {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub gamma: f64,
    /// `[Phi; Phi^2; ...; Phi^N]`.
    pub mx: DMatrix<f64>,
    /// Block lower-triangular input map, block `(i, j)` = `Phi^{i-j} B` for `j <= i`.
    pub mc: DMatrix<f64>,
    /// `diag(gamma C^T C, ..., gamma^{N-1} C^T C, gamma^N Pbar)`.
    pub h: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub gain: GainRecord,
    /// `Wcc^+ Wcx`: the constraint-minimising perturbation is `-G x`.
    pub constraint_min_map: DMatrix<f64>,
    /// `Wxx - Wxc Wcc^+ Wcx`: minimal constraint quadratic as a form in `x`.
    pub reduced_constraint: DMatrix<f64>,
    /// `[I; -G]^T W2 [I; -G]`: cost of the constraint-minimising perturbation.
    pub reduced_cost: DMatrix<f64>,
    pub(crate) factor: QcqpFactor,
}

fn stack(x: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + c.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), c.len()).copy_from(c);
    z
}

impl PredictionOperators {
    /// Assembles every operator for `gain` (its `P_bar` is the constraint
    /// terminal weight, its `P_hat` the cost terminal weight).
    pub fn build(model: &PlantModel, gain: &GainRecord) -> Result<Self> {
        let (n, m, big_n) = (model.nx(), model.nu(), model.horizon);
        if gain.l.shape() != (m, n) || gain.p_bar.shape() != (n, n) || gain.p_hat.shape() != (n, n) {
            return Err(SmpcError::dim("model", "gain record", "record shapes do not match the model"));
        }
        if big_n == 0 {
            return Err(SmpcError::InvalidModel("horizon must be at least 1".into()));
        }
        let k = &gain.l;
        let phi = closed_loop(model, k);
        let ctc = model.ctc();
        let g = model.gamma;

        let powers: Vec<DMatrix<f64>> = (0..=big_n).map(|i| mat_pow(&phi, i)).collect();
        let mut mx = DMatrix::zeros(big_n * n, n);
        let mut mc = DMatrix::zeros(big_n * n, big_n * m);
        for i in 0..big_n {
            mx.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
            for j in 0..=i {
                let block = &powers[i - j] * &model.b;
                mc.view_mut((i * n, j * m), (n, m)).copy_from(&block);
            }
        }

        let mut h = DMatrix::zeros(big_n * n, big_n * n);
        for i in 1..big_n {
            h.view_mut(((i - 1) * n, (i - 1) * n), (n, n))
                .copy_from(&(&ctc * g.powi(i as i32)));
        }
        h.view_mut(((big_n - 1) * n, (big_n - 1) * n), (n, n))
            .copy_from(&(&gain.p_bar * g.powi(big_n as i32)));

        let dim = n + big_n * m;
        let mut w1 = DMatrix::zeros(dim, dim);
        let mxt_h = mx.transpose() * &h;
        let mct_h = mc.transpose() * &h;
        w1.view_mut((0, 0), (n, n)).copy_from(&(&ctc + &mxt_h * &mx));
        w1.view_mut((0, n), (n, big_n * m)).copy_from(&(&mxt_h * &mc));
        w1.view_mut((n, 0), (big_n * m, n)).copy_from(&(&mct_h * &mx));
        w1.view_mut((n, n), (big_n * m, big_n * m)).copy_from(&(&mct_h * &mc));
        linalg::symmetrize(&mut w1);

        // W2 = sum_i T_i^T Q T_i + (K T_i + S_i)^T R (K T_i + S_i) + T_N^T P T_N,
        // where T_i maps (x, c) to xbar_i and S_i selects c_i.
        let state_selector = |i: usize| -> DMatrix<f64> {
            let mut t = DMatrix::zeros(n, dim);
            if i == 0 {
                t.view_mut((0, 0), (n, n)).fill_with_identity();
            } else {
                t.view_mut((0, 0), (n, n)).copy_from(&mx.view(((i - 1) * n, 0), (n, n)));
                t.view_mut((0, n), (n, big_n * m))
                    .copy_from(&mc.view(((i - 1) * n, 0), (n, big_n * m)));
            }
            t
        };
        let mut w2 = DMatrix::zeros(dim, dim);
        for i in 0..big_n {
            let t = state_selector(i);
            let mut input = k * &t;
            for r in 0..m {
                input[(r, n + i * m + r)] += 1.0;
            }
            w2 += t.transpose() * &model.q * &t + input.transpose() * &model.r * &input;
        }
        let t_end = state_selector(big_n);
        w2 += t_end.transpose() * &gain.p_hat * &t_end;
        linalg::symmetrize(&mut w2);

        let wcc = w1.view((n, n), (big_n * m, big_n * m)).clone_owned();
        let wcx = w1.view((n, 0), (big_n * m, n)).clone_owned();
        let wxx = w1.view((0, 0), (n, n)).clone_owned();
        let constraint_min_map = pseudo_inverse(&wcc)? * &wcx;
        let mut reduced_constraint = &wxx - wcx.transpose() * &constraint_min_map;
        linalg::symmetrize(&mut reduced_constraint);
        let mut lift = DMatrix::zeros(dim, n);
        lift.view_mut((0, 0), (n, n)).fill_with_identity();
        lift.view_mut((n, 0), (big_n * m, n)).copy_from(&(-&constraint_min_map));
        let mut reduced_cost = lift.transpose() * &w2 * &lift;
        linalg::symmetrize(&mut reduced_cost);

        let factor = QcqpFactor::new(&w1, &w2, n)?;

        Ok(PredictionOperators {
            nx: n,
            nu: m,
            horizon: big_n,
            gamma: g,
            mx,
            mc,
            h,
            w1,
            w2,
            phi,
            gain: gain.clone(),
            constraint_min_map,
            reduced_constraint,
            reduced_cost,
            factor,
        })
    }

    pub fn decision_dim(&self) -> usize {
        self.horizon * self.nu
    }

    pub fn trace_bar(&self) -> f64 {
        self.gain.trace_bar
    }

    fn check_dims(&self, x: &DVector<f64>, c: &DVector<f64>) {
        assert_eq!(x.len(), self.nx, "state dimension");
        assert_eq!(c.len(), self.decision_dim(), "perturbation dimension");
    }

    /// `[x; c]^T W1 [x; c] + trace_bar`: the Chebyshev bound on the
    /// discounted violation sum.
    pub fn constraint_lhs(&self, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
        self.check_dims(x, c);
        quad_form(&self.w1, &stack(x, c)) + self.trace_bar()
    }

    /// `[x; c]^T W2 [x; c]`: predicted cost over the horizon plus terminal cost.
    pub fn cost_value(&self, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
        self.check_dims(x, c);
        quad_form(&self.w2, &stack(x, c))
    }

    /// Nominal states `xbar_0 = x, ..., xbar_N`.
    pub fn nominal_states(&self, x: &DVector<f64>, c: &DVector<f64>) -> Vec<DVector<f64>> {
        self.check_dims(x, c);
        let stacked = &self.mx * x + &self.mc * c;
        let mut out = Vec::with_capacity(self.horizon + 1);
        out.push(x.clone());
        for i in 0..self.horizon {
            out.push(stacked.rows(i * self.nx, self.nx).clone_owned());
        }
        out
    }

    /// Constraint-minimising perturbation `-Wcc^+ Wcx x` and its constraint value.
    pub fn minimize_constraint(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        assert_eq!(x.len(), self.nx, "state dimension");
        let c = -(&self.constraint_min_map * x);
        let value = self.constraint_lhs(x, &c);
        (c, value)
    }

    /// Minimal constraint value through the reduced form (no perturbation built).
    pub fn min_constraint_value(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.reduced_constraint, x) + self.trace_bar()
    }

    /// Cost of the constraint-minimising perturbation through the reduced form.
    pub fn min_constraint_cost(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.reduced_cost, x)
    }
}

/// Forward-recursion evaluation of the predicted cost
/// `sum_i ||xbar_i||_Q^2 + ||K xbar_i + c_i||_R^2 + ||xbar_N||_P^2`.
/// Independent of the stacked operators; used to check `W2`.
pub fn recursive_cost_oracle(
    model: &PlantModel,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x: &DVector<f64>,
    c: &DVector<f64>,
) -> f64 {
    let m = model.nu();
    let phi = closed_loop(model, k);
    let mut state = x.clone();
    let mut total = 0.0;
    for i in 0..model.horizon {
        let ci = c.rows(i * m, m).clone_owned();
        let u = k * &state + &ci;
        total += quad_form(&model.q, &state) + quad_form(&model.r, &u);
        state = &phi * &state + &model.b * ci;
    }
    total + quad_form(p, &state)
}

/// Forward-recursion evaluation of the finite part of the constraint,
/// `sum_{i<N} gamma^i ||C xbar_i||^2 + gamma^N ||xbar_N||_Ptilde^2`.
pub fn recursive_constraint_oracle(
    model: &PlantModel,
    k: &DMatrix<f64>,
    p_tilde: &DMatrix<f64>,
    x: &DVector<f64>,
    c: &DVector<f64>,
) -> f64 {
    let m = model.nu();
    let phi = closed_loop(model, k);
    let mut state = x.clone();
    let mut total = 0.0;
    let mut weight = 1.0;
    for i in 0..model.horizon {
        total += weight * (&model.c * &state).norm_squared();
        state = &phi * &state + &model.b * c.rows(i * m, m);
        weight *= model.gamma;
    }
    total + weight * quad_form(p_tilde, &state)
}
