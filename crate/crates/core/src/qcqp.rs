//! Convex QCQP with a single quadratic constraint:
//!
//! ```text
//! minimise   [x; c]^T W2 [x; c]
//! subject to [x; c]^T W1 [x; c] + trace_bar <= eps
//! ```
//!
//! After a congruence transform that whitens the cost block and diagonalises
//! the constraint block, the stationary point of the Lagrangian is available
//! in closed form for every multiplier, and the constraint value along that
//! path is a convex, non-increasing scalar function of the multiplier. The
//! active case is a one-dimensional root-finding problem on that function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};
use crate::linalg::{self, RANK_CUTOFF};
use crate::prediction::PredictionOperators;

/// Cost-block condition number above which a ridge is added.
pub const RIDGE_CONDITION: f64 = 1e12;
pub const RIDGE: f64 = 1e-12;
/// Slack allowed on the feasibility precondition.
pub const FEASIBILITY_TOL: f64 = 1e-9;
pub const MAX_ROOT_ITER: usize = 200;

/// Rounding-level tolerance for a constraint value whose terms have
/// magnitude `scale`.
fn rounding_tol(scale: f64) -> f64 {
    16.0 * f64::EPSILON * scale
}

/// Input-independent factorisation of the decision blocks of `W1`, `W2`.
///
/// With `Vcc = L L^T` and `L^{-1} Wcc L^{-T} = U diag(d) U^T`, the decision
/// `c = L^{-T} U w` separates the problem into independent coordinates.
#[derive(Debug, Clone)]
pub struct QcqpFactor {
    /// `d`, clipped at zero.
    d: DVector<f64>,
    /// `L^{-T} U`, maps `w` back to `c`.
    back: DMatrix<f64>,
    /// `U^T L^{-1} Vcx`.
    fa: DMatrix<f64>,
    /// `U^T L^{-1} Wcx`.
    fb: DMatrix<f64>,
    vxx: DMatrix<f64>,
    wxx: DMatrix<f64>,
    pub ridge_applied: bool,
}

impl QcqpFactor {
    pub fn new(w1: &DMatrix<f64>, w2: &DMatrix<f64>, nx: usize) -> Result<Self> {
        let dim = w1.nrows() - nx;
        let mut vcc = w2.view((nx, nx), (dim, dim)).clone_owned();
        let eig = linalg::symmetric_eigenvalues(&vcc)?;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(lo > 0.0) && hi == 0.0 {
            return Err(SmpcError::numerical("qcqp", "cost block is zero"));
        }
        let ridge_applied = !(lo > 0.0) || hi / lo > RIDGE_CONDITION;
        if ridge_applied {
            log::debug!("cost block condition {:e}; adding ridge", hi / lo);
            for i in 0..dim {
                vcc[(i, i)] += RIDGE * hi.max(1.0);
            }
        }
        let chol = vcc
            .cholesky()
            .ok_or_else(|| SmpcError::numerical("qcqp", "cost block is not positive definite"))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or_else(|| SmpcError::numerical("qcqp", "singular Cholesky factor"))?;

        let wcc = w1.view((nx, nx), (dim, dim));
        let mut m = &l_inv * wcc * l_inv.transpose();
        linalg::symmetrize(&mut m);
        let sym = m
            .try_symmetric_eigen(1e-15, 10_000)
            .ok_or_else(|| SmpcError::numerical("qcqp", "eigen iteration did not converge"))?;
        let dmax = sym.eigenvalues.iter().copied().fold(0.0, f64::max);
        let d = sym
            .eigenvalues
            .map(|v| if v > RANK_CUTOFF * dmax { v } else { 0.0 });
        let ut = sym.eigenvectors.transpose();
        let ut_linv = &ut * &l_inv;

        Ok(QcqpFactor {
            back: l_inv.transpose() * &sym.eigenvectors,
            fa: &ut_linv * w2.view((nx, 0), (dim, nx)),
            fb: &ut_linv * w1.view((nx, 0), (dim, nx)),
            vxx: w2.view((0, 0), (nx, nx)).clone_owned(),
            wxx: w1.view((0, 0), (nx, nx)).clone_owned(),
            d,
            ridge_applied,
        })
    }
}

impl QcqpFactor {
    /// `U^T L^{-1} Wcx x` with the null directions of the constraint block
    /// zeroed. `W1` is positive semidefinite, so `Wcx x` lies in the range of
    /// `Wcc`; anything left along a null direction is rounding and would
    /// otherwise be amplified by the multiplier.
    fn constraint_linear(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut b = &self.fb * x;
        for (bi, di) in b.iter_mut().zip(self.d.iter()) {
            if *di == 0.0 {
                *bi = 0.0;
            }
        }
        b
    }
}

/// Result of one online solve.
#[derive(Debug, Clone, PartialEq)]
pub struct QcqpSolution {
    pub c_star: DVector<f64>,
    /// Lagrange multiplier of the quadratic constraint; `+inf` when the
    /// constraint set collapses to its minimiser.
    pub multiplier: f64,
    pub constraint_active: bool,
    pub objective: f64,
    pub constraint_value: f64,
    pub ridge_applied: bool,
    pub iterations: usize,
}

/// The scalar secular problem at a fixed state.
struct Secular<'a> {
    d: &'a DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
    g0: f64,
    f0: f64,
}

impl Secular<'_> {
    fn w(&self, lambda: f64) -> DVector<f64> {
        DVector::from_fn(self.d.len(), |i, _| {
            -(self.a[i] + lambda * self.b[i]) / (1.0 + lambda * self.d[i])
        })
    }

    /// Limit of `w(lambda)` as `lambda -> inf`.
    fn w_limit(&self) -> DVector<f64> {
        DVector::from_fn(self.d.len(), |i, _| {
            if self.d[i] > 0.0 {
                -self.b[i] / self.d[i]
            } else {
                -self.a[i]
            }
        })
    }

    /// Sum of magnitudes of the terms making up `constraint(w)`.
    fn constraint_scale(&self, w: &DVector<f64>) -> f64 {
        self.g0.abs()
            + w.iter()
                .zip(self.d.iter().zip(self.b.iter()))
                .map(|(wi, (di, bi))| (di * wi * wi).abs() + (2.0 * bi * wi).abs())
                .sum::<f64>()
    }

    fn constraint(&self, w: &DVector<f64>) -> f64 {
        self.g0
            + w.iter()
                .zip(self.d.iter().zip(self.b.iter()))
                .map(|(wi, (di, bi))| di * wi * wi + 2.0 * bi * wi)
                .sum::<f64>()
    }

    fn objective(&self, w: &DVector<f64>) -> f64 {
        self.f0 + w.iter().zip(self.a.iter()).map(|(wi, ai)| wi * wi + 2.0 * ai * wi).sum::<f64>()
    }

    /// `g(lambda)` and `g'(lambda) = -2 sum (b_i - d_i a_i)^2 / (1 + lambda d_i)^3`.
    fn eval(&self, lambda: f64) -> (f64, f64, DVector<f64>) {
        let w = self.w(lambda);
        let deriv = -2.0
            * (0..self.d.len())
                .map(|i| {
                    let beta = self.b[i] - self.d[i] * self.a[i];
                    beta * beta / (1.0 + lambda * self.d[i]).powi(3)
                })
                .sum::<f64>();
        (self.constraint(&w), deriv, w)
    }

}

/// Constraint-minimising perturbation `-Wcc^+ Wcx x` with its constraint value.
pub fn minimize_constraint(ops: &PredictionOperators, x: &DVector<f64>) -> (DVector<f64>, f64) {
    ops.minimize_constraint(x)
}

/// Solves the online problem at state `x` with budget `eps`.
///
/// The unconstrained minimiser is returned when it is feasible. Otherwise the
/// multiplier is bracketed by geometric expansion and refined by Newton steps
/// that fall back to bisection whenever they leave the bracket.
pub fn solve_mpc(ops: &PredictionOperators, x: &DVector<f64>, eps: f64) -> Result<QcqpSolution> {
    if x.len() != ops.nx {
        return Err(SmpcError::dim("operators", "state", format!("state has {} entries, expected {}", x.len(), ops.nx)));
    }
    if !eps.is_finite() && eps != f64::INFINITY {
        return Err(SmpcError::numerical("solve_mpc", format!("epsilon {eps} is not a number")));
    }
    let min_value = ops.min_constraint_value(x);
    let gap = min_value - eps;
    if gap > FEASIBILITY_TOL * (1.0 + eps.abs().min(f64::MAX)) {
        return Err(SmpcError::Infeasible { gap });
    }

    let f = &ops.factor;
    let sec = Secular {
        d: &f.d,
        a: &f.fa * x,
        b: f.constraint_linear(x),
        g0: linalg::quad_form(&f.wxx, x) + ops.trace_bar(),
        f0: linalg::quad_form(&f.vxx, x),
    };
    let finish = |w: DVector<f64>, multiplier: f64, active: bool, iterations: usize| QcqpSolution {
        c_star: &f.back * &w,
        constraint_value: sec.constraint(&w),
        objective: sec.objective(&w),
        multiplier,
        constraint_active: active,
        ridge_applied: f.ridge_applied,
        iterations,
    };

    let (g_zero, _, w_zero) = sec.eval(0.0);
    if g_zero <= eps {
        return Ok(finish(w_zero, 0.0, false, 0));
    }

    let w_inf = sec.w_limit();
    if sec.constraint(&w_inf) >= eps - rounding_tol(sec.constraint_scale(&w_inf)) {
        // Budget equals the constraint minimum: the feasible set is the
        // minimiser set and the multiplier diverges.
        return Ok(finish(w_inf, f64::INFINITY, true, 0));
    }

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut iterations = 0;
    loop {
        let (g_hi, _, _) = sec.eval(hi);
        if g_hi <= eps {
            break;
        }
        iterations += 1;
        if iterations > MAX_ROOT_ITER || !hi.is_finite() {
            return Err(SmpcError::numerical("solve_mpc", "could not bracket the multiplier"));
        }
        lo = hi;
        hi *= 4.0;
    }

    // Newton from the infeasible side is monotone for a convex decreasing
    // g; the bracket only guards against rounding.
    let mut lambda = lo;
    let mut last_g = f64::INFINITY;
    for _ in 0..MAX_ROOT_ITER {
        iterations += 1;
        let (g, dg, w) = sec.eval(lambda);
        debug_assert!(
            g <= last_g + 1e-9 * (1.0 + last_g.abs()) || lambda <= lo,
            "constraint path increased along the multiplier"
        );
        if (g - eps).abs() <= rounding_tol(sec.constraint_scale(&w)) {
            return Ok(finish(w, lambda, true, iterations));
        }
        if g > eps {
            lo = lambda;
            last_g = g;
        } else {
            hi = lambda;
        }
        let newton = lambda - (g - eps) / dg;
        lambda = if dg < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            let w = sec.w(hi);
            return Ok(finish(w, hi, true, iterations));
        }
    }
    Err(SmpcError::numerical("solve_mpc", format!("multiplier search exceeded {MAX_ROOT_ITER} iterations")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PlantModel;
    use crate::synthesis::GainRecord;
    use approx::assert_relative_eq;

    /// A = 0, B = 1, C = 1, Q = R = 1, gamma = 0.5, K = 0, N = 1.
    fn degenerate_scalar() -> PredictionOperators {
        let one = DMatrix::from_element(1, 1, 1.0);
        let model = PlantModel::new(
            DMatrix::zeros(1, 1),
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            one,
            0.5,
            1.0,
            1,
        )
        .unwrap();
        let rec = GainRecord::from_gain(&model, 1.0, DMatrix::zeros(1, 1)).unwrap();
        PredictionOperators::build(&model, &rec).unwrap()
    }

    /// Independent oracle: bisection on the multiplier using explicit
    /// 1x1 stationarity.
    fn bisection_oracle(ops: &PredictionOperators, x: f64, eps: f64) -> f64 {
        let (w1, w2) = (&ops.w1, &ops.w2);
        let c_of = |lam: f64| -(w2[(1, 0)] + lam * w1[(1, 0)]) * x / (w2[(1, 1)] + lam * w1[(1, 1)]);
        let g = |c: f64| w1[(0, 0)] * x * x + 2.0 * w1[(0, 1)] * x * c + w1[(1, 1)] * c * c + ops.trace_bar();
        let (mut lo, mut hi) = (0.0, 1.0);
        while g(c_of(hi)) > eps {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(c_of(mid)) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        c_of(hi)
    }

    #[test]
    fn degenerate_scalar_forms() {
        let ops = degenerate_scalar();
        assert_relative_eq!(ops.gain.p_bar[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(ops.w1, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]), epsilon = 1e-14);
        assert_relative_eq!(ops.w2, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]), epsilon = 1e-14);
    }

    #[test]
    fn huge_budget_gives_unconstrained_minimiser() {
        let ops = degenerate_scalar();
        let x = DVector::from_element(1, 2.0);
        let sol = solve_mpc(&ops, &x, 1e12).unwrap();
        assert_eq!(sol.multiplier, 0.0);
        assert!(!sol.constraint_active);
        assert_relative_eq!(sol.c_star[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn active_case_matches_bisection_oracle() {
        let model = PlantModel::coupled_tank();
        let mut scalarish = model.clone();
        scalarish.horizon = 1;
        let one = DMatrix::from_element(1, 1, 1.0);
        let m = PlantModel::new(
            DMatrix::from_element(1, 1, 1.0),
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            one,
            0.9,
            1.0,
            1,
        )
        .unwrap();
        let rec = GainRecord::from_gain(&m, 0.5, DMatrix::from_element(1, 1, -0.5)).unwrap();
        let ops = PredictionOperators::build(&m, &rec).unwrap();
        let x = DVector::from_element(1, 2.0);
        let (_, vmin) = ops.minimize_constraint(&x);
        let eps = vmin + 0.3;
        let sol = solve_mpc(&ops, &x, eps).unwrap();
        assert!(sol.constraint_active && sol.multiplier > 0.0);
        assert_relative_eq!(sol.c_star[0], bisection_oracle(&ops, 2.0, eps), epsilon = 1e-6);
        assert_relative_eq!(sol.constraint_value, eps, epsilon = 1e-8);
    }

    #[test]
    fn budget_at_minimum_returns_constraint_minimiser() {
        let model = PlantModel::coupled_tank();
        let rec = GainRecord::from_gain(&model, 0.5, DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, -3.0])).unwrap();
        let ops = PredictionOperators::build(&model, &rec).unwrap();
        let x = DVector::from_row_slice(&[-1.0, 3.0]);
        let (c_o, vmin) = ops.minimize_constraint(&x);
        let sol = solve_mpc(&ops, &x, vmin).unwrap();
        assert!(sol.constraint_active);
        assert!((&sol.c_star - &c_o).norm() <= 1e-6 * (1.0 + c_o.norm()));
        assert!(sol.constraint_value <= vmin + 1e-7 * (1.0 + vmin));
    }

    #[test]
    fn infeasible_budget_reports_gap() {
        let ops = degenerate_scalar();
        let x = DVector::from_element(1, 2.0);
        match solve_mpc(&ops, &x, 0.5) {
            Err(SmpcError::Infeasible { gap }) => assert!(gap > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_scalar_active_case() {
        // x = 2: unconstrained c = 0 gives 4 + trace_bar; ask for 2.5 + trace_bar.
        let ops = degenerate_scalar();
        let x = DVector::from_element(1, 2.0);
        let eps = 2.5 + ops.trace_bar();
        // Minimum over c of 4 + 0.5 c^2 is 4 > 2.5: infeasible.
        assert!(solve_mpc(&ops, &x, eps).is_err());
        let eps = 4.0 + ops.trace_bar() - 1e-3;
        assert!(solve_mpc(&ops, &x, eps).is_err());
    }

    /// Second input never reaches the state, so the constraint block has an
    /// exact null direction. Rounding-level coupling along it must not be
    /// amplified by a large multiplier.
    #[test]
    fn null_direction_noise_is_ignored() {
        let model = PlantModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 1.0),
            0.5,
            1.0,
            1,
        )
        .unwrap();
        let rec = GainRecord::from_gain(&model, 0.5, DMatrix::zeros(2, 1)).unwrap();
        let clean = PredictionOperators::build(&model, &rec).unwrap();
        let mut noisy = clean.clone();
        let null = noisy.factor.d.iter().position(|&d| d == 0.0).expect("null direction");
        noisy.factor.fb[(null, 0)] += 1e-12;

        let x = DVector::from_element(1, 2.0);
        let vmin = clean.min_constraint_value(&x);
        for eps in [vmin, vmin + 1e-9, vmin + 1e-3] {
            let a = solve_mpc(&clean, &x, eps).unwrap();
            let b = solve_mpc(&noisy, &x, eps).unwrap();
            assert!((&a.c_star - &b.c_star).norm() <= 1e-8, "eps {eps}: {} vs {}", a.c_star, b.c_star);
            assert!(b.c_star.norm() < 10.0);
        }
    }
}
