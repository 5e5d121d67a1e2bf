//! Offline synthesis of the gain library.
//!
//! For each weight `mu` in (0, 1] the scalarised problem
//! `(1 - mu) * discounted constraint cost + mu * LQ cost` is solved by the
//! coupled value iteration
//!
//! ```text
//! Sigma_i   = gamma (1 - mu) Pbar_i + mu Phat_i
//! L_{i+1}   = -(mu R + B^T Sigma_i B)^{-1} B^T Sigma_i A
//! Pbar_{i+1} = C^T C + gamma (A + B L_{i+1})^T Pbar_i (A + B L_{i+1})
//! Phat_{i+1} = Q + L_{i+1}^T R L_{i+1} + (A + B L_{i+1})^T Phat_i (A + B L_{i+1})
//! ```
//!
//! whose fixed point gives a strictly stabilising gain `L(mu)` together with
//! its constraint certificate `Pbar(mu)` and cost certificate `Phat(mu)`.
//! Records for an ascending grid of weights form a [`GainLibrary`].

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};
use crate::linalg::{self, lyapunov_residual, spectral_radius, STABILITY_MARGIN};
use crate::model::{matrix_from_rows, matrix_to_rows, PlantModel};

pub const LIBRARY_FORMAT_VERSION: u32 = 1;
/// Residual tolerance (relative to `1 + ||P||`) for certificate equations.
pub const CERTIFICATE_TOL: f64 = 1e-8;
/// Grid is split into this many warm-started partitions for parallel synthesis.
/// Fixed so that the library does not depend on the thread count.
pub const SYNTHESIS_PARTITIONS: usize = 8;

/// One synthesized gain with its certificate matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRecord {
    pub mu: f64,
    /// Feedback gain, `n_u x n_x`.
    pub l: DMatrix<f64>,
    /// Discounted constraint certificate.
    pub p_bar: DMatrix<f64>,
    /// Undiscounted cost certificate.
    pub p_hat: DMatrix<f64>,
    /// `gamma / (1 - gamma) * tr(Omega Pbar)`.
    pub trace_bar: f64,
    /// `tr(Omega Phat)`.
    pub trace_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Closed-loop map `A + B L`.
pub fn closed_loop(model: &PlantModel, l: &DMatrix<f64>) -> DMatrix<f64> {
    &model.a + &model.b * l
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

impl GainRecord {
    fn from_parts(model: &PlantModel, mu: f64, l: DMatrix<f64>, mut p_bar: DMatrix<f64>, mut p_hat: DMatrix<f64>) -> Self {
        linalg::symmetrize(&mut p_bar);
        linalg::symmetrize(&mut p_hat);
        let g = model.gamma;
        GainRecord {
            mu,
            trace_bar: g / (1.0 - g) * trace_product(&model.omega, &p_bar),
            trace_hat: trace_product(&model.omega, &p_hat),
            l,
            p_bar,
            p_hat,
        }
    }

    /// Builds a record for an arbitrary stabilising gain by solving both
    /// certificate Lyapunov equations directly.
    pub fn from_gain(model: &PlantModel, mu: f64, l: DMatrix<f64>) -> Result<Self> {
        if l.shape() != (model.nu(), model.nx()) {
            return Err(SmpcError::dim("B", "L", format!("gain is {:?}", l.shape())));
        }
        let phi = closed_loop(model, &l);
        let p_bar = linalg::solve_discounted_lyapunov(&phi, &model.ctc(), model.gamma)?;
        let stage = &model.q + l.transpose() * &model.r * &l;
        let p_hat = linalg::solve_discounted_lyapunov(&phi, &stage, 1.0)?;
        Ok(Self::from_parts(model, mu, l, p_bar, p_hat))
    }

    /// `Sigma = gamma (1 - mu) Pbar + mu Phat`.
    pub fn sigma(&self, gamma: f64) -> DMatrix<f64> {
        &self.p_bar * (gamma * (1.0 - self.mu)) + &self.p_hat * self.mu
    }

    /// `S(mu) = (1 - mu) Pbar + mu Phat`, the optimal scalarised value matrix.
    pub fn scalarised_value(&self) -> DMatrix<f64> {
        &self.p_bar * (1.0 - self.mu) + &self.p_hat * self.mu
    }

    /// Checks the fixed-point relations, both Lyapunov certificates and
    /// strict stability of `A + B L` (plain and discounted).
    pub fn certify(&self, model: &PlantModel) -> Result<()> {
        let fail = |reason: String| SmpcError::Certification { mu: self.mu, reason };
        let phi = closed_loop(model, &self.l);
        let rho = spectral_radius(&phi)?;
        if rho >= 1.0 - STABILITY_MARGIN {
            return Err(fail(format!("closed loop spectral radius {rho} not below 1")));
        }
        if rho * model.gamma.sqrt() >= 1.0 - STABILITY_MARGIN {
            return Err(fail(format!("discounted spectral radius {} not below 1", rho * model.gamma.sqrt())));
        }
        let bar_res = lyapunov_residual(&phi, &model.ctc(), model.gamma, &self.p_bar);
        if !(bar_res <= CERTIFICATE_TOL * (1.0 + self.p_bar.norm())) {
            return Err(fail(format!("Pbar residual {bar_res:e}")));
        }
        let stage = &model.q + self.l.transpose() * &model.r * &self.l;
        let hat_res = lyapunov_residual(&phi, &stage, 1.0, &self.p_hat);
        if !(hat_res <= CERTIFICATE_TOL * (1.0 + self.p_hat.norm())) {
            return Err(fail(format!("Phat residual {hat_res:e}")));
        }
        // Backward error of the stationarity equation; the forward error in L
        // is ill-conditioned when Pbar is singular and mu is tiny.
        let (lhs, rhs) = gain_equation(model, self.mu, &self.sigma(model.gamma));
        let l_res = (&lhs * &self.l - &rhs).norm();
        let scale = lhs.norm() * self.l.norm() + rhs.norm();
        if !(l_res <= CERTIFICATE_TOL * scale.max(f64::MIN_POSITIVE)) {
            return Err(fail(format!("stationarity residual {l_res:e}")));
        }
        Ok(())
    }
}

/// `-(mu R + B^T Sigma B)^{-1} B^T Sigma A` from the normal equations.
pub fn stationary_gain(model: &PlantModel, mu: f64, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (lhs, rhs) = gain_equation(model, mu, sigma);
    if let Some(chol) = lhs.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| SmpcError::numerical("stationary_gain", "singular gain equation"))
}

/// `(mu R + B^T Sigma B, -B^T Sigma A)`.
fn gain_equation(model: &PlantModel, mu: f64, sigma: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let bt_sigma = model.b.transpose() * sigma;
    let mut lhs = &model.r * mu + &bt_sigma * &model.b;
    linalg::symmetrize(&mut lhs);
    let rhs = -(bt_sigma * &model.a);
    (lhs, rhs)
}

/// Upper-triangular `T` with `T^T T = M^T M`.
fn triangular_factor(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let r = m.qr().r();
    let mut out = DMatrix::zeros(n, n);
    let rows = r.nrows().min(n);
    out.rows_mut(0, rows).copy_from(&r.rows(0, rows));
    out
}

fn stack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks[0].ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Square-root form of the value iteration. With `Pbar = F^T F` and
/// `Phat = H^T H` the gain minimises the stacked least-squares residual
/// `||[sqrt(g(1-mu)) F (A + B L); sqrt(mu) H (A + B L); sqrt(mu) R^1/2 L]||`,
/// which is solved by QR instead of the normal equations. When `Pbar` is
/// singular (fewer constraint outputs than states) the normal equations lose
/// the cost tie-break at small `mu` to rounding; the factored form keeps it.
struct SqrtIteration<'m> {
    model: &'m PlantModel,
    mu: f64,
    q_half: DMatrix<f64>,
    r_half: DMatrix<f64>,
}

impl<'m> SqrtIteration<'m> {
    fn new(model: &'m PlantModel, mu: f64) -> Result<Self> {
        let r_half = match model.r.clone().cholesky() {
            Some(ch) => ch.l().transpose(),
            None => return Err(SmpcError::numerical("dp_fixed_point", "R is not positive definite")),
        };
        Ok(SqrtIteration { model, mu, q_half: linalg::psd_sqrt(&model.q)?, r_half })
    }

    fn gain(&self, f: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.model;
        let wb = (m.gamma * (1.0 - self.mu)).sqrt();
        let wh = self.mu.sqrt();
        let fb = f * &m.b * wb;
        let hb = h * &m.b * wh;
        let rr = &self.r_half * wh;
        let g = stack(&[&fb, &hb, &rr]);
        let fa = -(f * &m.a * wb);
        let ha = -(h * &m.a * wh);
        let zero = DMatrix::zeros(m.nu(), m.nx());
        let rhs = stack(&[&fa, &ha, &zero]);
        let qr = g.qr();
        let qt_rhs = qr.q().transpose() * rhs;
        qr.r()
            .solve_upper_triangular(&qt_rhs)
            .filter(|l| l.iter().all(|v| v.is_finite()))
            .ok_or_else(|| SmpcError::numerical("dp_fixed_point", "singular gain equation"))
    }

    fn advance(&self, f: &DMatrix<f64>, h: &DMatrix<f64>, l: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.model;
        let phi = closed_loop(m, l);
        let fphi = f * &phi * m.gamma.sqrt();
        let hphi = h * &phi;
        let rl = &self.r_half * l;
        (
            triangular_factor(stack(&[&m.c, &fphi])),
            triangular_factor(stack(&[&self.q_half, &rl, &hphi])),
        )
    }
}

/// Runs the coupled value iteration for one weight `mu` until the combined
/// Frobenius step `||dPbar|| + ||dPhat||` drops below
/// `opts.tol * max(1, ||Pbar|| + ||Phat||)`, then certifies the result.
/// The iteration propagates triangular factors of both certificates.
pub fn dp_fixed_point(
    model: &PlantModel,
    mu: f64,
    warm_start: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    opts: DpOptions,
) -> Result<GainRecord> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(SmpcError::InvalidGrid(format!("mu = {mu} outside (0, 1]")));
    }
    if !(opts.tol > 0.0) {
        return Err(SmpcError::Usage(format!("tolerance {} must be positive", opts.tol)));
    }
    let n = model.nx();
    let it = SqrtIteration::new(model, mu)?;
    let (mut f, mut h) = match warm_start {
        Some((pb, ph)) => {
            if pb.shape() != (n, n) || ph.shape() != (n, n) {
                return Err(SmpcError::dim("A", "warm start", "warm-start matrices have the wrong shape"));
            }
            (linalg::psd_sqrt(pb)?, linalg::psd_sqrt(ph)?)
        }
        None => (DMatrix::zeros(n, n), DMatrix::zeros(n, n)),
    };
    let mut p_bar = f.transpose() * &f;
    let mut p_hat = h.transpose() * &h;
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let l = it.gain(&f, &h)?;
        (f, h) = it.advance(&f, &h, &l);
        let next_bar = f.transpose() * &f;
        let next_hat = h.transpose() * &h;
        residual = (&next_bar - &p_bar).norm() + (&next_hat - &p_hat).norm();
        p_bar = next_bar;
        p_hat = next_hat;
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol * (p_bar.norm() + p_hat.norm()).max(1.0) {
            let l = it.gain(&f, &h)?;
            let record = GainRecord::from_parts(model, mu, l, p_bar, p_hat);
            record.certify(model)?;
            return Ok(record);
        }
    }
    Err(SmpcError::NonConvergence {
        mu,
        iterations: opts.max_iter,
        residual,
    })
}

/// Spacing law for generated weight grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridSpacing {
    Log,
    Linear,
}

/// Grid description: `count` points from `min_mu` up to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub count: usize,
    pub min_mu: f64,
    pub spacing: GridSpacing,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            count: 2000,
            min_mu: 1e-15,
            spacing: GridSpacing::Log,
        }
    }
}

impl GridSpec {
    /// Ascending grid ending exactly at 1. Log spacing makes consecutive gaps
    /// grow with the index.
    pub fn build(&self) -> Result<Vec<f64>> {
        if self.count == 0 || self.count > 10_000_000 {
            return Err(SmpcError::InvalidGrid(format!("count {} out of range", self.count)));
        }
        if !(self.min_mu > 0.0 && self.min_mu <= 1.0) {
            return Err(SmpcError::InvalidGrid(format!("min_mu {} outside (0, 1]", self.min_mu)));
        }
        if self.count == 1 {
            return Ok(vec![1.0]);
        }
        if self.min_mu == 1.0 {
            return Err(SmpcError::InvalidGrid("min_mu = 1 leaves no room for more than one point".into()));
        }
        let last = (self.count - 1) as f64;
        let mut grid: Vec<f64> = (0..self.count)
            .map(|i| {
                let t = i as f64 / last;
                match self.spacing {
                    GridSpacing::Log => (self.min_mu.ln() * (1.0 - t)).exp(),
                    GridSpacing::Linear => self.min_mu + (1.0 - self.min_mu) * t,
                }
            })
            .collect();
        grid[0] = self.min_mu;
        *grid.last_mut().expect("non-empty") = 1.0;
        validate_grid(&grid)?;
        Ok(grid)
    }
}

/// Grid must be strictly increasing inside (0, 1] and end at 1.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    let Some(&last) = grid.last() else {
        return Err(SmpcError::InvalidGrid("empty grid".into()));
    };
    if last != 1.0 {
        return Err(SmpcError::InvalidGrid(format!("grid must end at 1, ends at {last}")));
    }
    if !(grid[0] > 0.0) {
        return Err(SmpcError::InvalidGrid(format!("grid starts at {} <= 0", grid[0])));
    }
    if let Some(w) = grid.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(SmpcError::InvalidGrid(format!("grid not strictly increasing at {} -> {}", w[0], w[1])));
    }
    Ok(())
}

/// Ascending-mu collection of certified gain records.
#[derive(Debug, Clone, PartialEq)]
pub struct GainLibrary {
    pub model_hash: String,
    pub grid: Vec<f64>,
    pub records: Vec<GainRecord>,
    /// Hash of the run configuration that produced the file, if any.
    pub config_hash: Option<String>,
}

/// Tolerance used when checking monotonicity of the trace columns.
fn trace_slack(v: f64) -> f64 {
    1e-8 * (1.0 + v.abs())
}

impl GainLibrary {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &GainRecord {
        &self.records[index]
    }

    /// Grid ordering and the monotone trace columns.
    pub fn check_invariants(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        if self.grid.len() != self.records.len() {
            return Err(SmpcError::InvalidGrid("grid and record counts differ".into()));
        }
        for (i, (mu, rec)) in self.grid.iter().zip(&self.records).enumerate() {
            if *mu != rec.mu {
                return Err(SmpcError::InvalidGrid(format!("record {i} has mu {} but grid says {mu}", rec.mu)));
            }
        }
        for (i, w) in self.records.windows(2).enumerate() {
            if w[1].trace_bar < w[0].trace_bar - trace_slack(w[0].trace_bar) {
                return Err(SmpcError::InvalidGrid(format!("trace_bar decreases at index {}", i + 1)));
            }
            if w[1].trace_hat > w[0].trace_hat + trace_slack(w[0].trace_hat) {
                return Err(SmpcError::InvalidGrid(format!("trace_hat increases at index {}", i + 1)));
            }
        }
        Ok(())
    }

    /// Builds the library for `grid`, warm-starting each record from its left
    /// neighbour. The grid is split into [`SYNTHESIS_PARTITIONS`] contiguous
    /// partitions solved in parallel, each warm-started from its own first
    /// point.
    pub fn generate(model: &PlantModel, grid: &[f64], opts: DpOptions) -> Result<Self> {
        model.ensure_valid()?;
        validate_grid(grid)?;
        let chunk = grid.len().div_ceil(SYNTHESIS_PARTITIONS).max(1);
        let parts: Vec<Result<Vec<GainRecord>>> = grid
            .par_chunks(chunk)
            .map(|mus| {
                let mut out: Vec<GainRecord> = Vec::with_capacity(mus.len());
                for &mu in mus {
                    let warm = out.last().map(|r| (&r.p_bar, &r.p_hat));
                    let rec = dp_fixed_point(model, mu, warm, opts).map_err(|e| SmpcError::Synthesis {
                        mu,
                        source: Box::new(e),
                    })?;
                    out.push(rec);
                }
                Ok(out)
            })
            .collect();
        let mut records = Vec::with_capacity(grid.len());
        for part in parts {
            records.extend(part?);
        }
        if records.len() >= 2 && (&records[0].l - &records[1].l).norm() < 1e-12 {
            log::warn!(
                "gains at mu = {} and mu = {} coincide; the grid starts too low to separate records",
                records[0].mu,
                records[1].mu
            );
        }
        let library = GainLibrary {
            model_hash: model.content_hash(),
            grid: grid.to_vec(),
            records,
            config_hash: None,
        };
        library.check_invariants()?;
        Ok(library)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&LibraryDoc::from(self)).expect("plain data serialises")
    }

    /// Parses a library document and checks shapes and invariants. Does not
    /// check the model hash; see [`GainLibrary::from_json_for`].
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LibraryDoc = serde_json::from_str(text).map_err(|e| SmpcError::Parse(e.to_string()))?;
        doc.into_library()
    }

    /// Parses a library and rejects it unless it was built for `model`.
    pub fn from_json_for(text: &str, model: &PlantModel) -> Result<Self> {
        let lib = Self::from_json(text)?;
        let expected = model.content_hash();
        if lib.model_hash != expected {
            return Err(SmpcError::StaleLibrary {
                expected,
                found: lib.model_hash,
            });
        }
        let (n, m) = (model.nx(), model.nu());
        if let Some(r) = lib.records.first() {
            if r.l.shape() != (m, n) {
                return Err(SmpcError::dim("model", "library", "gain shape does not match the model"));
            }
        }
        Ok(lib)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    mu: f64,
    #[serde(rename = "L")]
    l: Vec<Vec<f64>>,
    #[serde(rename = "P_bar")]
    p_bar: Vec<Vec<f64>>,
    #[serde(rename = "P_hat")]
    p_hat: Vec<Vec<f64>>,
    trace_bar: f64,
    trace_hat: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryDoc {
    format_version: u32,
    model_hash: String,
    grid: Vec<f64>,
    records: Vec<RecordDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl From<&GainLibrary> for LibraryDoc {
    fn from(lib: &GainLibrary) -> Self {
        LibraryDoc {
            format_version: LIBRARY_FORMAT_VERSION,
            model_hash: lib.model_hash.clone(),
            grid: lib.grid.clone(),
            config_hash: lib.config_hash.clone(),
            records: lib
                .records
                .iter()
                .map(|r| RecordDoc {
                    mu: r.mu,
                    l: matrix_to_rows(&r.l),
                    p_bar: matrix_to_rows(&r.p_bar),
                    p_hat: matrix_to_rows(&r.p_hat),
                    trace_bar: r.trace_bar,
                    trace_hat: r.trace_hat,
                })
                .collect(),
        }
    }
}

impl LibraryDoc {
    fn into_library(self) -> Result<GainLibrary> {
        if self.format_version != LIBRARY_FORMAT_VERSION {
            return Err(SmpcError::Parse(format!("unsupported library version {}", self.format_version)));
        }
        if self.records.is_empty() {
            return Err(SmpcError::Parse("library has no records".into()));
        }
        let mut records = Vec::with_capacity(self.records.len());
        let mut shape = None;
        for rec in self.records {
            let l = matrix_from_rows("L", &rec.l)?;
            let p_bar = matrix_from_rows("P_bar", &rec.p_bar)?;
            let p_hat = matrix_from_rows("P_hat", &rec.p_hat)?;
            let (m, n) = l.shape();
            if p_bar.shape() != (n, n) || p_hat.shape() != (n, n) {
                return Err(SmpcError::Parse("certificate shape does not match the gain".into()));
            }
            match shape {
                None => shape = Some((m, n)),
                Some(s) if s != (m, n) => return Err(SmpcError::Parse("records have inconsistent shapes".into())),
                _ => {}
            }
            if ![rec.mu, rec.trace_bar, rec.trace_hat].iter().all(|v| v.is_finite()) {
                return Err(SmpcError::Parse("non-finite scalar in record".into()));
            }
            records.push(GainRecord {
                mu: rec.mu,
                l,
                p_bar,
                p_hat,
                trace_bar: rec.trace_bar,
                trace_hat: rec.trace_hat,
            });
        }
        let lib = GainLibrary {
            model_hash: self.model_hash,
            grid: self.grid,
            records,
            config_hash: self.config_hash,
        };
        lib.check_invariants()?;
        Ok(lib)
    }
}
