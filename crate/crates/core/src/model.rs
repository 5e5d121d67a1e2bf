//! Plant and problem data: the LTI system, cost weights, chance-constraint
//! data and disturbance covariance, plus the structural checks every
//! consumer relies on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SmpcError};
use crate::linalg::{self, numerical_rank, psd_sqrt};

/// Largest state/input/output dimension accepted from a document.
pub const MAX_DIM: usize = 50;
/// Largest prediction horizon accepted from a document.
pub const MAX_HORIZON: usize = 1000;

const SYMMETRY_TOL: f64 = 1e-10;

/// Linear system `x+ = A x + B u + w` with `E[w] = 0`, `E[w w^T] = Omega`,
/// quadratic cost weights `Q`, `R`, and the discounted chance constraint
/// `sum_k gamma^k P{||C x_k|| >= 1} <= e` handled over horizon `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub gamma: f64,
    pub e: f64,
    pub horizon: usize,
}

/// Outcome of the assumption checks on a [`PlantModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub controllable: bool,
    pub observable: bool,
    pub q_psd: bool,
    pub r_positive_definite: bool,
    pub omega_positive_definite: bool,
    pub gamma_in_range: bool,
    pub e_positive: bool,
    pub horizon_positive: bool,
    pub rank_deficiencies: Vec<String>,
    pub spectral_radius_a: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.controllable
            && self.observable
            && self.q_psd
            && self.r_positive_definite
            && self.omega_positive_definite
            && self.gamma_in_range
            && self.e_positive
            && self.horizon_positive
    }
}

/// Row-major JSON layout of a [`PlantModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct PlantModelDoc {
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
    Omega: Vec<Vec<f64>>,
    gamma: f64,
    e: f64,
    N: usize,
}

/// Converts row-major nested arrays into a dense matrix, rejecting ragged
/// rows and non-finite entries.
pub fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(SmpcError::Parse(format!("matrix {name} is empty")));
    }
    if nrows > MAX_DIM * MAX_HORIZON || ncols > MAX_DIM * MAX_HORIZON {
        return Err(SmpcError::Parse(format!("matrix {name} is too large")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(SmpcError::Parse(format!(
            "matrix {name} row {i} has {} entries, expected {ncols}",
            rows[i].len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SmpcError::Parse(format!("matrix {name} has a non-finite entry")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn vector_from_slice(name: &str, values: &[f64]) -> Result<DVector<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SmpcError::Parse(format!("vector {name} has a non-finite entry")));
    }
    Ok(DVector::from_column_slice(values))
}

impl PlantModel {
    /// Builds a model after structural checks (shapes, finiteness, size
    /// limits). Assumption checks are separate: see [`PlantModel::validate`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        omega: DMatrix<f64>,
        gamma: f64,
        e: f64,
        horizon: usize,
    ) -> Result<Self> {
        let model = PlantModel {
            a,
            b,
            c,
            q,
            r,
            omega,
            gamma,
            e,
            horizon,
        };
        model.check_structure()?;
        Ok(model)
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nc(&self) -> usize {
        self.c.nrows()
    }

    fn check_structure(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 || !self.a.is_square() {
            return Err(SmpcError::dim("A", "A", format!("A must be square and non-empty, got {:?}", self.a.shape())));
        }
        if n > MAX_DIM || self.b.ncols() > MAX_DIM || self.c.nrows() > MAX_DIM {
            return Err(SmpcError::InvalidModel(format!("dimensions exceed the limit of {MAX_DIM}")));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(SmpcError::dim("A", "B", format!("B is {:?}, expected {n} rows", self.b.shape())));
        }
        if self.c.ncols() != n || self.c.nrows() == 0 {
            return Err(SmpcError::dim("A", "C", format!("C is {:?}, expected {n} columns", self.c.shape())));
        }
        if self.q.shape() != (n, n) {
            return Err(SmpcError::dim("A", "Q", format!("Q is {:?}, expected {n}x{n}", self.q.shape())));
        }
        let m = self.b.ncols();
        if self.r.shape() != (m, m) {
            return Err(SmpcError::dim("B", "R", format!("R is {:?}, expected {m}x{m}", self.r.shape())));
        }
        if self.omega.shape() != (n, n) {
            return Err(SmpcError::dim("A", "Omega", format!("Omega is {:?}, expected {n}x{n}", self.omega.shape())));
        }
        if self.horizon > MAX_HORIZON {
            return Err(SmpcError::InvalidModel(format!("horizon {} exceeds {MAX_HORIZON}", self.horizon)));
        }
        let all = [&self.a, &self.b, &self.c, &self.q, &self.r, &self.omega];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite()))
            || !self.gamma.is_finite()
            || !self.e.is_finite()
        {
            return Err(SmpcError::InvalidModel("non-finite entry".into()));
        }
        Ok(())
    }

    /// Runs the assumption checks: definiteness of the weights, `gamma` in
    /// (0,1), `e > 0`, `N >= 1`, controllability of `(A, B)` and
    /// observability of `(A, Q^{1/2})`.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.check_structure()?;
        let n = self.nx();
        let mut findings = Vec::new();

        let ctrb = controllability_matrix(&self.a, &self.b);
        let ctrb_rank = numerical_rank(&ctrb)?;
        let controllable = ctrb_rank == n;
        if !controllable {
            findings.push(format!("controllability matrix has rank {ctrb_rank} < {n}"));
        }

        let q_sym = is_symmetric(&self.q);
        let q_min = linalg::min_eigenvalue(&self.q)?;
        let q_scale = self.q.norm().max(1.0);
        let q_psd = q_sym && q_min >= -1e-10 * q_scale;
        if !q_psd {
            findings.push(format!("Q is not symmetric positive semidefinite (min eigenvalue {q_min:e})"));
        }

        let q_half = psd_sqrt(&self.q)?;
        let obsv = observability_matrix(&self.a, &q_half);
        let obsv_rank = numerical_rank(&obsv)?;
        let observable = obsv_rank == n;
        if !observable {
            findings.push(format!("observability matrix of (A, Q^1/2) has rank {obsv_rank} < {n}"));
        }

        let r_positive_definite = is_symmetric(&self.r) && positive_definite(&self.r)?;
        if !r_positive_definite {
            findings.push("R is not symmetric positive definite".into());
        }
        let omega_positive_definite = is_symmetric(&self.omega) && positive_definite(&self.omega)?;
        if !omega_positive_definite {
            findings.push("Omega is not symmetric positive definite".into());
        }

        let gamma_in_range = self.gamma > 0.0 && self.gamma < 1.0;
        if !gamma_in_range {
            findings.push(format!("gamma = {} outside (0, 1)", self.gamma));
        }
        let e_positive = self.e > 0.0;
        if !e_positive {
            findings.push(format!("e = {} is not positive", self.e));
        }
        let horizon_positive = self.horizon >= 1;
        if !horizon_positive {
            findings.push("horizon N must be at least 1".into());
        }

        Ok(ValidationReport {
            controllable,
            observable,
            q_psd,
            r_positive_definite,
            omega_positive_definite,
            gamma_in_range,
            e_positive,
            horizon_positive,
            rank_deficiencies: findings,
            spectral_radius_a: linalg::spectral_radius(&self.a)?,
        })
    }

    /// Validates and refuses a model that violates any assumption.
    pub fn ensure_valid(&self) -> Result<ValidationReport> {
        let report = self.validate()?;
        if !report.is_valid() {
            return Err(SmpcError::InvalidModel(report.rank_deficiencies.join("; ")));
        }
        Ok(report)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PlantModelDoc =
            serde_json::from_str(text).map_err(|e| SmpcError::Parse(e.to_string()))?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: PlantModelDoc) -> Result<Self> {
        PlantModel::new(
            matrix_from_rows("A", &doc.A)?,
            matrix_from_rows("B", &doc.B)?,
            matrix_from_rows("C", &doc.C)?,
            matrix_from_rows("Q", &doc.Q)?,
            matrix_from_rows("R", &doc.R)?,
            matrix_from_rows("Omega", &doc.Omega)?,
            doc.gamma,
            doc.e,
            doc.N,
        )
    }

    fn to_doc(&self) -> PlantModelDoc {
        PlantModelDoc {
            A: matrix_to_rows(&self.a),
            B: matrix_to_rows(&self.b),
            C: matrix_to_rows(&self.c),
            Q: matrix_to_rows(&self.q),
            R: matrix_to_rows(&self.r),
            Omega: matrix_to_rows(&self.omega),
            gamma: self.gamma,
            e: self.e,
            N: self.horizon,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("plain data serialises")
    }

    /// Hex SHA-256 of the canonical JSON form; used to tie libraries and
    /// outputs to the model they were computed for.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// `C^T C`.
    pub fn ctc(&self) -> DMatrix<f64> {
        self.c.transpose() * &self.c
    }

    /// Stage cost `x^T Q x + u^T R u`.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.q, x) + linalg::quad_form(&self.r, u)
    }

    /// Coupled-tank benchmark: two tanks sampled at 0.05 s, `Q = R = I`,
    /// `Omega = I`, `gamma = 0.9`, `e = 1.5`, `N = 10`.
    pub fn coupled_tank() -> Self {
        PlantModel::new(
            DMatrix::from_row_slice(2, 2, &[0.8207, 0.04, 0.0799, 0.7808]),
            DMatrix::from_row_slice(2, 2, &[0.0454, 0.0011, 0.0022, 0.0443]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.15, 0.1, -0.1]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.9,
            1.5,
            10,
        )
        .expect("benchmark model is well formed")
    }
}

impl Serialize for PlantModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PlantModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = PlantModelDoc::deserialize(deserializer)?;
        PlantModel::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).norm() <= SYMMETRY_TOL * (1.0 + m.norm())
}

fn positive_definite(m: &DMatrix<f64>) -> Result<bool> {
    Ok(linalg::min_eigenvalue(m)? > RANK_PD_TOL * m.norm().max(f64::MIN_POSITIVE))
}

const RANK_PD_TOL: f64 = 1e-12;

/// `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

/// `[C; CA; ...; CA^{n-1}]`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(n * p, n);
    let mut block = c.clone();
    for k in 0..n {
        out.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = block * a;
    }
    out
}
