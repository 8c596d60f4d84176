//! Convex quadratic program with an optional second-order-cone constraint.
//!
//! ```text
//! minimize    ½ xᵀQx
//! subject to  aᵀx = b            (eq)
//!             aᵀx ≥ b            (ineq)
//!             l ≤ x ≤ u          (bounds, either side optional)
//!             rᵀx − κ·sqrt(xᵀΣx + ε) ≥ 0   (soc, optional)
//! ```
//!
//! [`solve`] runs a primal-dual path-following interior-point method; the
//! cone constraint enters as a smooth concave inequality.

mod ipm;
mod kkt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

pub use kkt::check_kkt;

/// Smoothing added under the square root of the cone constraint.
pub const SOC_EPSILON: f64 = 1e-12;

/// Phase-one violation above which a problem is declared infeasible.
pub const INFEASIBILITY_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("problem document: {0}")]
    Document(String),
}

/// `coeffs · x (= or ≥) rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct LinearConstraint<T> {
    pub coeffs: Vec<T>,
    pub rhs: T,
}

impl<T: Scalar> LinearConstraint<T> {
    pub fn new(coeffs: Vec<T>, rhs: T) -> Self {
        Self { coeffs, rhs }
    }

    pub fn value(&self, x: &[T]) -> T {
        dot(&self.coeffs, x)
    }
}

/// Per-variable bounds; `None` is unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Bound<T> {
    #[serde(default)]
    pub lower: Option<T>,
    #[serde(default)]
    pub upper: Option<T>,
}

impl<T: Scalar> Bound<T> {
    pub fn free() -> Self {
        Self { lower: None, upper: None }
    }

    pub fn nonnegative() -> Self {
        Self {
            lower: Some(T::zero()),
            upper: None,
        }
    }

    pub fn boxed(lower: T, upper: T) -> Self {
        Self {
            lower: Some(lower),
            upper: Some(upper),
        }
    }
}

/// `rᵀx − κ·sqrt(xᵀΣx) ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct SocConstraint<T> {
    pub kappa: T,
    pub sigma: Matrix<T>,
    pub r: Vec<T>,
}

impl<T: Scalar> SocConstraint<T> {
    /// `sqrt(xᵀΣx + ε)` and `Σx`.
    pub(crate) fn root(&self, x: &[T]) -> (T, Vec<T>) {
        let sx = self.sigma.mul_vec(x);
        let phi = (dot(x, &sx).max(T::zero()) + T::lit(SOC_EPSILON)).sqrt();
        (phi, sx)
    }

    /// Smoothed constraint value `rᵀx − κ·sqrt(xᵀΣx + ε)`.
    pub fn value(&self, x: &[T]) -> T {
        dot(&self.r, x) - self.kappa * self.root(x).0
    }

    /// Unsmoothed value `rᵀx − κ·sqrt(xᵀΣx)`.
    pub fn exact_value(&self, x: &[T]) -> T {
        dot(&self.r, x) - self.kappa * self.sigma.quad_form(x).max(T::zero()).sqrt()
    }

    pub(crate) fn gradient(&self, x: &[T]) -> Vec<T> {
        let (phi, sx) = self.root(x);
        self.r.iter().zip(&sx).map(|(&r, &s)| r - self.kappa * s / phi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct QpProblem<T> {
    /// Objective Hessian; the objective is `½ xᵀQx`.
    pub q: Matrix<T>,
    #[serde(default)]
    pub eq: Vec<LinearConstraint<T>>,
    /// Constraints of the form `coeffs · x ≥ rhs`.
    #[serde(default)]
    pub ineq: Vec<LinearConstraint<T>>,
    /// One entry per variable, or empty for all-free.
    #[serde(default)]
    pub bounds: Vec<Bound<T>>,
    #[serde(default)]
    pub soc: Option<SocConstraint<T>>,
}

impl<T: Scalar> QpProblem<T> {
    pub fn new(q: Matrix<T>) -> Self {
        Self {
            q,
            eq: Vec::new(),
            ineq: Vec::new(),
            bounds: Vec::new(),
            soc: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn bound(&self, i: usize) -> Bound<T> {
        self.bounds.get(i).copied().unwrap_or_else(Bound::free)
    }

    /// `½ xᵀQx`.
    pub fn objective(&self, x: &[T]) -> T {
        T::lit(0.5) * self.q.quad_form(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if !self.q.is_square() {
            return Err(QpError::Dimension(format!("q is {}x{}", self.q.rows(), self.q.cols())));
        }
        if !self.q.is_finite() {
            return Err(QpError::Invalid("q has non-finite entries".into()));
        }
        for (kind, rows) in [("eq", &self.eq), ("ineq", &self.ineq)] {
            for (k, c) in rows.iter().enumerate() {
                if c.coeffs.len() != n {
                    return Err(QpError::Dimension(format!(
                        "{kind}[{k}] has {} coefficients, expected {n}",
                        c.coeffs.len()
                    )));
                }
                if !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite()) {
                    return Err(QpError::Invalid(format!("{kind}[{k}] has non-finite entries")));
                }
            }
        }
        if !self.bounds.is_empty() && self.bounds.len() != n {
            return Err(QpError::Dimension(format!("{} bounds for {n} variables", self.bounds.len())));
        }
        for (i, b) in self.bounds.iter().enumerate() {
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l > u {
                    return Err(QpError::Invalid(format!("bound {i}: lower {l} > upper {u}")));
                }
            }
        }
        if let Some(soc) = &self.soc {
            if !(soc.kappa > T::zero()) {
                return Err(QpError::Invalid("soc kappa must be positive".into()));
            }
            if soc.sigma.rows() != n || soc.sigma.cols() != n || soc.r.len() != n {
                return Err(QpError::Dimension("soc sigma/r do not match problem size".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct SolveOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Initial complementarity `s_k z_k` of every inequality pair.
    pub barrier_mu0: T,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-8),
            max_iter: 200,
            barrier_mu0: T::lit(0.1),
        }
    }
}

impl<T: Scalar> SolveOptions<T> {
    pub fn validate(&self) -> Result<(), QpError> {
        if !(self.tol > T::zero()) {
            return Err(QpError::InvalidOptions("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(QpError::InvalidOptions("max_iter must be at least 1".into()));
        }
        if !(self.barrier_mu0 > T::zero()) {
            return Err(QpError::InvalidOptions("barrier_mu0 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct KktResiduals<T> {
    pub stationarity: T,
    pub primal_feasibility: T,
    pub complementarity: T,
}

impl<T: Scalar> KktResiduals<T> {
    pub fn max(&self) -> T {
        self.stationarity.max(self.primal_feasibility).max(self.complementarity)
    }

    pub fn is_finite(&self) -> bool {
        self.stationarity.is_finite() && self.primal_feasibility.is_finite() && self.complementarity.is_finite()
    }
}

/// Lagrange multipliers, signed so that stationarity reads
/// `Qx − Σ λ_e a_e − Σ μ_k a_k − μ_lower + μ_upper − μ_soc ∇g_soc = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Duals<T> {
    pub eq: Vec<T>,
    pub ineq: Vec<T>,
    /// Per variable; zero where there is no lower bound.
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub soc: T,
}

impl<T: Scalar> Duals<T> {
    pub fn zeros(p: &QpProblem<T>) -> Self {
        let n = p.dim();
        Self {
            eq: vec![T::zero(); p.eq.len()],
            ineq: vec![T::zero(); p.ineq.len()],
            lower: vec![T::zero(); n],
            upper: vec![T::zero(); n],
            soc: T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintRef {
    Ineq(usize),
    Soc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ViolatedConstraint<T> {
    pub constraint: ConstraintRef,
    /// Constraint value at the least-violating point (`coeffs·x − rhs`, or the
    /// cone value).
    pub value: T,
    /// Largest `coeffs·x` attainable while the remaining constraints hold.
    pub max_achievable: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct InfeasibilityReport<T> {
    /// Smallest achievable maximum violation over the soft constraints.
    pub violation: T,
    pub violated: Vec<ViolatedConstraint<T>>,
}

impl<T: Scalar> InfeasibilityReport<T> {
    pub fn max_achievable(&self, c: ConstraintRef) -> Option<T> {
        self.violated.iter().find(|v| v.constraint == c).and_then(|v| v.max_achievable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Solution<T> {
    pub x: Vec<T>,
    /// `½ xᵀQx`.
    pub objective: T,
    pub status: Status,
    pub kkt: KktResiduals<T>,
    pub iterations: usize,
    pub duals: Duals<T>,
    #[serde(default)]
    pub infeasibility: Option<InfeasibilityReport<T>>,
}

/// JSON exchange form of a problem plus the options to solve it with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ProblemDocument<T> {
    pub q: Matrix<T>,
    #[serde(default)]
    pub eq: Vec<LinearConstraint<T>>,
    #[serde(default)]
    pub ineq: Vec<LinearConstraint<T>>,
    #[serde(default)]
    pub bounds: Vec<Bound<T>>,
    #[serde(default)]
    pub soc: Option<SocConstraint<T>>,
    #[serde(default)]
    pub options: SolveOptions<T>,
}

impl<T: Scalar> ProblemDocument<T> {
    pub fn new(problem: QpProblem<T>, options: SolveOptions<T>) -> Self {
        Self {
            q: problem.q,
            eq: problem.eq,
            ineq: problem.ineq,
            bounds: problem.bounds,
            soc: problem.soc,
            options,
        }
    }

    pub fn into_parts(self) -> (QpProblem<T>, SolveOptions<T>) {
        (
            QpProblem {
                q: self.q,
                eq: self.eq,
                ineq: self.ineq,
                bounds: self.bounds,
                soc: self.soc,
            },
            self.options,
        )
    }

    pub fn to_json(&self) -> Result<String, QpError> {
        serde_json::to_string_pretty(self).map_err(|e| QpError::Document(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, QpError> {
        let doc: Self = serde_json::from_str(s).map_err(|e| QpError::Document(e.to_string()))?;
        doc.clone().into_parts().0.validate()?;
        Ok(doc)
    }
}

/// Solves `p` from a cold start.
///
/// The start point is the budget-simplex center `B/n` when every variable
/// is bounded below by zero and an all-ones equality fixes the total to
/// `B > 0`; otherwise a phase-one problem (minimize the largest violation of
/// the inequality and cone constraints) supplies it. Phase one also runs
/// when the main iteration fails to converge; a remaining violation above
/// [`INFEASIBILITY_THRESHOLD`] yields [`Status::Infeasible`] together with
/// the best attainable value of each violated constraint.
pub fn solve<T: Scalar>(p: &QpProblem<T>, opts: &SolveOptions<T>) -> Result<Solution<T>, QpError> {
    p.validate()?;
    opts.validate()?;
    Ok(ipm::solve_validated(p, opts))
}
