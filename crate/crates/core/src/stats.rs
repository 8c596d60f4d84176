//! Moment estimation from a complete panel: mean vector, sample covariance,
//! correlation, and positive-semidefiniteness certification/repair.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::format::fmt_sig;
use crate::linalg::{dot, LinalgError, Matrix, SymmetricEigen};
use crate::panel::PricePanel;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 observations, have {0}")]
    InsufficientData(usize),
    #[error("panel has missing cells")]
    IncompletePanel,
    #[error("zero variance for {0}")]
    DegenerateVariance(String),
    #[error("non-finite entry in moment estimate")]
    NumericError,
    #[error("invalid moments: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("moments csv: {0}")]
    Csv(String),
}

/// Mean vector and covariance matrix of the panel columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct MomentEstimate<T> {
    symbols: Vec<String>,
    mean: Vec<T>,
    cov: Matrix<T>,
    n_obs: usize,
}

impl<T: Scalar> MomentEstimate<T> {
    /// Validates dimensions and symmetrizes `cov`.
    pub fn new(symbols: Vec<String>, mean: Vec<T>, cov: Matrix<T>, n_obs: usize) -> Result<Self, StatsError> {
        let n = symbols.len();
        if mean.len() != n || cov.rows() != n || cov.cols() != n {
            return Err(StatsError::Invalid(format!(
                "{n} symbols, {} means, {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if n_obs < 2 {
            return Err(StatsError::InsufficientData(n_obs));
        }
        Ok(Self {
            symbols,
            mean,
            cov: cov.symmetrized(),
            n_obs,
        })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix<T> {
        &self.cov
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.symbols.len()
    }

    /// Per-asset volatility `σ_i = sqrt(Σ_ii)`.
    pub fn volatilities(&self) -> Vec<T> {
        self.cov.diag().into_iter().map(|v| v.max(T::zero()).sqrt()).collect()
    }

    fn is_finite(&self) -> bool {
        self.cov.is_finite() && self.mean.iter().all(|v| v.is_finite())
    }
}

/// Column means and `n - 1` sample covariance, computed in two passes.
pub fn estimate_moments<T: Scalar>(p: &PricePanel<T>) -> Result<MomentEstimate<T>, StatsError> {
    if p.has_missing() {
        return Err(StatsError::IncompletePanel);
    }
    let rows = p.dense_rows().ok_or(StatsError::IncompletePanel)?;
    let t = rows.len();
    if t < 2 {
        return Err(StatsError::InsufficientData(t));
    }
    let n = p.n_symbols();
    let t_s = T::from_usize_lossy(t);
    let mut mean = vec![T::zero(); n];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t_s;
    }
    let mut cov = Matrix::zeros(n, n);
    let mut centered = vec![T::zero(); n];
    for r in &rows {
        for ((c, &v), &m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..n {
            let ci = centered[i];
            for j in 0..=i {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = t_s - T::one();
    for i in 0..n {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    MomentEstimate::new(p.symbols().to_vec(), mean, cov, t)
}

/// Correlation matrix with an exactly unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct CorrelationMatrix<T> {
    pub symbols: Vec<String>,
    pub rho: Matrix<T>,
}

impl<T: Scalar> CorrelationMatrix<T> {
    /// `Σ_ij = ρ_ij σ_i σ_j`.
    pub fn to_covariance(&self, sigma: &[T]) -> Matrix<T> {
        let n = self.symbols.len();
        Matrix::from_fn(n, n, |i, j| self.rho[(i, j)] * sigma[i] * sigma[j])
    }
}

pub fn to_correlation<T: Scalar>(m: &MomentEstimate<T>) -> Result<CorrelationMatrix<T>, StatsError> {
    let n = m.dim();
    let sigma = m.volatilities();
    if let Some(i) = (0..n).find(|&i| !(m.cov[(i, i)] > T::zero())) {
        return Err(StatsError::DegenerateVariance(m.symbols[i].clone()));
    }
    let rho = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one()
        } else {
            m.cov[(i, j)] / (sigma[i] * sigma[j])
        }
    });
    Ok(CorrelationMatrix {
        symbols: m.symbols.clone(),
        rho,
    })
}

/// `wᵀΣw`.
pub fn portfolio_variance<T: Scalar>(cov: &Matrix<T>, w: &[T]) -> T {
    cov.quad_form(w)
}

/// Portfolio volatility written as own-variance terms plus pairwise
/// correlation terms: `sqrt(Σ w_i²σ_i² + Σ_i Σ_{j≠i} w_i w_j σ_i σ_j ρ_ij)`.
/// Returns the quantity under the square root alongside the root so callers
/// can compare it against `wᵀΣw` without losing sign information.
pub fn volatility_from_correlation<T: Scalar>(w: &[T], sigma: &[T], rho: &Matrix<T>) -> (T, T) {
    let n = w.len();
    let mut own = T::zero();
    let mut cross = T::zero();
    for i in 0..n {
        own += w[i] * w[i] * sigma[i] * sigma[i];
        for j in 0..n {
            if j != i {
                cross += w[i] * w[j] * sigma[i] * sigma[j] * rho[(i, j)];
            }
        }
    }
    let var = own + cross;
    (var, var.max(T::zero()).sqrt())
}

/// Expected portfolio value `Σ w_i a_i`.
pub fn expected_return<T: Scalar>(w: &[T], mean: &[T]) -> T {
    dot(w, mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct PsdReport<T> {
    pub min_eigenvalue: T,
    pub tolerance: T,
    pub is_psd: bool,
}

/// Default certification tolerance: `1e-10 × max diagonal entry`.
pub fn default_psd_tolerance<T: Scalar>(cov: &Matrix<T>) -> T {
    T::lit(1e-10) * cov.max_diag()
}

/// Smallest eigenvalue of the covariance and whether it clears `-tol`
/// (default [`default_psd_tolerance`]).
pub fn psd_check<T: Scalar>(m: &MomentEstimate<T>, tol: Option<T>) -> Result<PsdReport<T>, StatsError> {
    if !m.is_finite() {
        return Err(StatsError::NumericError);
    }
    let tolerance = tol.unwrap_or_else(|| default_psd_tolerance(&m.cov));
    let eig = SymmetricEigen::new(&m.cov)?;
    let min_eigenvalue = eig.min_value();
    Ok(PsdReport {
        min_eigenvalue,
        tolerance,
        is_psd: min_eigenvalue >= -tolerance,
    })
}

/// Clips eigenvalues below `floor` and reassembles the covariance. Inputs
/// whose spectrum already clears `floor` within tolerance come back
/// unchanged.
pub fn psd_repair<T: Scalar>(m: &MomentEstimate<T>, floor: T) -> Result<MomentEstimate<T>, StatsError> {
    if !m.is_finite() {
        return Err(StatsError::NumericError);
    }
    let floor = floor.max(T::zero());
    let tol = default_psd_tolerance(&m.cov);
    let eig = SymmetricEigen::new(&m.cov)?;
    if eig.min_value() >= floor - tol {
        return Ok(m.clone());
    }
    let cov = eig.reconstruct_with(|l| l.max(floor)).symmetrized();
    Ok(MomentEstimate {
        symbols: m.symbols.clone(),
        mean: m.mean.clone(),
        cov,
        n_obs: m.n_obs,
    })
}

/// `symbol,<symbols>` header, a `MEAN` row, the covariance block and an
/// `N` row carrying the observation count.
pub fn write_moments_csv<T: Scalar>(m: &MomentEstimate<T>) -> String {
    let mut out = String::from("symbol");
    for s in &m.symbols {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    let mut row = |name: &str, vals: &mut dyn Iterator<Item = String>| {
        out.push_str(name);
        for v in vals {
            out.push(',');
            out.push_str(&v);
        }
        out.push('\n');
    };
    row("MEAN", &mut m.mean.iter().map(|v| fmt_sig(v.to_f64_lossy())));
    for i in 0..m.dim() {
        row(&m.symbols[i], &mut m.cov.row(i).iter().map(|v| fmt_sig(v.to_f64_lossy())));
    }
    let n_obs = m.n_obs.to_string();
    row("N", &mut std::iter::repeat_n(n_obs, m.dim()));
    out
}

pub fn read_moments_csv<T: Scalar>(raw: &[u8]) -> Result<MomentEstimate<T>, StatsError> {
    let csv_err = |e: csv::Error| StatsError::Csv(e.to_string());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw);
    let symbols: Vec<String> = reader.headers().map_err(csv_err)?.iter().skip(1).map(str::to_string).collect();
    let n = symbols.len();
    let mut mean = None;
    let mut n_obs = None;
    let mut cov_rows: Vec<Option<Vec<T>>> = vec![None; n];
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let name = record.get(0).unwrap_or_default().to_string();
        let vals: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>().map_err(|_| StatsError::Csv(format!("bad number '{c}' in row {name}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != n {
            return Err(StatsError::Csv(format!("row {name} has {} values, expected {n}", vals.len())));
        }
        let vals: Vec<T> = vals.into_iter().map(T::lit).collect();
        if name.eq_ignore_ascii_case("MEAN") {
            mean = Some(vals);
        } else if name.eq_ignore_ascii_case("N") {
            n_obs = vals.first().and_then(|v| v.to_usize());
        } else if let Some(i) = symbols.iter().position(|s| *s == name) {
            cov_rows[i] = Some(vals);
        } else {
            return Err(StatsError::Csv(format!("unknown row '{name}'")));
        }
    }
    let mean = mean.ok_or_else(|| StatsError::Csv("missing MEAN row".into()))?;
    let cov_rows: Vec<Vec<T>> = cov_rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| StatsError::Csv(format!("missing covariance row for {}", symbols[i]))))
        .collect::<Result<_, _>>()?;
    let cov = Matrix::from_rows(cov_rows)?;
    let n_obs = n_obs.ok_or_else(|| StatsError::Csv("missing N row".into()))?;
    MomentEstimate::new(symbols, mean, cov, n_obs)
}

pub fn write_correlation_csv<T: Scalar>(c: &CorrelationMatrix<T>) -> String {
    let mut out = String::from("symbol");
    for s in &c.symbols {
        let _ = write!(out, ",{s}");
    }
    out.push('\n');
    for (i, s) in c.symbols.iter().enumerate() {
        out.push_str(s);
        for v in c.rho.row(i) {
            let _ = write!(out, ",{}", fmt_sig(v.to_f64_lossy()));
        }
        out.push('\n');
    }
    out
}
