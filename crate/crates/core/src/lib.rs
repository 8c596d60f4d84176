//! Mean-variance portfolio optimization.
//!
//! The pipeline runs in five stages, one module each:
//!
//! - [`ingest`]: symbol directories, OHLCV histories and templated sources
//! - [`panel`]: date alignment, observation filtering, returns
//! - [`stats`]: mean vector, sample covariance, correlation, PSD repair
//! - [`qp`]: interior-point solver for the minimum-variance program
//! - [`portfolio`]: problem assembly, allocations and the efficient frontier
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the common `f64` instantiation.

pub mod format;
pub mod ingest;
pub mod linalg;
pub mod panel;
pub mod portfolio;
pub mod qp;
pub mod scalar;
pub mod stats;

pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type OhlcvRow64 = ingest::OhlcvRow<f64>;
pub type PricePanel64 = panel::PricePanel<f64>;
pub type MomentEstimate64 = stats::MomentEstimate<f64>;
pub type CorrelationMatrix64 = stats::CorrelationMatrix<f64>;
pub type QpProblem64 = qp::QpProblem<f64>;
pub type Solution64 = qp::Solution<f64>;
pub type SolveOptions64 = qp::SolveOptions<f64>;
pub type ProblemSpec64 = portfolio::ProblemSpec<f64>;
pub type Allocation64 = portfolio::Allocation<f64>;
pub type FrontierCurve64 = portfolio::FrontierCurve<f64>;

pub type PricePanel32 = panel::PricePanel<f32>;
pub type MomentEstimate32 = stats::MomentEstimate<f32>;
