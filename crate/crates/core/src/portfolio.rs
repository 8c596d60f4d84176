//! Minimum-variance portfolio problems built from a [`MomentEstimate`]:
//! problem assembly for each constraint variant, single-target optimization
//! and the efficient-frontier sweep.
//!
//! Two readings of the budget are supported. `AllocationEquality` fixes the
//! total allocation, `Σ w_i = B`. `ReturnCostInequality` instead bounds the
//! weighted mean, `Σ w_i a_i ≤ B`. The two are not equivalent and neither is
//! derived from the other; the equality form is the default.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::fmt_sig;
use crate::linalg::dot;
use crate::qp::{self, Bound, KktResiduals, ConstraintRef, LinearConstraint, QpError, QpProblem, SocConstraint, Solution, SolveOptions, Status};
use crate::scalar::Scalar;
use crate::stats::MomentEstimate;

/// Default number of frontier targets.
pub const DEFAULT_FRONTIER_POINTS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortfolioError {
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible: target return cannot be met{}", fmt_max(.max_achievable_return))]
    Infeasible { max_achievable_return: Option<f64> },
    #[error("solver stopped with status {status:?} after {iterations} iterations")]
    SolverFailed { status: Status, iterations: usize },
    #[error("no feasible frontier target{}", fmt_max(.max_achievable_return))]
    EmptyFrontier { max_achievable_return: Option<f64> },
    #[error(transparent)]
    Qp(#[from] QpError),
}

fn fmt_max(v: &Option<f64>) -> String {
    v.map(|m| format!(" (max achievable return {})", fmt_sig(m))).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    #[default]
    LongOnly,
    LongShort,
}

impl FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "long-only" | "long" => Ok(Self::LongOnly),
            "long-short" | "short" | "s" => Ok(Self::LongShort),
            other => Err(format!("unknown position mode '{other}' (expected long-only|long-short)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSemantics {
    /// `Σ w_i = B`
    #[default]
    AllocationEquality,
    /// `Σ w_i a_i ≤ B`
    ReturnCostInequality,
}

impl FromStr for BudgetSemantics {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "equality" | "allocation-equality" => Ok(Self::AllocationEquality),
            "return-cost" | "return-cost-inequality" => Ok(Self::ReturnCostInequality),
            other => Err(format!("unknown budget semantics '{other}' (expected equality|return-cost)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ProblemSpec<T> {
    pub budget: T,
    pub target_return: T,
    pub position_mode: PositionMode,
    /// Adds `E(a_p) − κ·σ_p ≥ 0`.
    pub limit_constraint: bool,
    pub kappa: T,
    pub budget_semantics: BudgetSemantics,
    /// Optional `|w_i| ≤ L` in long-short mode (`w_i ≤ L` in long-only mode).
    #[serde(default)]
    pub box_limit: Option<T>,
}

impl<T: Scalar> Default for ProblemSpec<T> {
    fn default() -> Self {
        Self {
            budget: T::one(),
            target_return: T::zero(),
            position_mode: PositionMode::LongOnly,
            limit_constraint: false,
            kappa: T::lit(3.0),
            budget_semantics: BudgetSemantics::AllocationEquality,
            box_limit: None,
        }
    }
}

impl<T: Scalar> ProblemSpec<T> {
    pub fn validate(&self) -> Result<(), PortfolioError> {
        if !(self.budget > T::zero()) || !self.budget.is_finite() {
            return Err(PortfolioError::InvalidSpec(format!("budget must be positive, got {}", self.budget)));
        }
        if !(self.kappa > T::zero()) || !self.kappa.is_finite() {
            return Err(PortfolioError::InvalidSpec(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !self.target_return.is_finite() {
            return Err(PortfolioError::InvalidSpec("target return must be finite".into()));
        }
        if let Some(l) = self.box_limit {
            if !(l > T::zero()) {
                return Err(PortfolioError::InvalidSpec(format!("box limit must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyWarning {
    /// Long-short with only the return-cost budget and no positive mean:
    /// the feasible set can be unbounded.
    UnboundedRisk,
}

/// Index of the returns constraint in [`QpProblem::ineq`] when present.
pub const RETURNS_CONSTRAINT: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled<T> {
    pub problem: QpProblem<T>,
    pub warnings: Vec<AssemblyWarning>,
}

/// Unit changes applied before solving: weights are expressed as fractions
/// of the budget, covariance divided by its largest diagonal entry and means
/// by their largest magnitude.
#[derive(Debug, Clone, Copy)]
struct Scaling<T> {
    budget: T,
    cov: T,
    mean: T,
}

impl<T: Scalar> Scaling<T> {
    fn identity() -> Self {
        Self {
            budget: T::one(),
            cov: T::one(),
            mean: T::one(),
        }
    }

    fn for_problem(m: &MomentEstimate<T>, spec: &ProblemSpec<T>) -> Self {
        let nonzero = |v: T| if v > T::zero() && v.is_finite() { v } else { T::one() };
        Self {
            budget: spec.budget,
            cov: nonzero(m.cov().max_diag()),
            mean: nonzero(m.mean().iter().fold(T::zero(), |acc, v| acc.max(v.abs()))),
        }
    }
}

fn build<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    target: Option<T>,
    sc: Scaling<T>,
) -> Assembled<T> {
    let n = m.dim();
    let sigma = m.cov().scaled(T::one() / sc.cov);
    let a: Vec<T> = m.mean().iter().map(|&v| v / sc.mean).collect();
    // Original weights are w = budget_scale · u.
    let ret_scale = sc.mean * sc.budget;
    let mut problem = QpProblem::new(sigma.scaled(T::lit(2.0)));
    if let Some(target) = target {
        problem.ineq.push(LinearConstraint::new(a.clone(), target / ret_scale));
    }
    match spec.budget_semantics {
        BudgetSemantics::AllocationEquality => {
            problem.eq.push(LinearConstraint::new(vec![T::one(); n], spec.budget / sc.budget));
        }
        BudgetSemantics::ReturnCostInequality => {
            problem.ineq.push(LinearConstraint::new(
                a.iter().map(|&v| -v).collect(),
                -spec.budget / ret_scale,
            ));
        }
    }
    let limit = spec.box_limit.map(|l| l / sc.budget);
    problem.bounds = match spec.position_mode {
        PositionMode::LongOnly => vec![
            Bound {
                lower: Some(T::zero()),
                upper: limit,
            };
            n
        ],
        PositionMode::LongShort => match limit {
            Some(l) => vec![Bound::boxed(-l, l); n],
            None => vec![Bound::free(); n],
        },
    };
    if spec.limit_constraint {
        problem.soc = Some(SocConstraint {
            kappa: spec.kappa * sc.cov.sqrt() / sc.mean,
            sigma,
            r: a,
        });
    }
    let mut warnings = Vec::new();
    if spec.budget_semantics == BudgetSemantics::ReturnCostInequality
        && spec.position_mode == PositionMode::LongShort
        && spec.box_limit.is_none()
        && m.mean().iter().all(|&v| v <= T::zero())
    {
        warnings.push(AssemblyWarning::UnboundedRisk);
    }
    Assembled { problem, warnings }
}

/// Builds the QP in the moments' own units: objective Hessian `2Σ`, the
/// returns constraint `aᵀw ≥ P(r)` at [`RETURNS_CONSTRAINT`], the budget,
/// position bounds and the optional limit cone `aᵀw − κ·sqrt(wᵀΣw) ≥ 0`.
pub fn assemble<T: Scalar>(m: &MomentEstimate<T>, spec: &ProblemSpec<T>) -> Result<Assembled<T>, PortfolioError> {
    spec.validate()?;
    Ok(build(m, spec, Some(spec.target_return), Scaling::identity()))
}

/// Solved weights with recomputed portfolio statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct Allocation<T> {
    pub symbols: Vec<String>,
    pub weights: Vec<T>,
    /// `Σ w_i a_i`.
    pub expected_return: T,
    /// `sqrt(wᵀΣw)`.
    pub volatility: T,
    /// Solver output mapped back to the assembled problem's units: `x` is
    /// the weight vector, duals are rescaled and `kkt` is recomputed there.
    pub solution_meta: Solution<T>,
    /// Residuals the solver certified, measured on its unit-normalized copy
    /// of the problem (weights as budget fractions, covariance divided by
    /// its largest diagonal, means by their largest magnitude).
    pub solver_kkt: KktResiduals<T>,
}

fn allocation_from<T: Scalar>(
    m: &MomentEstimate<T>,
    weights: Vec<T>,
    meta: Solution<T>,
    solver_kkt: KktResiduals<T>,
) -> Allocation<T> {
    Allocation {
        symbols: m.symbols().to_vec(),
        expected_return: dot(&weights, m.mean()),
        volatility: m.cov().quad_form(&weights).max(T::zero()).sqrt(),
        weights,
        solution_meta: meta,
        solver_kkt,
    }
}

/// Maps a solution of the normalized problem onto the original one. With
/// `w = B·u` the Lagrangian scales by `B²·s_cov`; each constraint value
/// scales by `B` (budget, bounds) or `B·s_a` (returns, return-cost, cone).
fn unscale<T: Scalar>(sol: Solution<T>, sc: &Scaling<T>, original: &QpProblem<T>) -> Solution<T> {
    let lag = sc.budget * sc.budget * sc.cov;
    let per_budget = lag / sc.budget;
    let per_return = lag / (sc.budget * sc.mean);
    let x: Vec<T> = sol.x.iter().map(|&u| u * sc.budget).collect();
    let d = sol.duals;
    let duals = qp::Duals {
        eq: d.eq.iter().map(|&v| v * per_budget).collect(),
        ineq: d.ineq.iter().map(|&v| v * per_return).collect(),
        lower: d.lower.iter().map(|&v| v * per_budget).collect(),
        upper: d.upper.iter().map(|&v| v * per_budget).collect(),
        soc: d.soc * per_return,
    };
    Solution {
        kkt: qp::check_kkt(original, &x, &duals),
        objective: original.objective(&x),
        x,
        duals,
        ..sol
    }
}

fn max_achievable<T: Scalar>(sol: &Solution<T>, sc: &Scaling<T>, has_target: bool) -> Option<f64> {
    if !has_target {
        return None;
    }
    sol.infeasibility
        .as_ref()
        .and_then(|r| r.max_achievable(ConstraintRef::Ineq(RETURNS_CONSTRAINT)))
        .map(|v| (v * sc.mean * sc.budget).to_f64_lossy())
}

fn single_asset<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    target: Option<T>,
    opts: &SolveOptions<T>,
) -> Result<Allocation<T>, PortfolioError> {
    let w = spec.budget;
    let a = m.mean()[0];
    let var = m.cov()[(0, 0)];
    let ret = a * w;
    let slack = opts.tol * (T::one() + ret.abs());
    if let Some(t) = target {
        if ret < t - slack {
            return Err(PortfolioError::Infeasible {
                max_achievable_return: Some(ret.to_f64_lossy()),
            });
        }
    }
    let vol = (var.max(T::zero())).sqrt() * w.abs();
    let over_box = spec.box_limit.is_some_and(|l| w > l);
    if over_box || (spec.limit_constraint && ret - spec.kappa * vol < -slack) {
        return Err(PortfolioError::Infeasible { max_achievable_return: None });
    }
    // Only the budget binds; its multiplier absorbs the gradient 2σ²w.
    let problem = build(m, spec, target, Scaling::identity()).problem;
    let mut duals = qp::Duals::zeros(&problem);
    duals.eq[0] = T::lit(2.0) * var * w;
    let kkt = qp::check_kkt(&problem, &[w], &duals);
    let meta = Solution {
        x: vec![w],
        objective: var * w * w,
        status: Status::Optimal,
        kkt,
        iterations: 0,
        duals,
        infeasibility: None,
    };
    Ok(allocation_from(m, vec![w], meta, kkt))
}

/// With all means equal and an equality budget, every feasible portfolio
/// returns `a·B`; the returns row is then a multiple of the budget row.
fn implied_return<T: Scalar>(m: &MomentEstimate<T>, spec: &ProblemSpec<T>) -> Option<T> {
    if spec.budget_semantics != BudgetSemantics::AllocationEquality {
        return None;
    }
    let a = m.mean();
    let lo = a.iter().copied().fold(T::infinity(), T::min);
    let hi = a.iter().copied().fold(T::neg_infinity(), T::max);
    let scale = lo.abs().max(hi.abs());
    (hi - lo <= T::lit(100.0) * T::epsilon() * scale).then(|| a[0] * spec.budget)
}

fn optimize_target<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    target: Option<T>,
    opts: &SolveOptions<T>,
) -> Result<Allocation<T>, PortfolioError> {
    spec.validate()?;
    if m.dim() == 0 {
        return Err(PortfolioError::InvalidSpec("no assets".into()));
    }
    if m.dim() == 1 && spec.budget_semantics == BudgetSemantics::AllocationEquality {
        return single_asset(m, spec, target, opts);
    }
    let implied = implied_return(m, spec);
    let solved_target = match (target, implied) {
        (Some(t), Some(r)) => {
            if r < t - opts.tol * (T::one() + r.abs()) {
                return Err(PortfolioError::Infeasible {
                    max_achievable_return: Some(r.to_f64_lossy()),
                });
            }
            None
        }
        (t, _) => t,
    };
    let sc = Scaling::for_problem(m, spec);
    let assembled = build(m, spec, solved_target, sc);
    let mut sol = qp::solve(&assembled.problem, opts)?;
    if target.is_some() && solved_target.is_none() {
        sol.duals.ineq.insert(RETURNS_CONSTRAINT, T::zero());
    }
    match sol.status {
        Status::Optimal => {
            let solver_kkt = sol.kkt;
            let original = build(m, spec, target, Scaling::identity()).problem;
            let meta = unscale(sol, &sc, &original);
            Ok(allocation_from(m, meta.x.clone(), meta, solver_kkt))
        }
        Status::Infeasible => Err(PortfolioError::Infeasible {
            max_achievable_return: max_achievable(&sol, &sc, target.is_some()),
        }),
        status => Err(PortfolioError::SolverFailed {
            status,
            iterations: sol.iterations,
        }),
    }
}

/// Minimum-variance allocation meeting `spec.target_return`.
pub fn optimize<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    opts: &SolveOptions<T>,
) -> Result<Allocation<T>, PortfolioError> {
    optimize_target(m, spec, Some(spec.target_return), opts)
}

/// Global minimum-variance allocation: the problem's constraints without the
/// returns constraint.
pub fn global_min_variance<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    opts: &SolveOptions<T>,
) -> Result<Allocation<T>, PortfolioError> {
    optimize_target(m, spec, None, opts)
}

/// `count` evenly spaced targets from the global-minimum-variance return up
/// to the largest attainable mean (`B·max a_i` for the equality budget, `B`
/// for the return-cost budget).
pub fn default_targets<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    count: usize,
    opts: &SolveOptions<T>,
) -> Result<Vec<T>, PortfolioError> {
    let lo = global_min_variance(m, spec, opts)?.expected_return;
    let hi = match spec.budget_semantics {
        BudgetSemantics::AllocationEquality => {
            spec.budget * m.mean().iter().copied().fold(T::neg_infinity(), T::max)
        }
        BudgetSemantics::ReturnCostInequality => spec.budget,
    };
    let hi = hi.max(lo);
    Ok(match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / T::from_usize_lossy(count - 1);
            (0..count)
                .map(|i| if i + 1 == count { hi } else { lo + step * T::from_usize_lossy(i) })
                .collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct FrontierPoint<T> {
    pub target: T,
    pub achieved_return: T,
    pub volatility: T,
    pub allocation: Allocation<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct SkippedTarget<T> {
    pub target: T,
    pub status: Status,
    pub max_achievable_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct FrontierCurve<T> {
    pub points: Vec<FrontierPoint<T>>,
    pub skipped: Vec<SkippedTarget<T>>,
    pub spec: ProblemSpec<T>,
}

/// Solves one cold-started problem per target (in parallel) and keeps the
/// feasible ones in target order.
pub fn frontier<T: Scalar>(
    m: &MomentEstimate<T>,
    spec: &ProblemSpec<T>,
    targets: &[T],
    opts: &SolveOptions<T>,
) -> Result<FrontierCurve<T>, PortfolioError> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(PortfolioError::InvalidSpec("frontier needs at least one target".into()));
    }
    if targets.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(PortfolioError::InvalidSpec("frontier targets must be sorted ascending".into()));
    }
    let results: Vec<(T, Result<Allocation<T>, PortfolioError>)> = targets
        .par_iter()
        .map(|&t| {
            let s = ProblemSpec {
                target_return: t,
                ..*spec
            };
            (t, optimize(m, &s, opts))
        })
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let mut best_max: Option<f64> = None;
    for (target, r) in results {
        match r {
            Ok(allocation) => points.push(FrontierPoint {
                target,
                achieved_return: allocation.expected_return,
                volatility: allocation.volatility,
                allocation,
            }),
            Err(PortfolioError::Infeasible { max_achievable_return }) => {
                if let Some(v) = max_achievable_return {
                    best_max = Some(best_max.map_or(v, |b| b.max(v)));
                }
                skipped.push(SkippedTarget {
                    target,
                    status: Status::Infeasible,
                    max_achievable_return,
                });
            }
            Err(PortfolioError::SolverFailed { status, .. }) => skipped.push(SkippedTarget {
                target,
                status,
                max_achievable_return: None,
            }),
            Err(e) => return Err(e),
        }
    }
    if points.is_empty() {
        return Err(PortfolioError::EmptyFrontier {
            max_achievable_return: best_max,
        });
    }
    Ok(FrontierCurve {
        points,
        skipped,
        spec: *spec,
    })
}
