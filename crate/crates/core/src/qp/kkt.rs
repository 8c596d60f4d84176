use super::ipm::Program;
use super::{Duals, KktResiduals, QpProblem};
use crate::scalar::Scalar;

/// KKT residuals of `x` with multipliers `duals`:
///
/// - stationarity: `‖Qx − Σλ_e a_e − Σμ_k a_k − μ_lower + μ_upper − μ_soc ∇g_soc‖∞`
/// - primal feasibility: largest equality, inequality, bound or cone violation
/// - complementarity: `max |μ_k g_k(x)|` over inequalities, bounds and the cone
pub fn check_kkt<T: Scalar>(p: &QpProblem<T>, x: &[T], duals: &Duals<T>) -> KktResiduals<T> {
    let prog = Program::from_problem(p);
    let z = prog.flatten_duals(duals);
    prog.residuals(x, &duals.eq, &z)
}
