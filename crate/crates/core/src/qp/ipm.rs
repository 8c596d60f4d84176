//! Primal-dual interior-point iteration (Mehrotra predictor-corrector) and the
//! phase-one / best-attainable-value subproblems used for infeasibility
//! diagnosis.

use super::{
    ConstraintRef, Duals, InfeasibilityReport, KktResiduals, QpProblem, SocConstraint, Solution, SolveOptions,
    Status, ViolatedConstraint, INFEASIBILITY_THRESHOLD,
};
use crate::linalg::{dot, norm_inf, Lu, Matrix};
use crate::scalar::Scalar;

/// Internal form: `min ½xᵀHx + cᵀx` with the constraint families split out.
#[derive(Debug, Clone)]
pub(crate) struct Program<T> {
    n: usize,
    h: Matrix<T>,
    c: Vec<T>,
    eq: Vec<(Vec<T>, T)>,
    /// `a·x ≥ b`
    lin: Vec<(Vec<T>, T)>,
    lower: Vec<(usize, T)>,
    upper: Vec<(usize, T)>,
    soc: Option<SocConstraint<T>>,
}

impl<T: Scalar> Program<T> {
    pub(crate) fn from_problem(p: &QpProblem<T>) -> Self {
        let n = p.dim();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for i in 0..n {
            let b = p.bound(i);
            if let Some(l) = b.lower {
                lower.push((i, l));
            }
            if let Some(u) = b.upper {
                upper.push((i, u));
            }
        }
        Self {
            n,
            h: p.q.clone(),
            c: vec![T::zero(); n],
            eq: p.eq.iter().map(|e| (e.coeffs.clone(), e.rhs)).collect(),
            lin: p.ineq.iter().map(|e| (e.coeffs.clone(), e.rhs)).collect(),
            lower,
            upper,
            soc: p.soc.clone(),
        }
    }

    fn m(&self) -> usize {
        self.lin.len() + self.lower.len() + self.upper.len() + usize::from(self.soc.is_some())
    }

    pub(crate) fn flatten_duals(&self, d: &Duals<T>) -> Vec<T> {
        let mut z = Vec::with_capacity(self.m());
        z.extend(self.lin.iter().enumerate().map(|(k, _)| d.ineq.get(k).copied().unwrap_or_else(T::zero)));
        z.extend(self.lower.iter().map(|&(i, _)| d.lower.get(i).copied().unwrap_or_else(T::zero)));
        z.extend(self.upper.iter().map(|&(i, _)| d.upper.get(i).copied().unwrap_or_else(T::zero)));
        if self.soc.is_some() {
            z.push(d.soc);
        }
        z
    }

    fn unflatten_duals(&self, lambda: &[T], z: &[T]) -> Duals<T> {
        let mut d = Duals {
            eq: lambda.to_vec(),
            ineq: vec![T::zero(); self.lin.len()],
            lower: vec![T::zero(); self.n],
            upper: vec![T::zero(); self.n],
            soc: T::zero(),
        };
        let mut k = 0;
        for v in d.ineq.iter_mut() {
            *v = z[k];
            k += 1;
        }
        for &(i, _) in &self.lower {
            d.lower[i] = z[k];
            k += 1;
        }
        for &(i, _) in &self.upper {
            d.upper[i] = z[k];
            k += 1;
        }
        if self.soc.is_some() {
            d.soc = z[k];
        }
        d
    }

    /// Inequality values `g_k(x)`, feasible when nonnegative.
    fn values(&self, x: &[T]) -> Vec<T> {
        let mut g = Vec::with_capacity(self.m());
        g.extend(self.lin.iter().map(|(a, b)| dot(a, x) - *b));
        g.extend(self.lower.iter().map(|&(i, l)| x[i] - l));
        g.extend(self.upper.iter().map(|&(i, u)| u - x[i]));
        if let Some(soc) = &self.soc {
            g.push(soc.value(x));
        }
        g
    }

    /// `J v` where row k of J is `∇g_k`.
    fn jac_vec(&self, soc_grad: Option<&[T]>, v: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.m());
        out.extend(self.lin.iter().map(|(a, _)| dot(a, v)));
        out.extend(self.lower.iter().map(|&(i, _)| v[i]));
        out.extend(self.upper.iter().map(|&(i, _)| -v[i]));
        if let Some(gs) = soc_grad {
            out.push(dot(gs, v));
        }
        out
    }

    /// `out += Jᵀ w`.
    fn jac_t_add(&self, soc_grad: Option<&[T]>, w: &[T], out: &mut [T]) {
        let mut k = 0;
        for (a, _) in &self.lin {
            let wk = w[k];
            if wk != T::zero() {
                for (o, &aj) in out.iter_mut().zip(a) {
                    *o += wk * aj;
                }
            }
            k += 1;
        }
        for &(i, _) in &self.lower {
            out[i] += w[k];
            k += 1;
        }
        for &(i, _) in &self.upper {
            out[i] -= w[k];
            k += 1;
        }
        if let Some(gs) = soc_grad {
            let wk = w[k];
            for (o, &g) in out.iter_mut().zip(gs) {
                *o += wk * g;
            }
        }
    }

    fn soc_grad(&self, x: &[T]) -> Option<Vec<T>> {
        self.soc.as_ref().map(|s| s.gradient(x))
    }

    /// `Hx + c − Eᵀλ − Jᵀz`.
    fn stationarity(&self, x: &[T], lambda: &[T], z: &[T], soc_grad: Option<&[T]>) -> Vec<T> {
        let mut r = self.h.mul_vec(x);
        for (ri, &ci) in r.iter_mut().zip(&self.c) {
            *ri += ci;
        }
        for ((a, _), &l) in self.eq.iter().zip(lambda) {
            for (ri, &aj) in r.iter_mut().zip(a) {
                *ri -= l * aj;
            }
        }
        let neg_z: Vec<T> = z.iter().map(|&v| -v).collect();
        self.jac_t_add(soc_grad, &neg_z, &mut r);
        r
    }

    fn eq_residual(&self, x: &[T]) -> Vec<T> {
        self.eq.iter().map(|(a, b)| dot(a, x) - *b).collect()
    }

    pub(crate) fn residuals(&self, x: &[T], lambda: &[T], z: &[T]) -> KktResiduals<T> {
        let soc_grad = self.soc_grad(x);
        let st = self.stationarity(x, lambda, z, soc_grad.as_deref());
        let g = self.values(x);
        let feas = g
            .iter()
            .fold(norm_inf(&self.eq_residual(x)), |m, &v| m.max(-v));
        let comp = g.iter().zip(z).fold(T::zero(), |m, (&gv, &zv)| m.max((gv * zv).abs()));
        KktResiduals {
            stationarity: norm_inf(&st),
            primal_feasibility: feas.max(T::zero()),
            complementarity: comp,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Iterate<T> {
    x: Vec<T>,
    lambda: Vec<T>,
    z: Vec<T>,
    status: Status,
    iterations: usize,
}

/// Largest `α` keeping `v + α dv` nonnegative.
fn max_step<T: Scalar>(v: &[T], dv: &[T]) -> T {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < T::zero())
        .fold(T::infinity(), |a, (&vi, &di)| a.min(-vi / di))
}

struct Direction<T> {
    dx: Vec<T>,
    dl: Vec<T>,
    ds: Vec<T>,
    dz: Vec<T>,
}

/// Runs the interior-point iteration on `prog` from `x0`.
fn run<T: Scalar>(prog: &Program<T>, x0: &[T], opts: &SolveOptions<T>) -> Iterate<T> {
    run_until(prog, x0, opts, &|_| false)
}

/// As [`run`], but also stops (as `Optimal`) once `stop(x)` holds.
fn run_until<T: Scalar>(prog: &Program<T>, x0: &[T], opts: &SolveOptions<T>, stop: &dyn Fn(&[T]) -> bool) -> Iterate<T> {
    let n = prog.n;
    let p = prog.eq.len();
    let m = prog.m();
    let zero = T::zero();
    let one = T::one();
    let mut x = x0.to_vec();
    let mut lambda = vec![zero; p];
    let s_floor = T::lit(1e-2);
    let mut s: Vec<T> = prog.values(&x).into_iter().map(|g| g.max(s_floor)).collect();
    let mut z: Vec<T> = s.iter().map(|&si| opts.barrier_mu0 / si).collect();
    let m_s = T::from_usize_lossy(m.max(1));
    let h_scale = T::one().max(prog.h.max_abs());
    let reg_x = T::lit(1e-11).max(T::lit(10.0) * T::epsilon()) * h_scale;
    let reg_eq = T::lit(1e-12);
    let blowup = T::lit(1e12);

    let done = |x: Vec<T>, lambda: Vec<T>, z: Vec<T>, status, iterations| Iterate {
        x,
        lambda,
        z,
        status,
        iterations,
    };

    // Starting ratio ν/‖r‖, used as a floor.
    let mut start_ratio: Option<T> = None;

    for it in 0..=opts.max_iter {
        let res = prog.residuals(&x, &lambda, &z);
        if !res.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return done(x, lambda, z, Status::NumericFailure, it);
        }
        if res.max() <= opts.tol || stop(&x) {
            return done(x, lambda, z, Status::Optimal, it);
        }
        if it == opts.max_iter
            || norm_inf(&x) > blowup
            || norm_inf(&z) > blowup * blowup
            || norm_inf(&lambda) > blowup * blowup
        {
            return done(x, lambda, z, Status::MaxIterations, it);
        }

        let soc_grad = prog.soc_grad(&x);
        let g = prog.values(&x);
        let r_d = prog.stationarity(&x, &lambda, &z, soc_grad.as_deref());
        let r_p = prog.eq_residual(&x);
        let r_g: Vec<T> = g.iter().zip(&s).map(|(&gk, &sk)| gk - sk).collect();
        let d: Vec<T> = z.iter().zip(&s).map(|(&zk, &sk)| zk / sk).collect();

        // Reduced Newton matrix [[W, −Eᵀ], [E, −δI]].
        let dim = n + p;
        let mut k = Matrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = prog.h[(i, j)];
            }
        }
        let mut idx = 0;
        for (a, _) in &prog.lin {
            let dk = d[idx];
            for i in 0..n {
                let ai = a[i] * dk;
                if ai == zero {
                    continue;
                }
                for j in 0..n {
                    k[(i, j)] += ai * a[j];
                }
            }
            idx += 1;
        }
        for &(i, _) in prog.lower.iter().chain(&prog.upper) {
            k[(i, i)] += d[idx];
            idx += 1;
        }
        if let (Some(soc), Some(gs)) = (&prog.soc, &soc_grad) {
            let ds_k = d[idx];
            let zs = z[idx];
            let (phi, sx) = soc.root(&x);
            let c1 = zs * soc.kappa / phi;
            let c3 = zs * soc.kappa / (phi * phi * phi);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] += ds_k * gs[i] * gs[j] + c1 * soc.sigma[(i, j)] - c3 * sx[i] * sx[j];
                }
            }
        }
        for (e, (a, _)) in prog.eq.iter().enumerate() {
            for j in 0..n {
                k[(n + e, j)] = a[j];
                k[(j, n + e)] = -a[j];
            }
        }
        let mut reg = vec![reg_x; n];
        reg.extend(std::iter::repeat_n(-reg_eq, p));
        let mut lu = None;
        for attempt in 0..4 {
            let mut kr = k.clone();
            let bump = T::lit(100f64.powi(attempt));
            for (i, &r) in reg.iter().enumerate() {
                kr[(i, i)] += r * bump;
            }
            if let Ok(f) = Lu::factor(kr) {
                lu = Some(f);
                break;
            }
        }
        let Some(lu) = lu else {
            return done(x, lambda, z, Status::NumericFailure, it);
        };

        let direction = |rc: &[T]| -> Direction<T> {
            let w: Vec<T> = (0..m).map(|i| rc[i] / s[i] - d[i] * r_g[i]).collect();
            let mut rhs: Vec<T> = r_d.iter().map(|&v| -v).collect();
            prog.jac_t_add(soc_grad.as_deref(), &w, &mut rhs);
            rhs.extend(r_p.iter().map(|&v| -v));
            let mut y = lu.solve(&rhs);
            // One refinement step against the unregularized matrix.
            let ky = k.mul_vec(&y);
            let resid: Vec<T> = rhs.iter().zip(&ky).map(|(&b, &v)| b - v).collect();
            let corr = lu.solve(&resid);
            if corr.iter().all(|v| v.is_finite()) {
                for (yi, ci) in y.iter_mut().zip(corr) {
                    *yi += ci;
                }
            }
            let dx = y[..n].to_vec();
            let dl = y[n..].to_vec();
            let ds: Vec<T> = prog
                .jac_vec(soc_grad.as_deref(), &dx)
                .into_iter()
                .zip(&r_g)
                .map(|(jd, &rg)| jd + rg)
                .collect();
            let dz: Vec<T> = (0..m).map(|i| (rc[i] - z[i] * ds[i]) / s[i]).collect();
            Direction { dx, dl, ds, dz }
        };

        let (dir, alpha) = if m == 0 {
            (direction(&[]), one)
        } else {
            let nu = dot(&s, &z) / m_s;
            let rc_aff: Vec<T> = s.iter().zip(&z).map(|(&a, &b)| -a * b).collect();
            let aff = direction(&rc_aff);
            let a_aff = one.min(max_step(&s, &aff.ds)).min(max_step(&z, &aff.dz));
            let nu_aff = (0..m)
                .map(|i| (s[i] + a_aff * aff.ds[i]) * (z[i] + a_aff * aff.dz[i]))
                .sum::<T>()
                / m_s;
            let sigma = (nu_aff / nu).powi(3).min(one).max(zero);
            let rc: Vec<T> = (0..m)
                .map(|i| -s[i] * z[i] + sigma * nu - aff.ds[i] * aff.dz[i])
                .collect();
            let tau = T::lit(0.995).max(one - nu);
            let infeas = norm_inf(&r_d).max(norm_inf(&r_p)).max(norm_inf(&r_g));
            let ratio = *start_ratio.get_or_insert(if infeas > zero { nu / infeas } else { zero });
            let floor = T::lit(1e-4) * ratio * infeas;
            // Backtrack to sufficient decrease in ν; on a hard cut, retry
            // without the correction at a larger σ.
            let safeguarded = |dir: &Direction<T>, sigma: T| -> (T, bool) {
                let alpha_max = one.min(tau * max_step(&s, &dir.ds).min(max_step(&z, &dir.dz)));
                let nu_at = |a: T| (0..m).map(|i| (s[i] + a * dir.ds[i]) * (z[i] + a * dir.dz[i])).sum::<T>() / m_s;
                let decrease = T::lit(0.01) * (one - sigma);
                let mut alpha = alpha_max;
                while nu_at(alpha) > (one - decrease * alpha) * nu || nu_at(alpha) < (one - alpha) * floor {
                    if !(alpha > T::lit(1e-4) * alpha_max) {
                        return (alpha_max, false);
                    }
                    alpha *= T::lit(0.5);
                }
                (alpha, alpha >= T::lit(0.1) * alpha_max)
            };
            let dir = direction(&rc);
            let (alpha, ok) = safeguarded(&dir, sigma);
            let (mut dir, mut alpha) = (dir, alpha);
            if !ok {
                for c in [0.1, 0.5, 0.9] {
                    let sigma = sigma.max(T::lit(c));
                    let rc: Vec<T> = (0..m).map(|i| -s[i] * z[i] + sigma * nu).collect();
                    let plain = direction(&rc);
                    let (a, ok) = safeguarded(&plain, sigma);
                    (dir, alpha) = (plain, a);
                    if ok {
                        break;
                    }
                }
            }
            (dir, alpha)
        };

        let finite = [&dir.dx, &dir.dl, &dir.ds, &dir.dz].iter().all(|v| v.iter().all(|d| d.is_finite()));
        if !finite || !alpha.is_finite() {
            return done(x, lambda, z, Status::NumericFailure, it);
        }
        for (xi, di) in x.iter_mut().zip(&dir.dx) {
            *xi += alpha * *di;
        }
        for (li, di) in lambda.iter_mut().zip(&dir.dl) {
            *li += alpha * *di;
        }
        for (si, di) in s.iter_mut().zip(&dir.ds) {
            *si = (*si + alpha * *di).max(T::min_positive_value());
        }
        for (zi, di) in z.iter_mut().zip(&dir.dz) {
            *zi = (*zi + alpha * *di).max(T::min_positive_value());
        }
    }
    unreachable!("loop returns at max_iter")
}

/// `B/n` when the problem is a nonnegative budget simplex with `B > 0`.
fn simplex_center<T: Scalar>(p: &QpProblem<T>) -> Option<Vec<T>> {
    let n = p.dim();
    if n == 0 || p.bounds.len() != n {
        return None;
    }
    let budget = p
        .eq
        .iter()
        .find(|e| e.coeffs.iter().all(|&c| c == T::one()) && e.rhs > T::zero())?
        .rhs;
    let center = budget / T::from_usize_lossy(n);
    let ok = p
        .bounds
        .iter()
        .all(|b| b.lower == Some(T::zero()) && b.upper.is_none_or(|u| u > center));
    ok.then(|| vec![center; n])
}

fn neutral_start<T: Scalar>(p: &QpProblem<T>) -> Vec<T> {
    let half = T::lit(0.5);
    (0..p.dim())
        .map(|i| match (p.bound(i).lower, p.bound(i).upper) {
            (Some(l), Some(u)) => (l + u) * half,
            (Some(l), None) => l + T::one(),
            (None, Some(u)) => u - T::one(),
            (None, None) => T::zero(),
        })
        .collect()
}

/// Largest violation of any constraint of `p` at `x`.
fn max_violation<T: Scalar>(p: &QpProblem<T>, x: &[T]) -> T {
    let prog = Program::from_problem(p);
    let g = prog.values(x);
    g.iter()
        .fold(norm_inf(&prog.eq_residual(x)), |m, &v| m.max(-v))
        .max(T::zero())
}

struct PhaseOne<T> {
    x: Vec<T>,
    violation: T,
    iterations: usize,
}

/// Proximal weight keeping the phase-one and best-value subproblems strictly
/// convex in directions no constraint pins down.
const PROX_WEIGHT: f64 = 1e-9;

/// `min t` subject to the hard constraints (equalities, bounds) and every
/// inequality / cone constraint relaxed by `t`, with `t ≥ −1`.
fn phase_one<T: Scalar>(p: &QpProblem<T>, opts: &SolveOptions<T>) -> PhaseOne<T> {
    let n = p.dim();
    let x_start = simplex_center(p).unwrap_or_else(|| neutral_start(p));
    let base = Program::from_problem(p);
    let t0 = base.values(&x_start).into_iter().fold(T::zero(), |m, v| m.max(-v)) + T::one();
    let rho = T::lit(PROX_WEIGHT);

    let pad = |a: &[T], last: T| {
        let mut v = a.to_vec();
        v.push(last);
        v
    };
    let mut h = Matrix::zeros(n + 1, n + 1);
    let mut c = vec![T::zero(); n + 1];
    for i in 0..n {
        h[(i, i)] = rho;
        c[i] = -rho * x_start[i];
    }
    c[n] = T::one();
    let mut lower = base.lower.clone();
    lower.push((n, -T::one()));
    let soc = p.soc.as_ref().map(|s| SocConstraint {
        kappa: s.kappa,
        sigma: Matrix::from_fn(n + 1, n + 1, |i, j| if i < n && j < n { s.sigma[(i, j)] } else { T::zero() }),
        r: pad(&s.r, T::one()),
    });
    let prog = Program {
        n: n + 1,
        h,
        c,
        eq: base.eq.iter().map(|(a, b)| (pad(a, T::zero()), *b)).collect(),
        lin: base.lin.iter().map(|(a, b)| (pad(a, T::one()), *b)).collect(),
        lower,
        upper: base.upper.clone(),
        soc,
    };
    // Any point meeting the original constraints will do as a start.
    let feasible = |y: &[T]| y[n] < T::zero() && max_violation(p, &y[..n]) <= opts.tol;
    let it = run_until(&prog, &pad(&x_start, t0), opts, &feasible);
    let x = it.x[..n].to_vec();
    PhaseOne {
        violation: max_violation(p, &x),
        x,
        iterations: it.iterations,
    }
}

/// Maximizes `p.ineq[k]·x` subject to the equalities, bounds and the
/// constraints satisfied at `from`.
fn best_attainable<T: Scalar>(p: &QpProblem<T>, k: usize, from: &[T], opts: &SolveOptions<T>) -> Option<T> {
    let n = p.dim();
    let thr = T::lit(INFEASIBILITY_THRESHOLD);
    let base = Program::from_problem(p);
    let rho = T::lit(PROX_WEIGHT);
    let target = &p.ineq[k].coeffs;
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = rho;
    }
    let c: Vec<T> = (0..n).map(|i| -target[i] - rho * from[i]).collect();
    let lin = p
        .ineq
        .iter()
        .enumerate()
        .filter(|&(j, e)| j != k && e.value(from) - e.rhs >= -thr)
        .map(|(_, e)| (e.coeffs.clone(), e.rhs))
        .collect();
    let soc = p.soc.clone().filter(|s| s.value(from) >= -thr);
    let prog = Program {
        n,
        h,
        c,
        eq: base.eq,
        lin,
        lower: base.lower,
        upper: base.upper,
        soc,
    };
    let it = run(&prog, from, opts);
    (it.status == Status::Optimal).then(|| dot(target, &it.x))
}

fn infeasible_solution<T: Scalar>(p: &QpProblem<T>, opts: &SolveOptions<T>, ph: PhaseOne<T>) -> Solution<T> {
    let thr = T::lit(INFEASIBILITY_THRESHOLD);
    let mut violated = Vec::new();
    for (k, e) in p.ineq.iter().enumerate() {
        let value = e.value(&ph.x) - e.rhs;
        if value < -thr {
            violated.push(ViolatedConstraint {
                constraint: ConstraintRef::Ineq(k),
                value,
                max_achievable: None,
            });
        }
    }
    if let Some(soc) = &p.soc {
        let value = soc.value(&ph.x);
        if value < -thr {
            violated.push(ViolatedConstraint {
                constraint: ConstraintRef::Soc,
                value,
                max_achievable: None,
            });
        }
    }
    // Maximum reported only for a sole violated linear row.
    if let [only] = violated.as_mut_slice() {
        if let ConstraintRef::Ineq(k) = only.constraint {
            only.max_achievable = best_attainable(p, k, &ph.x, opts);
        }
    }
    let duals = Duals::zeros(p);
    Solution {
        objective: p.objective(&ph.x),
        kkt: super::check_kkt(p, &ph.x, &duals),
        status: Status::Infeasible,
        iterations: ph.iterations,
        duals,
        infeasibility: Some(InfeasibilityReport {
            violation: ph.violation,
            violated,
        }),
        x: ph.x,
    }
}

/// Re-solves the equality-constrained problem on the active set the
/// interior point settled on (constraints whose multiplier exceeds their
/// slack). Returns `None` when the cone is active, the system is singular,
/// or the polished point is not a better KKT point.
fn polish<T: Scalar>(prog: &Program<T>, it: &Iterate<T>) -> Option<Iterate<T>> {
    let n = prog.n;
    let p = prog.eq.len();
    let g = prog.values(&it.x);
    let m = g.len();
    if prog.soc.is_some() && it.z[m - 1] > g[m - 1] {
        return None;
    }
    // Gradient rows and right-hand sides of every linear inequality, in the
    // same order as `values`.
    let mut rows: Vec<(Vec<T>, T)> = prog.lin.clone();
    for &(i, l) in &prog.lower {
        let mut a = vec![T::zero(); n];
        a[i] = T::one();
        rows.push((a, l));
    }
    for &(i, u) in &prog.upper {
        let mut a = vec![T::zero(); n];
        a[i] = -T::one();
        rows.push((a, -u));
    }
    let active: Vec<usize> = (0..rows.len()).filter(|&k| it.z[k] > g[k]).collect();
    let dim = n + p + active.len();
    let mut k = Matrix::zeros(dim, dim);
    let mut rhs = vec![T::zero(); dim];
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = prog.h[(i, j)];
        }
        rhs[i] = -prog.c[i];
    }
    let constraint_rows = prog.eq.iter().chain(active.iter().map(|&a| &rows[a]));
    for (r, (a, b)) in constraint_rows.enumerate() {
        for j in 0..n {
            k[(n + r, j)] = a[j];
            k[(j, n + r)] = -a[j];
        }
        rhs[n + r] = *b;
    }
    let lu = Lu::factor(k.clone()).ok()?;
    let mut y = lu.solve(&rhs);
    let ky = k.mul_vec(&y);
    let resid: Vec<T> = rhs.iter().zip(&ky).map(|(&b, &v)| b - v).collect();
    for (yi, ci) in y.iter_mut().zip(lu.solve(&resid)) {
        *yi += ci;
    }
    if y.iter().any(|v| !v.is_finite()) || y[n + p..].iter().any(|&mu| mu < T::zero()) {
        return None;
    }
    let mut z = vec![T::zero(); m];
    for (slot, &a) in active.iter().enumerate() {
        z[a] = y[n + p + slot];
    }
    let polished = Iterate {
        x: y[..n].to_vec(),
        lambda: y[n..n + p].to_vec(),
        z,
        status: Status::Optimal,
        iterations: it.iterations,
    };
    let before = prog.residuals(&it.x, &it.lambda, &it.z).max();
    let after = prog.residuals(&polished.x, &polished.lambda, &polished.z).max();
    (after <= before).then_some(polished)
}

fn finish<T: Scalar>(p: &QpProblem<T>, prog: &Program<T>, it: Iterate<T>, extra_iterations: usize) -> Solution<T> {
    let it = match it.status {
        Status::Optimal => polish(prog, &it).unwrap_or(it),
        _ => it,
    };
    let duals = prog.unflatten_duals(&it.lambda, &it.z);
    Solution {
        objective: p.objective(&it.x),
        kkt: prog.residuals(&it.x, &it.lambda, &it.z),
        status: it.status,
        iterations: it.iterations + extra_iterations,
        duals,
        infeasibility: None,
        x: it.x,
    }
}

pub(super) fn solve_validated<T: Scalar>(p: &QpProblem<T>, opts: &SolveOptions<T>) -> Solution<T> {
    let prog = Program::from_problem(p);
    let thr = T::lit(INFEASIBILITY_THRESHOLD);
    let simplex = simplex_center(p);
    let soft = !p.ineq.is_empty() || p.soc.is_some();

    let mut phase: Option<PhaseOne<T>> = None;
    let start = match &simplex {
        Some(x) => x.clone(),
        None if soft => {
            let ph = phase_one(p, opts);
            if ph.violation > thr {
                return infeasible_solution(p, opts, ph);
            }
            let x = ph.x.clone();
            phase = Some(ph);
            x
        }
        None => neutral_start(p),
    };
    let first = run(&prog, &start, opts);
    if first.status == Status::Optimal {
        let extra = phase.as_ref().map_or(0, |ph| ph.iterations);
        return finish(p, &prog, first, extra);
    }

    let retried = phase.is_none();
    let ph = match phase {
        Some(ph) => ph,
        None => phase_one(p, opts),
    };
    if ph.violation > thr {
        return infeasible_solution(p, opts, ph);
    }
    if retried {
        let spent = first.iterations + ph.iterations;
        let second = run(&prog, &ph.x, opts);
        return finish(p, &prog, second, spent);
    }
    finish(p, &prog, first, ph.iterations)
}
