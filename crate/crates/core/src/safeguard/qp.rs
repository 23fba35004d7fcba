//! Projection of a nominal command onto `{u : L u ≥ S, lo ≤ u ≤ hi}` in the
//! metric of a positive definite weight `V`.
//!
//! Diagonal weights are solved exactly by a breakpoint search on the single
//! multiplier of `L u ≥ S`. Dense weights go through a small primal
//! active-set method.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{ensure_dim, Error, Result};

/// Symmetric positive definite weight of the projection objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        if !v.is_square() || v.nrows() == 0 {
            return Err(Error::NotPositiveDefinite);
        }
        let scale = v.amax().max(f64::MIN_POSITIVE);
        if (&v - v.transpose()).amax() > 1e-12 * scale || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        if v.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self(v))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn diagonal(weights: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(weights)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.0[(i, j)] == 0.0))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.0 * factor)
    }

    pub fn objective(&self, u: &DVector<f64>, u0: &DVector<f64>) -> f64 {
        let e = u - u0;
        e.dot(&(&self.0 * &e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// The nominal command already satisfies every constraint.
    Passthrough,
    /// Optimum with `L u > S` (only the box binds).
    BoxOnly,
    /// Optimum on `L u = S`.
    ConstraintActive,
    /// No feasible point; `u` maximizes `L u` over the box.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
}

/// Problem data shared by the solvers.
#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub nominal: &'a DVector<f64>,
    pub l: &'a RowDVector<f64>,
    pub s: f64,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
    pub weight: &'a CostMatrix,
}

impl QpProblem<'_> {
    fn check(&self) -> Result<()> {
        let n = self.nominal.len();
        ensure_dim("constraint row", n, self.l.len())?;
        ensure_dim("lower bound", n, self.lo.len())?;
        ensure_dim("upper bound", n, self.hi.len())?;
        ensure_dim("cost matrix", n, self.weight.dim())?;
        if self.lo.iter().zip(self.hi.iter()).any(|(a, b)| a > b) {
            return Err(Error::InvalidParameter("lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(u.len(), (0..u.len()).map(|i| u[i].clamp(self.lo[i], self.hi[i])))
    }

    fn lu(&self, u: &DVector<f64>) -> f64 {
        (self.l * u)[0]
    }

    /// Box point maximizing `L u`; zero-coefficient components keep the clipped nominal.
    pub fn max_effort_point(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.nominal.len(),
            (0..self.nominal.len()).map(|i| {
                let li = self.l[i];
                if li > 0.0 {
                    self.hi[i]
                } else if li < 0.0 {
                    self.lo[i]
                } else {
                    self.nominal[i].clamp(self.lo[i], self.hi[i])
                }
            }),
        )
    }

    fn finish(&self, u: DVector<f64>, status: QpStatus) -> QpSolution {
        QpSolution {
            objective: self.weight.objective(&u, self.nominal),
            u,
            status,
        }
    }
}

pub fn solve(problem: &QpProblem<'_>) -> Result<QpSolution> {
    problem.check()?;
    let inside = problem
        .nominal
        .iter()
        .zip(problem.lo.iter().zip(problem.hi.iter()))
        .all(|(&u, (&lo, &hi))| u >= lo && u <= hi);
    if inside && problem.lu(problem.nominal) >= problem.s {
        return Ok(problem.finish(problem.nominal.clone(), QpStatus::Passthrough));
    }
    let best = problem.max_effort_point();
    if problem.lu(&best) < problem.s {
        return Ok(problem.finish(best, QpStatus::Infeasible));
    }
    if problem.weight.is_diagonal() {
        Ok(solve_diagonal(problem))
    } else {
        // Equality solves can land a rounding error outside a bound.
        let sol = solve_active_set(problem, best)?;
        let status = sol.status;
        Ok(problem.finish(problem.clip(&sol.u), status))
    }
}

fn solve_diagonal(p: &QpProblem<'_>) -> QpSolution {
    let n = p.nominal.len();
    let w: Vec<f64> = (0..n).map(|i| p.weight.matrix()[(i, i)]).collect();
    let clipped = p.clip(p.nominal);
    if p.lu(&clipped) >= p.s {
        return p.finish(clipped, QpStatus::BoxOnly);
    }
    let at = |mu: f64| -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|i| (p.nominal[i] + mu * p.l[i] / w[i]).clamp(p.lo[i], p.hi[i])))
    };
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * n);
    for i in 0..n {
        let li = p.l[i];
        if li != 0.0 {
            for bound in [p.lo[i], p.hi[i]] {
                let mu = (bound - p.nominal[i]) * w[i] / li;
                if mu > 0.0 {
                    breaks.push(mu);
                }
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut prev = 0.0;
    let mut g_prev = p.lu(&at(0.0));
    for &mu in &breaks {
        let g = p.lu(&at(mu));
        if g >= p.s {
            let mid = 0.5 * (prev + mu);
            let slope: f64 = (0..n)
                .filter(|&i| {
                    let x = p.nominal[i] + mid * p.l[i] / w[i];
                    p.l[i] != 0.0 && x > p.lo[i] && x < p.hi[i]
                })
                .map(|i| p.l[i] * p.l[i] / w[i])
                .sum();
            let target = if slope > 0.0 { prev + (p.s - g_prev) / slope } else { mu };
            let mut u = at(target.clamp(prev, mu));
            if p.lu(&u) < p.s && p.lu(&at(mu)) >= p.s && (p.s - p.lu(&u)) > 1e-12 * (1.0 + p.s.abs()) {
                u = at(mu);
            }
            return p.finish(u, QpStatus::ConstraintActive);
        }
        prev = mu;
        g_prev = g;
    }
    // Feasibility was checked, so the maximum is reached at the last breakpoint.
    p.finish(at(prev), QpStatus::ConstraintActive)
}

/// Constraint `aᵀu ≥ b` in the active-set method; index 0 is `L u ≥ S`,
/// `1 + 2i` is `u_i ≥ lo_i`, `2 + 2i` is `−u_i ≥ −hi_i`.
fn constraint(p: &QpProblem<'_>, k: usize) -> (DVector<f64>, f64) {
    let n = p.nominal.len();
    if k == 0 {
        return (p.l.transpose(), p.s);
    }
    let i = (k - 1) / 2;
    let mut a = DVector::zeros(n);
    if (k - 1).is_multiple_of(2) {
        a[i] = 1.0;
        (a, p.lo[i])
    } else {
        a[i] = -1.0;
        (a, -p.hi[i])
    }
}

fn solve_active_set(p: &QpProblem<'_>, start: DVector<f64>) -> Result<QpSolution> {
    let n = p.nominal.len();
    let m = 1 + 2 * n;
    let v = p.weight.matrix();
    let mut x = start;
    let tol = 1e-12;
    let mut working: Vec<usize> = Vec::new();
    for i in 0..n {
        if x[i] <= p.lo[i] {
            working.push(1 + 2 * i);
        } else if x[i] >= p.hi[i] {
            working.push(2 + 2 * i);
        }
    }
    for _ in 0..(50 * m) {
        let grad = v * (&x - p.nominal);
        let k = working.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(v);
        for (c, &idx) in working.iter().enumerate() {
            let (a, _) = constraint(p, idx);
            for r in 0..n {
                kkt[(r, n + c)] = -a[r];
                kkt[(n + c, r)] = a[r];
            }
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => {
                // Dependent working set: drop the most recently added constraint.
                working.pop();
                continue;
            }
        };
        let step = sol.rows(0, n).into_owned();
        if step.amax() <= tol * (1.0 + x.amax()) {
            let multipliers = sol.rows(n, k);
            match multipliers.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((pos, &lam)) if lam < -1e-12 => {
                    working.remove(pos);
                }
                _ => {
                    let status = if working.contains(&0) || p.lu(&x) - p.s <= 1e-12 * (1.0 + p.s.abs()) {
                        QpStatus::ConstraintActive
                    } else {
                        QpStatus::BoxOnly
                    };
                    return Ok(p.finish(x, status));
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for idx in 0..m {
            if working.contains(&idx) {
                continue;
            }
            let (a, b) = constraint(p, idx);
            let ap = a.dot(&step);
            if ap < 0.0 {
                let ratio = ((b - a.dot(&x)) / ap).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(idx);
                }
            }
        }
        x += &step * alpha;
        if let Some(idx) = blocking {
            working.push(idx);
        }
    }
    Err(Error::InvalidParameter("active-set iteration limit reached".into()))
}

/// Largest violation of the KKT conditions of the projection at `u`
/// (stationarity, primal and dual feasibility, complementarity), with the
/// multipliers chosen to minimize it.
pub fn kkt_residual(problem: &QpProblem<'_>, u: &DVector<f64>) -> f64 {
    let n = u.len();
    let g = problem.weight.matrix() * (u - problem.nominal);
    let slack = problem.lu(u) - problem.s;
    let scale = 1.0 + problem.s.abs();
    let on_constraint = slack.abs() <= 1e-9 * scale;
    let bound_tol = |b: f64| 1e-12 * (1.0 + b.abs());
    let at_lo: Vec<bool> = (0..n).map(|i| (u[i] - problem.lo[i]).abs() <= bound_tol(problem.lo[i])).collect();
    let at_hi: Vec<bool> = (0..n).map(|i| (u[i] - problem.hi[i]).abs() <= bound_tol(problem.hi[i])).collect();

    let mut primal = (-slack).max(0.0);
    for i in 0..n {
        primal = primal.max(problem.lo[i] - u[i]).max(u[i] - problem.hi[i]);
    }

    let residual_for = |mu: f64| -> f64 {
        let mut worst: f64 = if mu < 0.0 { -mu } else { 0.0 };
        if !on_constraint {
            worst = worst.max((mu * slack).abs());
        }
        for i in 0..n {
            let r = g[i] - mu * problem.l[i];
            let violation = if at_lo[i] && at_hi[i] {
                0.0
            } else if at_lo[i] {
                (-r).max(0.0)
            } else if at_hi[i] {
                r.max(0.0)
            } else {
                r.abs()
            };
            worst = worst.max(violation);
        }
        worst
    };

    let mut candidates = vec![0.0];
    if on_constraint {
        let free: Vec<usize> = (0..n).filter(|&i| !at_lo[i] && !at_hi[i] && problem.l[i] != 0.0).collect();
        let den: f64 = free.iter().map(|&i| problem.l[i] * problem.l[i]).sum();
        if den > 0.0 {
            candidates.push(free.iter().map(|&i| problem.l[i] * g[i]).sum::<f64>() / den);
        }
        candidates.extend((0..n).filter(|&i| problem.l[i] != 0.0).map(|i| g[i] / problem.l[i]));
    }
    let stationarity = candidates.into_iter().map(residual_for).fold(f64::INFINITY, f64::min);
    primal.max(stationarity)
}
