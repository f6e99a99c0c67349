//! Dense dual active-set solver (Goldfarb–Idnani) for small strictly convex QPs
//!
//! ```text
//! minimize ½ vᵀ G v + aᵀ v   subject to   N v ≤ b
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// `G`, symmetric positive definite.
    pub hessian: DMatrix<f64>,
    /// `a`
    pub linear: DVector<f64>,
    /// Rows of `N`.
    pub ineq_lhs: DMatrix<f64>,
    /// `b`
    pub ineq_rhs: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub v: DVector<f64>,
    /// Indices into the inequality rows, in the order they became active.
    pub active: Vec<usize>,
    /// Multipliers matching `active`.
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Violation tolerance used to pick the next constraint to add.
const FEAS_TOL: f64 = 1e-12;

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, ineq_lhs: DMatrix<f64>, ineq_rhs: DVector<f64>) -> Result<Self> {
        let n = hessian.nrows();
        if hessian.ncols() != n || linear.len() != n || ineq_lhs.ncols() != n || ineq_lhs.nrows() != ineq_rhs.len() {
            return Err(Error::Dimension(format!(
                "qp shapes: G {}x{}, a {}, N {}x{}, b {}",
                hessian.nrows(),
                hessian.ncols(),
                linear.len(),
                ineq_lhs.nrows(),
                ineq_lhs.ncols(),
                ineq_rhs.len()
            )));
        }
        Ok(Self { hessian, linear, ineq_lhs, ineq_rhs })
    }

    fn slack(&self, v: &DVector<f64>, i: usize) -> f64 {
        self.ineq_rhs[i] - self.ineq_lhs.row(i).dot(&v.transpose())
    }

    /// Max of stationarity, primal and dual infeasibility and complementarity.
    pub fn kkt_residual(&self, v: &DVector<f64>, active: &[usize], multipliers: &[f64]) -> f64 {
        let mut grad = &self.hessian * v + &self.linear;
        for (&i, &u) in active.iter().zip(multipliers) {
            grad += self.ineq_lhs.row(i).transpose() * u;
        }
        let mut res = grad.amax();
        let slack = &self.ineq_rhs - &self.ineq_lhs * v;
        if slack.len() > 0 {
            res = res.max(-slack.min());
        }
        for (&i, &u) in active.iter().zip(multipliers) {
            res = res.max(-u).max((u * self.slack(v, i)).abs());
        }
        res
    }
}

fn tol_for(b: f64) -> f64 {
    FEAS_TOL * b.abs().max(1.0)
}

/// Solve the QP. Iterations are capped at `100 · rows` (at least 100).
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    let n = problem.hessian.nrows();
    let rows = problem.ineq_rhs.len();
    let chol: Cholesky<f64, Dyn> = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid("qp hessian is not positive definite".into()))?;
    let ginv = chol.inverse();
    let mut v = -(&ginv * &problem.linear);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let cap = (100 * rows).max(100);
    let mut iterations = 0;

    // Constraints are handled as nᵀv ≤ b; the "positive" normal is -n for the
    // usual s(v) = -nᵀv + b ≥ 0 form, which flips signs below.
    loop {
        // most violated constraint, first index on ties
        let slack = &problem.ineq_rhs - &problem.ineq_lhs * &v;
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..rows {
            let s = slack[i];
            if s < -tol_for(problem.ineq_rhs[i]) && pick.map_or(true, |(_, best)| s < best) && !active.contains(&i) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else { break };
        let np = problem.ineq_lhs.row(p).transpose();
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > cap {
                return Err(Error::QpMaxIterations(cap));
            }
            // Directions with the current active set.
            let k = active.len();
            let nmat = DMatrix::from_fn(n, k, |r, c| problem.ineq_lhs[(active[c], r)]);
            let ginv_n = &ginv * &nmat;
            let ginv_np = &ginv * &np;
            let (z, r) = if k == 0 {
                (ginv_np.clone(), DVector::zeros(0))
            } else {
                let m = nmat.transpose() * &ginv_n;
                let r = m
                    .clone()
                    .lu()
                    .solve(&(nmat.transpose() * &ginv_np))
                    .ok_or_else(|| Error::Invalid("dependent active constraints".into()))?;
                (&ginv_np - &ginv_n * &r, r)
            };
            // In the ≤ form the primal step runs along -z and the dual
            // direction for the active set is -r.
            // z vanishes when n_p lies in the span of the active normals;
            // rounding leaves a tiny remainder that must not be stepped along.
            let zn = z.dot(&np);
            let full = if k < n && z.norm() > 1e-9 * ginv_np.norm() && zn > 0.0 {
                Some(-problem.slack(&v, p) / zn)
            } else {
                None
            };
            let mut partial: Option<(usize, f64)> = None;
            for j in 0..k {
                if r[j] > 0.0 {
                    let t = u[j] / r[j];
                    if partial.map_or(true, |(_, best)| t < best) {
                        partial = Some((j, t));
                    }
                }
            }
            match (full, partial) {
                (None, None) => return Err(Error::QpInfeasible { constraint: p }),
                (None, Some((j, t))) => {
                    for (uj, rj) in u.iter_mut().zip(r.iter()) {
                        *uj -= t * rj;
                    }
                    u_p += t;
                    active.remove(j);
                    u.remove(j);
                }
                (Some(tf), part) => {
                    let (t, drop) = match part {
                        Some((j, tp)) if tp < tf => (tp, Some(j)),
                        _ => (tf, None),
                    };
                    v -= &z * t;
                    for (uj, rj) in u.iter_mut().zip(r.iter()) {
                        *uj -= t * rj;
                    }
                    u_p += t;
                    match drop {
                        Some(j) => {
                            active.remove(j);
                            u.remove(j);
                        }
                        None => {
                            active.push(p);
                            u.push(u_p);
                            break;
                        }
                    }
                }
            }
        }
    }
    let kkt_residual = problem.kkt_residual(&v, &active, &u);
    Ok(QpSolution { v, active, multipliers: u, kkt_residual, iterations })
}
