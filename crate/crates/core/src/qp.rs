//! Dense convex QP: `min 1/2 z'Hz + f'z  s.t.  A z <= b`.
//!
//! Solved on the dual with Hildreth's coordinate ascent. Once the positive
//! multipliers settle, the equality system of that active set is solved
//! directly so the returned pair satisfies the KKT conditions to rounding.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn k(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Largest violation `max(A z - b, 0)`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        (&self.a_ineq * z - &self.b_ineq)
            .iter()
            .fold(0.0, |m, v| m.max(*v))
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.h.shape() != (n, n) {
            return Err(QpError::Dimension(format!(
                "h is {:?}, expected ({n}, {n})",
                self.h.shape()
            )));
        }
        if self.a_ineq.shape() != (self.k(), n) {
            return Err(QpError::Dimension(format!(
                "a_ineq is {:?}, expected ({}, {n})",
                self.a_ineq.shape(),
                self.k()
            )));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !(finite(self.h.as_slice())
            && finite(self.f.as_slice())
            && finite(self.a_ineq.as_slice())
            && finite(self.b_ineq.as_slice()))
        {
            return Err(QpError::NonFinite);
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-12 * self.h.amax().max(1.0) {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    /// KKT residual of `(z, lambda)` for the problem actually solved.
    pub kkt_residual: f64,
    pub active_set: Vec<usize>,
    /// Dual sweeps performed.
    pub iterations: usize,
    /// Multiple of the identity added to `h` (zero when `h` was positive definite).
    pub regularization: f64,
}

/// Maximum of stationarity (inf-norm), primal violation, dual negativity and
/// complementarity.
pub fn kkt_residual(p: &QpProblem, z: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let stationarity = (&p.h * z + &p.f + p.a_ineq.transpose() * lambda).amax();
    let slack = &p.a_ineq * z - &p.b_ineq;
    let mut r = stationarity;
    for i in 0..p.k() {
        r = r.max(slack[i].max(0.0));
        r = r.max((-lambda[i]).max(0.0));
        r = r.max((lambda[i] * slack[i]).abs());
    }
    r
}

/// Lifts `h` by `1e-9 * trace(h) / n` when it is not safely positive definite.
fn convexify(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), QpError> {
    let n = h.nrows();
    let eig = SymmetricEigen::new(h.clone());
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let norm = eig.eigenvalues.amax();
    if min_eig < -1e-9 * norm.max(f64::MIN_POSITIVE) {
        return Err(QpError::NotConvex(min_eig));
    }
    let lift = 1e-9 * (h.trace() / n as f64).max(1e-300).max(norm / n as f64);
    if min_eig > lift {
        return Ok((h.clone(), 0.0));
    }
    let mut lifted = h.clone();
    for i in 0..n {
        lifted[(i, i)] += lift;
    }
    Ok((lifted, lift))
}

pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    solve_warm(p, tol, max_iter, None)
}

/// Hildreth iteration started from `warm` multipliers when their length matches.
pub fn solve_warm(
    p: &QpProblem,
    tol: f64,
    max_iter: usize,
    warm: Option<&DVector<f64>>,
) -> Result<QpSolution, QpError> {
    p.check()?;
    let n = p.n();
    let k = p.k();
    let (h, reg) = convexify(&p.h)?;
    let chol = Cholesky::new(h.clone()).ok_or(QpError::NotConvex(0.0))?;
    let solved = QpProblem {
        h,
        f: p.f.clone(),
        a_ineq: p.a_ineq.clone(),
        b_ineq: p.b_ineq.clone(),
    };

    let z_free = -chol.solve(&p.f);
    if k == 0 || solved.max_violation(&z_free) <= 0.0 {
        let lambda = DVector::zeros(k);
        let kkt = kkt_residual(&solved, &z_free, &lambda);
        return Ok(QpSolution {
            status: if kkt < tol { QpStatus::Optimal } else { QpStatus::MaxIterations },
            z: z_free,
            lambda,
            kkt_residual: kkt,
            active_set: Vec::new(),
            iterations: 0,
            regularization: reg,
        });
    }

    // Dual data: P = A H^-1 A', d = b - A z_free.
    let hinv_at = chol.solve(&p.a_ineq.transpose());
    let pm = &p.a_ineq * &hinv_at;
    let d = &p.b_ineq - &p.a_ineq * &z_free;

    let primal = |lambda: &DVector<f64>| &z_free - &hinv_at * lambda;

    // Zero rows never bind; a zero row with negative bound cannot be satisfied.
    let mut live = vec![true; k];
    for i in 0..k {
        if pm[(i, i)] <= 1e-14 * pm.diagonal().amax().max(1e-300) {
            if d[i] < -tol {
                return Ok(infeasible(&solved, n, k, 0, reg, &z_free));
            }
            live[i] = false;
        }
    }

    let mut lambda = match warm {
        Some(w) if w.len() == k => w.map(|v| v.max(0.0)),
        _ => DVector::zeros(k),
    };
    for i in 0..k {
        if !live[i] {
            lambda[i] = 0.0;
        }
    }

    let dual = |l: &DVector<f64>| -0.5 * l.dot(&(&pm * l)) - d.dot(l);
    // a stale warm start below the cold dual value is discarded
    if dual(&lambda) < 0.0 {
        lambda.fill(0.0);
    }
    // Approximate Farkas certificate: with y = lambda / sum(lambda), every
    // feasible z satisfies |z|_inf >= -b'y / |A'y|_1.
    let scale = 1e4 * (1.0 + z_free.amax() + p.b_ineq.amax());
    let certifies_infeasibility = |l: &DVector<f64>| {
        let total = l.sum();
        if !(total > 1.0) {
            return false;
        }
        let y = l / total;
        let bty = p.b_ineq.dot(&y);
        let aty = (p.a_ineq.transpose() * &y).abs().sum();
        bty < 0.0 && -bty > scale * aty
    };

    let mut best = (f64::INFINITY, DVector::zeros(n), lambda.clone());
    let mut previous_active: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let before = if cfg!(debug_assertions) { dual(&lambda) } else { 0.0 };
        for i in 0..k {
            if !live[i] {
                continue;
            }
            let grad = pm.row(i).dot(&lambda.transpose()) + d[i];
            lambda[i] = (lambda[i] - grad / pm[(i, i)]).max(0.0);
        }
        if cfg!(debug_assertions) {
            let after = dual(&lambda);
            debug_assert!(
                after >= before - 1e-9 * (1.0 + before.abs()),
                "dual objective decreased: {before} -> {after}"
            );
        }
        if certifies_infeasibility(&lambda) {
            return Ok(infeasible(&solved, n, k, iterations, reg, &primal(&lambda)));
        }

        let z = primal(&lambda);
        let kkt = kkt_residual(&solved, &z, &lambda);
        if kkt < best.0 {
            best = (kkt, z, lambda.clone());
        }
        if kkt < tol {
            break;
        }

        let active: Vec<usize> = (0..k).filter(|&i| lambda[i] > 0.0).collect();
        if active == previous_active {
            if let Some((lp, zp, kp)) = polish(&solved, &pm, &d, &hinv_at, &z_free, &active) {
                if kp < best.0 {
                    best = (kp, zp, lp);
                }
                if kp < tol {
                    break;
                }
            }
        }
        previous_active = active;
    }

    let (kkt, z, lambda) = best;
    let active_set = (0..k).filter(|&i| lambda[i] > 0.0).collect();
    Ok(QpSolution {
        z,
        lambda,
        status: if kkt < tol { QpStatus::Optimal } else { QpStatus::MaxIterations },
        kkt_residual: kkt,
        active_set,
        iterations,
        regularization: reg,
    })
}

/// Exact multipliers for a fixed active set, if they are admissible.
fn polish(
    p: &QpProblem,
    pm: &DMatrix<f64>,
    d: &DVector<f64>,
    hinv_at: &DMatrix<f64>,
    z_free: &DVector<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    if active.is_empty() {
        return None;
    }
    let s = active.len();
    let sub = DMatrix::from_fn(s, s, |i, j| pm[(active[i], active[j])]);
    let rhs = DVector::from_fn(s, |i, _| -d[active[i]]);
    let ls = sub.lu().solve(&rhs)?;
    if ls.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return None;
    }
    let mut lambda = DVector::zeros(p.k());
    for (i, &a) in active.iter().enumerate() {
        lambda[a] = ls[i];
    }
    let z = z_free - hinv_at * &lambda;
    let kkt = kkt_residual(p, &z, &lambda);
    Some((lambda, z, kkt))
}

fn infeasible(
    p: &QpProblem,
    n: usize,
    k: usize,
    iterations: usize,
    reg: f64,
    z: &DVector<f64>,
) -> QpSolution {
    debug_assert_eq!(z.len(), n);
    let lambda = DVector::zeros(k);
    QpSolution {
        kkt_residual: kkt_residual(p, z, &lambda),
        z: z.clone(),
        lambda,
        status: QpStatus::Infeasible,
        active_set: Vec::new(),
        iterations,
        regularization: reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unconstrained_closed_form() {
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -2.0]));
        let s = solve(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(s.z[1], 2.0, epsilon = 1e-14);
    }

    fn clipped() -> QpProblem {
        // (z - 2)^2 = z^2 - 4z + 4  ->  h = 2, f = -4
        QpProblem {
            h: DMatrix::from_element(1, 1, 2.0),
            f: DVector::from_element(1, -4.0),
            a_ineq: DMatrix::from_element(1, 1, 1.0),
            b_ineq: DVector::from_element(1, 1.0),
        }
    }

    #[test]
    fn clipped_minimum() {
        let p = clipped();
        let s = solve(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.0, epsilon = 1e-12);
        assert_eq!(s.active_set, vec![0]);
        assert_relative_eq!(s.lambda[0], 2.0, epsilon = 1e-12);
        assert!(kkt_residual(&p, &s.z, &s.lambda) < 1e-10);
    }

    #[test]
    fn kkt_primal_term_dominates() {
        // flat objective, so stationarity contributes nothing
        let flat = QpProblem {
            h: DMatrix::zeros(1, 1),
            f: DVector::zeros(1),
            ..clipped()
        };
        let r = kkt_residual(&flat, &DVector::from_element(1, 1.5), &DVector::zeros(1));
        assert_relative_eq!(r, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn kkt_of_constructed_stationary_point() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let z = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let f = -(&h * &z);
        let p = QpProblem {
            h,
            f,
            a_ineq: DMatrix::identity(3, 3),
            b_ineq: DVector::from_element(3, 1.0),
        };
        assert!(kkt_residual(&p, &z, &DVector::zeros(3)) < 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let p = QpProblem {
            h: DMatrix::identity(1, 1),
            f: DVector::zeros(1),
            a_ineq: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            b_ineq: DVector::from_vec(vec![0.0, -1.0]),
        };
        let s = solve(&p, DEFAULT_TOL, 100_000).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric_hessians() {
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(solve(&p, 1e-8, 10), Err(QpError::NotConvex(_))));
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(solve(&p, 1e-8, 10), Err(QpError::NotSymmetric(_))));
    }

    #[test]
    fn semidefinite_hessian_is_lifted() {
        let p = QpProblem {
            h: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            f: DVector::from_vec(vec![-1.0, 0.0]),
            a_ineq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_ineq: DVector::from_element(1, 0.5),
        };
        let s = solve(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(s.regularization > 0.0);
        assert!(p.max_violation(&s.z) < 1e-8);
    }

    #[test]
    fn zero_row_with_negative_bound_is_infeasible() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            f: DVector::zeros(2),
            a_ineq: DMatrix::zeros(1, 2),
            b_ineq: DVector::from_element(1, -1.0),
        };
        assert_eq!(solve(&p, 1e-8, 10).unwrap().status, QpStatus::Infeasible);
    }
}
