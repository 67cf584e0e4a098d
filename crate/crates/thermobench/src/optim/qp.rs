//! Dense convex quadratic programming by a dual active-set method.
//!
//! Solves
//!     minimize   1/2 x' H x + g' x
//!     subject to A_eq x  = b_eq
//!                A_in x <= b_in
//!                lo <= x <= hi
//! starting from the unconstrained minimizer and adding violated constraints
//! one at a time, dropping blocking ones along the way. Problem sizes here are
//! at most a few hundred variables, so every step re-solves the small active
//! KKT system directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_QP_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Qp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Inequality rows a_i' x <= b_i.
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    /// Equality rows a_e' x = b_e.
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Elementwise bounds; use -inf/inf for absent bounds.
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Qp {
    /// Unconstrained problem skeleton with free bounds.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Qp {
            h,
            g,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            lo: DVector::from_element(n, f64::NEG_INFINITY),
            hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::Shape("H must be n x n".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Shape(format!(
                        "H not symmetric at ({i},{j}): {} vs {}",
                        self.h[(i, j)],
                        self.h[(j, i)]
                    )));
                }
            }
        }
        if self.a_ineq.ncols() != n && self.a_ineq.nrows() > 0 {
            return Err(Error::Shape("A_ineq column count".into()));
        }
        if self.a_eq.ncols() != n && self.a_eq.nrows() > 0 {
            return Err(Error::Shape("A_eq column count".into()));
        }
        if self.a_ineq.nrows() != self.b_ineq.len() || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::Shape("constraint row/rhs mismatch".into()));
        }
        if self.lo.len() != n || self.hi.len() != n {
            return Err(Error::Shape("bound length".into()));
        }
        for i in 0..n {
            if self.lo[i] > self.hi[i] {
                return Err(Error::Shape(format!("lo[{i}] > hi[{i}]")));
            }
        }
        Ok(())
    }
}

/// Identifies one row of the unified constraint list n' x >= d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    Equality(usize),
    Inequality(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Constraints active at the solution with their multipliers.
    pub active_set: Vec<(ConstraintId, f64)>,
    pub iterations: usize,
    /// Max of stationarity, primal and dual feasibility, complementarity residuals.
    pub kkt_residual: f64,
}

struct Constraint {
    id: ConstraintId,
    normal: DVector<f64>,
    rhs: f64,
    is_equality: bool,
}

/// Builds the unified `n' x >= d` constraint list. Equalities are entered with
/// the sign that is violated at the starting point and never dropped.
fn gather_constraints(p: &Qp) -> Vec<Constraint> {
    let n = p.dim();
    let mut cs = Vec::new();
    for i in 0..p.a_eq.nrows() {
        cs.push(Constraint {
            id: ConstraintId::Equality(i),
            normal: p.a_eq.row(i).transpose(),
            rhs: p.b_eq[i],
            is_equality: true,
        });
    }
    for i in 0..p.a_ineq.nrows() {
        cs.push(Constraint {
            id: ConstraintId::Inequality(i),
            normal: -p.a_ineq.row(i).transpose(),
            rhs: -p.b_ineq[i],
            is_equality: false,
        });
    }
    for i in 0..n {
        if p.lo[i].is_finite() {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            cs.push(Constraint { id: ConstraintId::Lower(i), normal: v, rhs: p.lo[i], is_equality: false });
        }
        if p.hi[i].is_finite() {
            let mut v = DVector::zeros(n);
            v[i] = -1.0;
            cs.push(Constraint { id: ConstraintId::Upper(i), normal: v, rhs: -p.hi[i], is_equality: false });
        }
    }
    cs
}

fn cholesky_with_shift(h: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = h.clone().cholesky() {
        return Ok(c);
    }
    let scale = h.diagonal().amax().max(1.0);
    for shift in [1e-12, 1e-10, 1e-8] {
        let mut hs = h.clone();
        for i in 0..h.nrows() {
            hs[(i, i)] += shift * scale;
        }
        if let Some(c) = hs.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::QpUnbounded(
        "Hessian is not positive definite even after regularization".into(),
    ))
}

/// Solve the QP. Deterministic for fixed input; returns the active set and
/// certifies the KKT residual against `tol`.
pub fn solve_qp(p: &Qp, tol: f64) -> Result<QpSolution> {
    p.validate()?;
    let n = p.dim();
    let chol = cholesky_with_shift(&p.h)?;
    let hinv = |v: &DVector<f64>| chol.solve(v);

    let constraints = gather_constraints(p);
    let mut x = hinv(&(-&p.g));
    // active set: indices into `constraints` plus multipliers
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    // orientation of each equality (may be entered with flipped sign)
    let mut eq_sign: Vec<f64> = vec![1.0; constraints.len()];

    let max_iter = 50 * (n + constraints.len()).max(10);
    let mut iterations = 0;

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::Numerical(format!(
                "QP did not converge within {max_iter} active-set iterations"
            )));
        }

        // most violated constraint
        let mut worst: Option<(usize, f64, f64)> = None; // (index, violation, sign)
        for (ci, c) in constraints.iter().enumerate() {
            if active.contains(&ci) {
                continue;
            }
            let val = c.normal.dot(&x) - c.rhs;
            let (viol, sign) = if c.is_equality {
                (val.abs(), if val < 0.0 { 1.0 } else { -1.0 })
            } else {
                (-val, 1.0)
            };
            if viol > tol.max(1e-12) {
                match worst {
                    Some((_, wv, _)) if wv >= viol => {}
                    _ => worst = Some((ci, viol, sign)),
                }
            }
        }
        let Some((ci, _, sign)) = worst else {
            break;
        };
        eq_sign[ci] = sign;
        let nplus = &constraints[ci].normal * sign;
        let bplus = constraints[ci].rhs * sign;

        // inner loop: take (possibly partial) steps toward constraint ci
        let mut u_plus = 0.0; // multiplier of the pending constraint
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::Numerical(format!(
                    "QP did not converge within {max_iter} active-set iterations"
                )));
            }
            let m = active.len();
            // z: primal direction; r: rate of change of active multipliers.
            // Solved from the augmented system [[H, N], [N', 0]] [z; r] =
            // [n+; 0], which stays accurate when H carries large penalty
            // weights that would wreck an explicit H^-1 Schur complement.
            let (z, r) = if m == 0 {
                (hinv(&nplus), DVector::zeros(0))
            } else {
                let mut kkt = DMatrix::zeros(n + m, n + m);
                kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
                for (j, &aj) in active.iter().enumerate() {
                    let col = &constraints[aj].normal * eq_sign[aj];
                    kkt.view_mut((0, n + j), (n, 1)).copy_from(&col);
                    kkt.view_mut((n + j, 0), (1, n)).copy_from(&col.transpose());
                }
                let mut rhs = DVector::zeros(n + m);
                rhs.rows_mut(0, n).copy_from(&nplus);
                let sol = kkt
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Numerical("singular active-set system".into()))?;
                (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
            };

            // dual step length: first active inequality whose multiplier hits zero
            let mut t1 = f64::INFINITY;
            let mut drop_j: Option<usize> = None;
            for (j, &aj) in active.iter().enumerate() {
                if constraints[aj].is_equality {
                    continue;
                }
                if r[j] > 1e-14 {
                    let t = mult[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop_j = Some(j);
                    }
                }
            }
            // primal step length to satisfy constraint ci
            let denom = z.dot(&nplus);
            let slack = bplus - nplus.dot(&x);
            let t2 = if denom > 1e-14 { slack / denom } else { f64::INFINITY };

            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::QpInfeasible(format!(
                    "constraint {:?} cannot be satisfied: no feasible direction",
                    constraints[ci].id
                )));
            }
            if t2.is_finite() {
                x += &z * t;
            }
            for j in 0..mult.len() {
                mult[j] -= t * r[j];
            }
            u_plus += t;
            if t2 <= t1 {
                active.push(ci);
                mult.push(u_plus);
                break;
            } else {
                let j = drop_j.expect("t1 finite implies a blocking constraint");
                active.remove(j);
                mult.remove(j);
            }
        }
    }

    // polish: re-solve the equality-constrained KKT system on the final
    // active set (with one round of iterative refinement) so x and the
    // multipliers are not limited by error accumulated along the path
    let m = active.len();
    if m > 0 {
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for (j, &aj) in active.iter().enumerate() {
            let col = &constraints[aj].normal * eq_sign[aj];
            kkt.view_mut((0, n + j), (n, 1)).copy_from(&col);
            kkt.view_mut((n + j, 0), (1, n)).copy_from(&col.transpose());
        }
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&p.g));
        for (j, &aj) in active.iter().enumerate() {
            rhs[n + j] = constraints[aj].rhs * eq_sign[aj];
        }
        let lu = kkt.clone().lu();
        if let Some(mut sol) = lu.solve(&rhs) {
            if let Some(corr) = lu.solve(&(&rhs - &kkt * &sol)) {
                sol += corr;
            }
            let x_new = sol.rows(0, n).into_owned();
            let mult_new: Vec<f64> = (0..m).map(|j| -sol[n + j]).collect();
            // accept only if the refit stays dual feasible (sign convention:
            // multipliers of n'x >= d constraints must be >= 0)
            if mult_new
                .iter()
                .zip(active.iter())
                .all(|(&u, &aj)| constraints[aj].is_equality || u >= -1e-9)
            {
                x = x_new;
                mult = mult_new;
            }
        }
    }

    // assemble solution metadata
    let mut active_set = Vec::new();
    for (j, &aj) in active.iter().enumerate() {
        active_set.push((constraints[aj].id, mult[j]));
    }
    let objective = 0.5 * x.dot(&(&p.h * &x)) + p.g.dot(&x);
    let kkt_residual = kkt_residual(p, &x, &constraints, &active, &mult, &eq_sign);
    if kkt_residual > 1e3 * tol.max(1e-12) {
        return Err(Error::Numerical(format!(
            "QP KKT residual {kkt_residual:.3e} exceeds tolerance"
        )));
    }
    Ok(QpSolution { x, objective, active_set, iterations, kkt_residual })
}

fn kkt_residual(
    p: &Qp,
    x: &DVector<f64>,
    constraints: &[Constraint],
    active: &[usize],
    mult: &[f64],
    eq_sign: &[f64],
) -> f64 {
    // stationarity: Hx + g - sum u_j n_j = 0
    let mut grad = &p.h * x + &p.g;
    for (j, &aj) in active.iter().enumerate() {
        grad -= &constraints[aj].normal * (eq_sign[aj] * mult[j]);
    }
    // stationarity is measured relative to the curvature scale so strongly
    // weighted penalty terms do not inflate the residual
    let mut res: f64 = grad.amax() / (1.0 + p.h.amax());
    for (ci, c) in constraints.iter().enumerate() {
        let val = c.normal.dot(x) - c.rhs;
        // primal feasibility
        let pf = if c.is_equality { val.abs() } else { (-val).max(0.0) };
        res = res.max(pf);
        // complementarity for active inequalities
        if let Some(j) = active.iter().position(|&a| a == ci) {
            if !c.is_equality {
                res = res.max((mult[j] * val).abs());
                // dual feasibility
                res = res.max((-mult[j]).max(0.0));
            }
        }
    }
    res
}
