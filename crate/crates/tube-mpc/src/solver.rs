//! Quadratic programming layer.
//!
//! [`QpProblem`] is the house format: minimize
//! `0.5 z'Hz + g'z + constant` subject to `lower <= C z <= upper`.
//! [`admm::AdmmSolver`] solves it by operator splitting with an active-set
//! polish; [`QpProblem::kkt_residuals`] recomputes optimality residuals from
//! scratch so solver claims can be audited independently. [`condense`] turns
//! an affine horizon model into this format, [`sqp`] iterates it against a
//! nonlinear model, and [`dump`] serializes problems to a plain-text matrix
//! format for offline cross-checking.

pub mod admm;
pub mod condense;
pub mod dump;
pub mod sqp;

pub use admm::{AdmmSettings, AdmmSolver};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("{0} contains NaN")]
    NotANumber(&'static str),
    #[error("H must be symmetric")]
    NotSymmetric,
    #[error("constraint bounds crossed at row {0}")]
    CrossedBounds(usize),
    #[error("KKT matrix factorization failed")]
    Factorization,
}

/// `minimize 0.5 z'Hz + g'z + constant  s.t.  lower <= Cz <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Constant folded out of the quadratic form; reported objectives
    /// include it so they match the modeled cost.
    pub constant: f64,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        c: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        constant: f64,
    ) -> Result<Self, SolveError> {
        let d = h.nrows();
        if d == 0 || h.ncols() != d || g.len() != d || c.ncols() != d {
            return Err(SolveError::Dimension("H/g/C"));
        }
        let k = c.nrows();
        if lower.len() != k || upper.len() != k {
            return Err(SolveError::Dimension("bounds"));
        }
        if h.iter().any(|v| v.is_nan())
            || g.iter().any(|v| !v.is_finite())
            || c.iter().any(|v| !v.is_finite())
            || !constant.is_finite()
        {
            return Err(SolveError::NotANumber("problem data"));
        }
        if lower.iter().chain(upper.iter()).any(|v| v.is_nan()) {
            return Err(SolveError::NotANumber("bounds"));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (h[(i, j)] - h[(j, i)]).abs() > 1e-9 * (1.0 + h[(i, j)].abs()) {
                    return Err(SolveError::NotSymmetric);
                }
            }
        }
        for i in 0..k {
            if lower[i] > upper[i] {
                return Err(SolveError::CrossedBounds(i));
            }
        }
        Ok(Self {
            h,
            g,
            c,
            lower,
            upper,
            constant,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.c.nrows()
    }

    /// Full objective value including the folded constant.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.h * z)[0] + self.g.dot(z) + self.constant
    }

    /// Optimality residuals recomputed from the raw data, independent of any
    /// solver bookkeeping. `y` follows the convention `Hz + g + C'y = 0`,
    /// `y <= 0` on active lower bounds, `y >= 0` on active upper bounds.
    pub fn kkt_residuals(&self, z: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
        let cz = &self.c * z;
        let mut primal = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..self.num_constraints() {
            primal = primal
                .max(self.lower[i] - cz[i])
                .max(cz[i] - self.upper[i]);
            // A positive multiplier pushes on the upper bound, a negative one
            // on the lower. Pushing on a bound that does not exist is pure
            // dual infeasibility and counts at the multiplier's own size.
            if y[i] > 0.0 {
                if self.upper[i].is_finite() {
                    comp = comp.max(y[i] * (self.upper[i] - cz[i]).abs());
                } else {
                    comp = comp.max(y[i]);
                }
            }
            if y[i] < 0.0 {
                if self.lower[i].is_finite() {
                    comp = comp.max(-y[i] * (cz[i] - self.lower[i]).abs());
                } else {
                    comp = comp.max(-y[i]);
                }
            }
        }
        let dual_vec = &self.h * z + &self.g + self.c.transpose() * y;
        KktResiduals {
            primal: primal.max(0.0),
            dual: dual_vec.amax(),
            complementarity: comp,
        }
    }
}

/// Independent optimality audit of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// Worst constraint violation.
    pub primal: f64,
    /// Inf-norm of the stationarity residual.
    pub dual: f64,
    /// Worst complementary slackness product.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

/// Solver output: primal/dual pair, audited residuals, and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub polished: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_problem(h: f64, g: f64, constant: f64, l: f64, u: f64) -> QpProblem {
        QpProblem::new(
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, g),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, l),
            DVector::from_element(1, u),
            constant,
        )
        .unwrap()
    }

    #[test]
    fn objective_includes_constant() {
        // x^2 with the square expanded around 2: 0.5*2*x^2 - 4x + 4.
        let p = scalar_problem(2.0, -4.0, 4.0, f64::NEG_INFINITY, f64::INFINITY);
        assert_relative_eq!(p.objective(&DVector::from_element(1, 2.0)), 0.0);
        assert_relative_eq!(p.objective(&DVector::from_element(1, 0.0)), 4.0);
        let q = scalar_problem(2.0, 0.0, 0.0, 1.0, f64::INFINITY);
        assert_relative_eq!(q.objective(&DVector::from_element(1, 1.0)), 1.0);
    }

    #[test]
    fn kkt_residuals_accept_hand_solved_optimum() {
        // min x^2 s.t. x >= 1: optimum x = 1 with dual y = -2 on the lower
        // bound (stationarity 2x + y = 0).
        let p = scalar_problem(2.0, 0.0, 0.0, 1.0, f64::INFINITY);
        let r = p.kkt_residuals(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, -2.0),
        );
        assert!(r.within(1e-12), "{r:?}");
    }

    #[test]
    fn kkt_residuals_flag_wrong_points() {
        let p = scalar_problem(2.0, 0.0, 0.0, 1.0, f64::INFINITY);
        // Violates the constraint.
        let r = p.kkt_residuals(&DVector::from_element(1, 0.5), &DVector::zeros(1));
        assert!(r.primal >= 0.5 - 1e-12);
        // Feasible but not stationary.
        let r = p.kkt_residuals(&DVector::from_element(1, 2.0), &DVector::zeros(1));
        assert!(r.dual >= 4.0 - 1e-12);
        // Stationary and feasible but complementarity broken: dual pushes on
        // an inactive bound.
        let r = p.kkt_residuals(
            &DVector::from_element(1, 2.0),
            &DVector::from_element(1, -4.0),
        );
        assert!(r.complementarity >= 4.0 - 1e-12);
    }

    #[test]
    fn kkt_residuals_flag_duals_on_nonexistent_bounds() {
        // min x^2 with x >= 1 and x <= 3. The point x = 3 is feasible and can
        // be made stationary by the pair y = (2, -8): 2*3 + 2 - 8 = 0. But
        // y[0] > 0 pushes on row 0's missing upper bound and y[1] < 0 on row
        // 1's missing lower bound, so the pair proves nothing and the audit
        // must reject it; the optimum is x = 1.
        let p = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            DMatrix::from_element(2, 1, 1.0),
            DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![f64::INFINITY, 3.0]),
            0.0,
        )
        .unwrap();
        let r = p.kkt_residuals(
            &DVector::from_element(1, 3.0),
            &DVector::from_vec(vec![2.0, -8.0]),
        );
        assert!(r.primal <= 1e-12 && r.dual <= 1e-12, "{r:?}");
        assert!(r.complementarity >= 8.0 - 1e-12, "{r:?}");
    }

    #[test]
    fn validation_rejects_malformed_data() {
        let ok = |h: DMatrix<f64>, g, c, l, u| QpProblem::new(h, g, c, l, u, 0.0);
        assert_eq!(
            ok(
                DMatrix::zeros(0, 0),
                DVector::zeros(0),
                DMatrix::zeros(0, 0),
                DVector::zeros(0),
                DVector::zeros(0),
            )
            .unwrap_err(),
            SolveError::Dimension("H/g/C")
        );
        assert_eq!(
            ok(
                DMatrix::identity(2, 2),
                DVector::zeros(1),
                DMatrix::zeros(0, 2),
                DVector::zeros(0),
                DVector::zeros(0),
            )
            .unwrap_err(),
            SolveError::Dimension("H/g/C")
        );
        let mut asym = DMatrix::identity(2, 2);
        asym[(0, 1)] = 1.0;
        assert_eq!(
            ok(
                asym,
                DVector::zeros(2),
                DMatrix::zeros(0, 2),
                DVector::zeros(0),
                DVector::zeros(0),
            )
            .unwrap_err(),
            SolveError::NotSymmetric
        );
        assert_eq!(
            QpProblem::new(
                DMatrix::identity(1, 1),
                DVector::from_element(1, f64::NAN),
                DMatrix::zeros(0, 1),
                DVector::zeros(0),
                DVector::zeros(0),
                0.0,
            )
            .unwrap_err(),
            SolveError::NotANumber("problem data")
        );
        assert_eq!(
            scalar_problem_checked(1.0, 0.0, 2.0, 1.0).unwrap_err(),
            SolveError::CrossedBounds(0)
        );
    }

    fn scalar_problem_checked(h: f64, g: f64, l: f64, u: f64) -> Result<QpProblem, SolveError> {
        QpProblem::new(
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, g),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, l),
            DVector::from_element(1, u),
            0.0,
        )
    }
}
