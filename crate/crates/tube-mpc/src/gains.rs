//! Discrete-time Riccati synthesis and terminal-set machinery.
//!
//! [`solve_dare`] computes the stabilizing solution of
//!
//! ```text
//! P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q
//! ```
//!
//! by the structure-preserving doubling iteration, then forms
//! `K = -(R + B'PB)^-1 B'PA`. Every synthesis is verified before it is
//! returned: residual norm, closed-loop spectral radius, and the exact
//! closed-loop identity `(A+BK)'P(A+BK) - P = -(Q + K'RK)` that yields the
//! terminal cost decrease.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::plant::Bounds;
use crate::{GainMat, StateMat, StateVec, NU, NX};

#[derive(Debug, Error, PartialEq)]
pub enum GainError {
    #[error("dimension mismatch: A is {a_rows}x{a_cols}, B is {b_rows}x{b_cols}")]
    Dimension {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("R must be symmetric positive definite")]
    InputWeightNotPd,
    #[error("Q must be symmetric positive semidefinite")]
    StateWeightNotPsd,
    #[error("(A, B) is not stabilizable (mode with |lambda| = {modulus:.6} fails the rank test)")]
    NotStabilizable { modulus: f64 },
    #[error("doubling iteration did not converge within {0} iterations")]
    Diverged(usize),
    #[error("Riccati residual {0:.3e} exceeds the acceptance threshold")]
    ResidualTooLarge(f64),
    #[error("closed loop is not contractive: spectral radius {0:.6}")]
    NotContractive(f64),
    #[error("terminal radius collapsed below {0:.1e}")]
    TerminalCollapsed(f64),
}

/// Outcome of a verified Riccati synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Frobenius norm of the Riccati residual at `p`.
    pub residual: f64,
    /// Spectral radius of `A + B K`.
    pub closed_loop_radius: f64,
}

const MAX_DOUBLING_ITERS: usize = 200;
const RESIDUAL_ACCEPT: f64 = 1e-8;

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * (1.0 + m[(i, j)].abs())))
}

/// Spectral radius via the complex eigenvalues of the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// PBH stabilizability test: every eigenvalue of `A` with modulus >= 1 must
/// leave `[A - lambda I, B]` at full row rank.
fn check_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), GainError> {
    let n = a.nrows();
    let eigs = a.clone().complex_eigenvalues();
    let scale = a.norm().max(b.norm()).max(1.0);
    for lam in eigs.iter() {
        if lam.norm() < 1.0 - 1e-9 {
            continue;
        }
        let mut pencil = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                pencil[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            pencil[(i, i)] -= lam;
            for j in 0..b.ncols() {
                pencil[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pencil.svd(false, false).singular_values;
        if sv[sv.len() - 1] <= 1e-9 * scale {
            return Err(GainError::NotStabilizable { modulus: lam.norm() });
        }
    }
    Ok(())
}

fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let btpb = r + b.transpose() * p * b;
    let btpa = b.transpose() * p * a;
    let gain_term = btpa.transpose()
        * btpb
            .clone()
            .cholesky()
            .map(|c| c.solve(&btpa))
            .unwrap_or_else(|| btpb.lu().solve(&btpa).expect("R + B'PB invertible"));
    a.transpose() * p * a - p - gain_term + q
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution, GainError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(GainError::Dimension {
            a_rows: a.nrows(),
            a_cols: a.ncols(),
            b_rows: b.nrows(),
            b_cols: b.ncols(),
        });
    }
    let m = b.ncols();
    if r.nrows() != m || r.ncols() != m {
        return Err(GainError::Dimension {
            a_rows: a.nrows(),
            a_cols: a.ncols(),
            b_rows: b.nrows(),
            b_cols: b.ncols(),
        });
    }
    if !is_symmetric(r, 1e-10) {
        return Err(GainError::InputWeightNotPd);
    }
    let r_chol = r.clone().cholesky().ok_or(GainError::InputWeightNotPd)?;
    if !is_symmetric(q, 1e-10) {
        return Err(GainError::StateWeightNotPsd);
    }
    // PSD check with a small shift to tolerate roundoff on the boundary.
    let shifted = q + DMatrix::identity(n, n) * (1e-12 * (1.0 + q.norm()));
    if shifted.cholesky().is_none() {
        return Err(GainError::StateWeightNotPsd);
    }
    check_stabilizable(a, b)?;

    // Doubling iteration on (A_k, G_k, H_k); H_k converges to P quadratically.
    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..MAX_DOUBLING_ITERS {
        // M = (I + G_k H_k)^-1; then
        //   A+ = A M A,  G+ = G + A (M G) A',  H+ = H + A' (H M) A.
        let w_lu = (&eye + &gk * &hk).lu();
        let Some(m) = w_lu.try_inverse() else {
            return Err(GainError::Diverged(MAX_DOUBLING_ITERS));
        };
        let a_next = &ak * &m * &ak;
        let g_next = &gk + &ak * &m * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &m * &ak;
        let step = (&h_next - &hk).norm();
        ak = a_next;
        gk = symmetrize(g_next);
        hk = symmetrize(h_next);
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(GainError::Diverged(MAX_DOUBLING_ITERS));
        }
        if step <= 1e-14 * hk.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GainError::Diverged(MAX_DOUBLING_ITERS));
    }

    let p = hk;
    let btpb = r + b.transpose() * &p * b;
    let btpa = b.transpose() * &p * a;
    let k = -btpb
        .clone()
        .cholesky()
        .ok_or(GainError::InputWeightNotPd)?
        .solve(&btpa);

    let residual = dare_residual(a, b, q, r, &p).norm();
    if !(residual < RESIDUAL_ACCEPT) {
        return Err(GainError::ResidualTooLarge(residual));
    }
    let closed_loop_radius = spectral_radius(&(a + b * &k));
    if !(closed_loop_radius < 1.0) {
        return Err(GainError::NotContractive(closed_loop_radius));
    }
    Ok(DareSolution {
        p,
        k,
        residual,
        closed_loop_radius,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Diagonal stage cost weights plus the terminal-slack penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// Diagonal of the state weight Q.
    pub q: StateVec,
    /// Diagonal of the input weight R.
    pub r: crate::InputVec,
    /// Linear penalty on the terminal-ball slack variable.
    pub slack_weight: f64,
}

impl CostWeights {
    pub fn benchmark() -> Self {
        Self {
            q: StateVec::repeat(0.1),
            r: crate::InputVec::repeat(0.01),
            slack_weight: 1e4,
        }
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(NX, self.q.iter().copied()))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(NU, self.r.iter().copied()))
    }
}

/// Verified ancillary gain and terminal weight for one linearization anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub k: GainMat,
    pub p: StateMat,
    pub residual: f64,
    pub closed_loop_radius: f64,
}

impl GainSet {
    /// Terminal value `x' P x`.
    pub fn terminal_cost(&self, x_err: &StateVec) -> f64 {
        (x_err.transpose() * self.p * x_err)[0]
    }
}

/// Synthesize the ancillary gain for a discrete pair `(A, B)`.
pub fn synthesize(a: &StateMat, b: &crate::InputMat, weights: &CostWeights) -> Result<GainSet, GainError> {
    let ad = DMatrix::from_fn(NX, NX, |i, j| a[(i, j)]);
    let bd = DMatrix::from_fn(NX, NU, |i, j| b[(i, j)]);
    let sol = solve_dare(&ad, &bd, &weights.q_matrix(), &weights.r_matrix())?;
    Ok(GainSet {
        k: GainMat::from_fn(|i, j| sol.k[(i, j)]),
        p: StateMat::from_fn(|i, j| sol.p[(i, j)]),
        residual: sol.residual,
        closed_loop_radius: sol.closed_loop_radius,
    })
}

/// Max over sampled points of the terminal decrease slack
/// `V(x+) - V(x) + x'(Q + K'RK)x` with `x+ = (A + BK)x`; nonpositive slack
/// certifies the decrease on the sample set.
pub fn decrease_slack(
    a: &StateMat,
    b: &crate::InputMat,
    weights: &CostWeights,
    gains: &GainSet,
    radius: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let closed = a + b * gains.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let dir = StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = dir.norm();
        if n < 1e-9 {
            continue;
        }
        let x = dir * (radius * rng.random_range(0.0..1.0) / n);
        let xp = closed * x;
        let v_next = (xp.transpose() * gains.p * xp)[0];
        let v = (x.transpose() * gains.p * x)[0];
        let u = gains.k * x;
        let stage: f64 = (0..NX).map(|i| weights.q[i] * x[i] * x[i]).sum::<f64>()
            + (0..NU).map(|i| weights.r[i] * u[i] * u[i]).sum::<f64>();
        worst = worst.max(v_next - v + stage);
    }
    worst
}

/// Largest `epsilon` such that every sampled boundary point `|x|_P = epsilon`
/// keeps `Kx` inside the (error-coordinate) input box and `x` inside the
/// (error-coordinate) state box. Both boxes must contain the origin. The
/// result is capped at `cap` and must stay above 1e-9.
pub fn terminal_radius(
    gains: &GainSet,
    input_box: &Bounds<NU>,
    state_box: &Bounds<NX>,
    cap: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, GainError> {
    let chol = DMatrix::from_fn(NX, NX, |i, j| gains.p[(i, j)])
        .cholesky()
        .ok_or(GainError::StateWeightNotPsd)?;
    // x = eps * L^-T y with |y| = 1 gives |x|_P = eps.
    let l_t = chol.l().transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = cap;
    for _ in 0..samples {
        let dir = DVector::from_fn(NX, |_, _| rng.random_range(-1.0..1.0f64));
        let n = dir.norm();
        if n < 1e-9 {
            continue;
        }
        let y = dir / n;
        let x_unit = l_t
            .clone()
            .lu()
            .solve(&y)
            .ok_or(GainError::StateWeightNotPsd)?;
        let x_unit = StateVec::from_fn(|i, _| x_unit[i]);
        let u_unit = gains.k * x_unit;
        // Largest scale keeping `scale * g` within [lo, hi] per coordinate.
        let mut allowed = cap;
        for i in 0..NU {
            allowed = allowed.min(axis_scale(u_unit[i], input_box.lower[i], input_box.upper[i]));
        }
        for i in 0..NX {
            allowed = allowed.min(axis_scale(x_unit[i], state_box.lower[i], state_box.upper[i]));
        }
        eps = eps.min(allowed);
    }
    if eps < 1e-9 {
        return Err(GainError::TerminalCollapsed(1e-9));
    }
    Ok(eps)
}

fn axis_scale(g: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= 0.0 && hi >= 0.0, "error-coordinate box must contain 0");
    if g > 0.0 {
        hi / g
    } else if g < 0.0 {
        lo / g
    } else {
        f64::INFINITY
    }
}
