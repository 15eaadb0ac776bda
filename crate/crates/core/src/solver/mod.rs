//! Conjugate gradients, eigenvalue estimation and preconditioners.

mod chebyshev;
mod gmg;

pub use chebyshev::ChebyshevSmoother;
pub use gmg::{GmgConfig, GmgPreconditioner, Transfer};

use crate::mf_operator::LinearOperator;
use crate::scalar::{dot, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Seed of the start vector used for eigenvalue estimates.
pub const LANCZOS_SEED: u64 = 0x5eed_1a2c;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("operator is not positive definite: <p, Ap> = {curvature:e} at iteration {iteration}")]
    Indefinite { iteration: usize, curvature: f64 },
    #[error("non-finite residual at iteration {0}")]
    NonFinite(usize),
    #[error("vector length {got} does not match operator size {expected}")]
    Size { expected: usize, got: usize },
}

pub trait Preconditioner<T> {
    /// `z = P^{-1} r`
    fn apply(&mut self, r: &[T], z: &mut [T]);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl<T: Scalar> Preconditioner<T> for Identity {
    fn apply(&mut self, r: &[T], z: &mut [T]) {
        z.copy_from_slice(r);
    }
}

/// Point Jacobi: `z = D^{-1} r`.
#[derive(Debug, Clone)]
pub struct Jacobi<T> {
    inv_diag: Vec<T>,
}

impl<T: Scalar> Jacobi<T> {
    pub fn new(diag: &[T]) -> Self {
        Self {
            inv_diag: diag.iter().map(|d| T::one() / *d).collect(),
        }
    }
}

impl<T: Scalar> Preconditioner<T> for Jacobi<T> {
    fn apply(&mut self, r: &[T], z: &mut [T]) {
        for ((zi, ri), d) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = *ri * *d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub tol_abs: f64,
    /// Relative to `||b||`; the stopping threshold is the larger of the two.
    pub tol_rel: f64,
    /// Relative to the initial residual `||b - A x_0||`.
    pub tol_reduction: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol_abs: 1e-15,
            tol_rel: 1e-12,
            tol_reduction: 0.0,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub iterations: usize,
    pub converged: bool,
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Euclidean residual norm after every iteration, starting with the initial one.
    pub history: Vec<f64>,
}

/// (Preconditioned) conjugate gradients on `A x = b`, starting from `x`.
pub fn cg_solve<T: Scalar>(
    op: &dyn LinearOperator<T>,
    b: &[T],
    x: &mut [T],
    cfg: &CgConfig,
    precond: Option<&mut dyn Preconditioner<T>>,
) -> Result<CgResult, SolverError> {
    cg_impl(op, b, x, cfg, precond, None)
}

/// CG recurrence coefficients, kept for Lanczos estimates.
struct Recorder {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn cg_impl<T: Scalar>(
    op: &dyn LinearOperator<T>,
    b: &[T],
    x: &mut [T],
    cfg: &CgConfig,
    mut precond: Option<&mut dyn Preconditioner<T>>,
    mut rec: Option<&mut Recorder>,
) -> Result<CgResult, SolverError> {
    let n = op.n_rows();
    for len in [b.len(), x.len()] {
        if len != n {
            return Err(SolverError::Size { expected: n, got: len });
        }
    }
    let mut r = vec![T::zero(); n];
    op.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = *bi - *ri;
    }
    let bnorm = dot(b, b).sqrt().as_f64();
    let mut rnorm = dot(&r, &r).sqrt().as_f64();
    let threshold = cfg.tol_abs.max(cfg.tol_rel * bnorm).max(cfg.tol_reduction * rnorm);
    let mut history = vec![rnorm];
    let initial = rnorm;
    if rnorm <= threshold {
        return Ok(CgResult {
            iterations: 0,
            converged: true,
            initial_residual: initial,
            final_residual: rnorm,
            history,
        });
    }
    let mut z = vec![T::zero(); n];
    let mut q = vec![T::zero(); n];
    let mut precondition = |r: &[T], z: &mut [T]| match precond.as_deref_mut() {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    };
    precondition(&r, &mut z);
    let mut d = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=cfg.max_iter {
        op.apply(&d, &mut q);
        let curv = dot(&d, &q);
        if !(curv > T::zero()) {
            if !curv.is_finite() {
                return Err(SolverError::NonFinite(it));
            }
            return Err(SolverError::Indefinite {
                iteration: it,
                curvature: curv.as_f64(),
            });
        }
        let alpha = rz / curv;
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * q[i];
        }
        rnorm = dot(&r, &r).sqrt().as_f64();
        history.push(rnorm);
        if !rnorm.is_finite() {
            return Err(SolverError::NonFinite(it));
        }
        if let Some(rec) = rec.as_deref_mut() {
            rec.alpha.push(alpha.as_f64());
        }
        if rnorm <= threshold {
            return Ok(CgResult {
                iterations: it,
                converged: true,
                initial_residual: initial,
                final_residual: rnorm,
                history,
            });
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        if let Some(rec) = rec.as_deref_mut() {
            rec.beta.push(beta.as_f64());
        }
        rz = rz_new;
        for i in 0..n {
            d[i] = z[i] + beta * d[i];
        }
    }
    Ok(CgResult {
        iterations: cfg.max_iter,
        converged: false,
        initial_residual: initial,
        final_residual: rnorm,
        history,
    })
}

/// Largest Ritz value of `D^{-1} A` from `n_iter` Jacobi-preconditioned CG
/// iterations on a fixed pseudo-random right-hand side.
pub fn estimate_lambda_max<T: Scalar>(op: &dyn LinearOperator<T>, diag: &[T], n_iter: usize) -> f64 {
    let n = op.n_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(LANCZOS_SEED);
    let b: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    let mut x = vec![T::zero(); n];
    let mut jac = Jacobi::new(diag);
    let mut rec = Recorder {
        alpha: Vec::new(),
        beta: Vec::new(),
    };
    let cfg = CgConfig {
        tol_abs: 0.0,
        tol_rel: 1e-14,
        tol_reduction: 0.0,
        max_iter: n_iter,
    };
    // breakdown (exact convergence or lost definiteness) leaves the recorded prefix
    let _ = cg_impl(op, &b, &mut x, &cfg, Some(&mut jac), Some(&mut rec));
    let k = rec.alpha.len();
    if k == 0 {
        return 1.0;
    }
    let mut diag_t = vec![0.0; k];
    let mut off = vec![0.0; k.saturating_sub(1)];
    for j in 0..k {
        diag_t[j] = 1.0 / rec.alpha[j];
        if j > 0 {
            diag_t[j] += rec.beta[j - 1] / rec.alpha[j - 1];
            off[j - 1] = rec.beta[j - 1].sqrt() / rec.alpha[j - 1];
        }
    }
    tridiagonal_max_eigenvalue(&diag_t, &off)
}

/// Largest eigenvalue of a symmetric tridiagonal matrix by Sturm bisection.
pub fn tridiagonal_max_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let k = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < k { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    // number of eigenvalues strictly below s
    let count_below = |s: f64| {
        let mut c = 0;
        let mut q = 1.0;
        for i in 0..k {
            let o2 = if i > 0 { off[i - 1] * off[i - 1] } else { 0.0 };
            q = diag[i] - s - if i > 0 { o2 / q } else { 0.0 };
            if q == 0.0 {
                q = -f64::EPSILON * (diag[i].abs() + 1.0);
            }
            if q < 0.0 {
                c += 1;
            }
        }
        c
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) < k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Diag(Vec<f64>);

    impl LinearOperator<f64> for Diag {
        fn n_rows(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            for i in 0..x.len() {
                y[i] = self.0[i] * x[i];
            }
        }
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        let op = Diag(vec![1.0, 2.0]);
        let mut x = vec![0.0; 2];
        let r = cg_solve(&op, &[0.0, 0.0], &mut x, &CgConfig::default(), None).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn two_by_two() {
        let op = Diag(vec![1.0, 2.0]);
        let mut x = vec![0.0; 2];
        let r = cg_solve(&op, &[1.0, 2.0], &mut x, &CgConfig::default(), None).unwrap();
        assert!(r.converged && r.iterations <= 2);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn detects_indefinite() {
        let op = Diag(vec![1.0, -2.0]);
        let mut x = vec![0.0; 2];
        let e = cg_solve(&op, &[0.0, 1.0], &mut x, &CgConfig::default(), None).unwrap_err();
        assert!(matches!(e, SolverError::Indefinite { iteration: 1, .. }));
    }

    #[test]
    fn lambda_max_of_diagonal() {
        let op = Diag((1..=10).map(|i| i as f64).collect());
        let l = estimate_lambda_max(&op, &[1.0; 10], 10);
        assert!((9.0..=10.0 + 1e-9).contains(&l), "{l}");
        let id = Diag(vec![1.0; 50]);
        let l = estimate_lambda_max(&id, &[1.0; 50], 10);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sturm_bisection() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3
        assert!((tridiagonal_max_eigenvalue(&[2.0, 2.0], &[1.0]) - 3.0).abs() < 1e-12);
        assert!((tridiagonal_max_eigenvalue(&[5.0], &[]) - 5.0).abs() < 1e-12);
    }
}
