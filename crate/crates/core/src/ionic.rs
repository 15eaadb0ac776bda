//! Pointwise membrane kinetics and their BDF update.
//!
//! Models expose `H` (gating), `G` (concentrations) and `I_ion` as pure
//! pointwise functions of `(u, w, z)`. [`step_ionic`] advances every DOF
//! independently by solving the implicit relation
//! `(alpha_0 y^{n+1} - sum_j beta_j y^{n-j}) / dt = F(u*, y^{n+1})`.

use crate::mf_operator::{MonodomainOperator, OperatorError};
use crate::scalar::Scalar;
use crate::stepper::Bdf;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IonicError {
    #[error("non-finite ionic state at dof {dof}: u = {u}, state = {state:?}")]
    NonFinite { dof: usize, u: f64, state: Vec<f64> },
    #[error("implicit ionic update did not converge at dof {dof} (residual {residual:e})")]
    Newton { dof: usize, residual: f64 },
    #[error("invalid parameter {name} = {value}: {reason}")]
    Parameter { name: &'static str, value: f64, reason: &'static str },
    #[error("state has {got} entries, expected {expected}")]
    Size { expected: usize, got: usize },
}

pub trait IonicModel<T: Scalar>: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn n_gating(&self) -> usize;
    fn n_concentration(&self) -> usize {
        0
    }

    /// `(u, w, z)` at rest.
    fn resting_state(&self) -> (T, Vec<T>, Vec<T>);

    /// Gating right-hand side `H(u, w, z)`.
    fn gating_rhs(&self, u: T, w: &[T], z: &[T], out: &mut [T]);

    /// Concentration right-hand side `G(u, w, z)`.
    fn concentration_rhs(&self, _u: T, _w: &[T], _z: &[T], _out: &mut [T]) {}

    /// Ionic current `I_ion(u, w, z)`, same units as `du/dt`.
    fn current(&self, u: T, w: &[T], z: &[T]) -> T;

    /// Admissible interval for gating variables, used for clamping.
    fn gating_bounds(&self) -> Option<(T, T)> {
        None
    }

    /// Solves `c y - F(u, y) = rhs` for `y = (w, z)`, where `F = (H, G)`.
    /// `w` and `z` carry the initial guess on entry. Returns Newton iterations.
    fn implicit_update(&self, u: T, c: T, rhs_w: &[T], rhs_z: &[T], w: &mut [T], z: &mut [T]) -> Result<usize, f64> {
        newton_update(self, u, c, rhs_w, rhs_z, w, z)
    }
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;

/// Damped Newton with a finite-difference Jacobian; the error value is the
/// final residual norm.
pub fn newton_update<T: Scalar, M: IonicModel<T> + ?Sized>(
    model: &M,
    u: T,
    c: T,
    rhs_w: &[T],
    rhs_z: &[T],
    w: &mut [T],
    z: &mut [T],
) -> Result<usize, f64> {
    let m = w.len();
    let dim = m + z.len();
    if dim == 0 {
        return Ok(0);
    }
    let mut y: Vec<T> = w.iter().chain(z.iter()).copied().collect();
    let rhs: Vec<T> = rhs_w.iter().chain(rhs_z.iter()).copied().collect();
    let mut fw = vec![T::zero(); m];
    let mut fz = vec![T::zero(); dim - m];
    let mut residual = |y: &[T], out: &mut [T]| {
        model.gating_rhs(u, &y[..m], &y[m..], &mut fw);
        model.concentration_rhs(u, &y[..m], &y[m..], &mut fz);
        for i in 0..dim {
            let f = if i < m { fw[i] } else { fz[i - m] };
            out[i] = c * y[i] - f - rhs[i];
        }
    };
    let norm = |r: &[T]| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    let scale = 1.0 + norm(&rhs);
    let mut r = vec![T::zero(); dim];
    let mut trial = vec![T::zero(); dim];
    let mut rt = vec![T::zero(); dim];
    let mut jac = vec![0.0; dim * dim];
    residual(&y, &mut r);
    let mut rn = norm(&r);
    for it in 0..NEWTON_MAX_ITER {
        if rn <= NEWTON_TOL * scale {
            w.copy_from_slice(&y[..m]);
            z.copy_from_slice(&y[m..]);
            return Ok(it);
        }
        for j in 0..dim {
            let h = 1e-7 * (1.0 + y[j].as_f64().abs());
            trial.copy_from_slice(&y);
            trial[j] += T::of(h);
            residual(&trial, &mut rt);
            for i in 0..dim {
                jac[i * dim + j] = (rt[i].as_f64() - r[i].as_f64()) / h;
            }
        }
        let mut step: Vec<f64> = r.iter().map(|v| -v.as_f64()).collect();
        if !solve_dense(&mut jac, &mut step, dim) {
            return Err(rn);
        }
        let mut lambda = 1.0;
        loop {
            for i in 0..dim {
                trial[i] = y[i] + T::of(lambda * step[i]);
            }
            residual(&trial, &mut rt);
            let tn = norm(&rt);
            if tn < rn || lambda < 1e-4 {
                y.copy_from_slice(&trial);
                r.copy_from_slice(&rt);
                rn = tn;
                break;
            }
            lambda *= 0.5;
        }
    }
    if rn <= NEWTON_TOL * scale {
        w.copy_from_slice(&y[..m]);
        z.copy_from_slice(&y[m..]);
        return Ok(NEWTON_MAX_ITER);
    }
    Err(rn)
}

/// Gaussian elimination with partial pivoting; false if singular.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if a[piv * n + col].abs() < 1e-300 {
            return false;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * b[k];
        }
        b[row] = s / a[row * n + row];
    }
    true
}

/// Two-variable excitable kinetics with cubic reaction (Aliev-Panfilov type):
///
/// `I_ion = (k u (u - a)(u - 1) + u w) / tau`,
/// `H = eps(u, w) (-w - k u (u - a - 1)) / tau`,
/// `eps = eps0 + mu1 w / (u + mu2)`.
///
/// `u` is dimensionless (0 at rest, about 1 when excited) and `tau` converts
/// model time to milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Surrogate {
    pub k: f64,
    pub a: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Milliseconds per model time unit.
    pub tau_ms: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self {
            k: 8.0,
            a: 0.15,
            eps0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
            tau_ms: 1.0,
        }
    }
}

/// Resting and peak potential of the mV rescaling.
pub const REST_MV: f64 = -85.0;
pub const PEAK_MV: f64 = 40.0;

pub fn to_millivolts(u: f64) -> f64 {
    REST_MV + (PEAK_MV - REST_MV) * u
}

/// Converts a stimulus rate in mV/ms to dimensionless units per ms.
pub fn rate_from_millivolts(mv_per_ms: f64) -> f64 {
    mv_per_ms / (PEAK_MV - REST_MV)
}

impl Surrogate {
    pub fn validate(&self) -> Result<(), IonicError> {
        let check = |name, value: f64, ok: bool, reason| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(IonicError::Parameter { name, value, reason })
            }
        };
        check("k", self.k, self.k > 0.0, "must be positive")?;
        check("a", self.a, self.a > 0.0 && self.a < 0.5, "must lie in (0, 0.5)")?;
        check("eps0", self.eps0, self.eps0 > 0.0, "must be positive")?;
        check("mu1", self.mu1, self.mu1 >= 0.0, "must be non-negative")?;
        check("mu2", self.mu2, self.mu2 > 0.0, "must be positive")?;
        check("tau_ms", self.tau_ms, self.tau_ms > 0.0, "must be positive")?;
        Ok(())
    }

    /// Time for a single cell kicked to `u = 0.3` to return to `|u| < 1e-3`,
    /// measured with the default shape parameters; it scales with `tau_ms`.
    pub fn action_potential_duration(&self) -> f64 {
        28.7 * self.tau_ms
    }

    /// Upper gating bound: the largest value of `-k u (u - a - 1)`.
    pub fn w_max(&self) -> f64 {
        self.k * (1.0 + self.a) * (1.0 + self.a) / 4.0
    }
}

impl<T: Scalar> IonicModel<T> for Surrogate {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn n_gating(&self) -> usize {
        1
    }

    fn resting_state(&self) -> (T, Vec<T>, Vec<T>) {
        (T::zero(), vec![T::zero()], Vec::new())
    }

    fn gating_rhs(&self, u: T, w: &[T], _z: &[T], out: &mut [T]) {
        let (k, a) = (T::of(self.k), T::of(self.a));
        let eps = T::of(self.eps0) + T::of(self.mu1) * w[0] / (u + T::of(self.mu2));
        out[0] = eps * (-w[0] - k * u * (u - a - T::one())) / T::of(self.tau_ms);
    }

    fn current(&self, u: T, w: &[T], _z: &[T]) -> T {
        let (k, a) = (T::of(self.k), T::of(self.a));
        (k * u * (u - a) * (u - T::one()) + u * w[0]) / T::of(self.tau_ms)
    }

    fn gating_bounds(&self) -> Option<(T, T)> {
        Some((T::zero(), T::of(self.w_max())))
    }

    /// `H` is quadratic in `w`, so the implicit relation is a scalar
    /// quadratic; the root continuous with the linear (`mu1 = 0`) case is taken.
    fn implicit_update(&self, u: T, c: T, rhs_w: &[T], rhs_z: &[T], w: &mut [T], z: &mut [T]) -> Result<usize, f64> {
        let tau = T::of(self.tau_ms);
        let ct = c * tau;
        let hist = rhs_w[0] * tau;
        let g = T::of(self.k) * u * (u - T::of(self.a) - T::one());
        let eps0 = T::of(self.eps0);
        let den = u + T::of(self.mu2);
        if den > T::zero() {
            let qa = T::of(self.mu1) / den;
            let qb = ct + eps0 + qa * g;
            let qc = eps0 * g - hist;
            let disc = qb * qb - T::of(4.0) * qa * qc;
            if qb > T::zero() && disc >= T::zero() {
                w[0] = -T::of(2.0) * qc / (qb + disc.sqrt());
                return Ok(0);
            }
        }
        newton_update(self, u, c, rhs_w, rhs_z, w, z)
    }
}

/// No membrane current: pure diffusion.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Passive;

impl<T: Scalar> IonicModel<T> for Passive {
    fn name(&self) -> &str {
        "passive"
    }

    fn n_gating(&self) -> usize {
        0
    }

    fn resting_state(&self) -> (T, Vec<T>, Vec<T>) {
        (T::zero(), Vec::new(), Vec::new())
    }

    fn gating_rhs(&self, _u: T, _w: &[T], _z: &[T], _out: &mut [T]) {}

    fn current(&self, _u: T, _w: &[T], _z: &[T]) -> T {
        T::zero()
    }
}

/// Per-DOF gating and concentration variables with BDF history.
#[derive(Debug, Clone, PartialEq)]
pub struct IonicState<T> {
    pub n_dofs: usize,
    pub n_gating: usize,
    pub n_concentration: usize,
    /// Current level, `dof * n_gating + j`.
    pub w: Vec<T>,
    pub z: Vec<T>,
    /// Older levels, most recent first.
    pub history: Vec<(Vec<T>, Vec<T>)>,
    /// Number of gating values clamped into their bounds so far.
    pub clamped: u64,
}

impl<T: Scalar> IonicState<T> {
    pub fn resting<M: IonicModel<T> + ?Sized>(model: &M, n_dofs: usize) -> Self {
        let (_, w0, z0) = model.resting_state();
        Self {
            n_dofs,
            n_gating: w0.len(),
            n_concentration: z0.len(),
            w: w0.iter().copied().cycle().take(n_dofs * w0.len()).collect(),
            z: z0.iter().copied().cycle().take(n_dofs * z0.len()).collect(),
            history: Vec::new(),
            clamped: 0,
        }
    }

    /// Gating variable `j` of every DOF.
    pub fn gating(&self, j: usize) -> impl Iterator<Item = T> + '_ {
        self.w.iter().skip(j).step_by(self.n_gating.max(1)).copied()
    }

    fn push_history(&mut self, depth: usize) {
        if depth == 0 {
            self.history.clear();
            return;
        }
        self.history.insert(0, (self.w.clone(), self.z.clone()));
        self.history.truncate(depth);
    }
}

/// Advances the ionic state by one step of `scheme` and writes
/// `I_ion(u*, w^{n+1}, z^{n+1})` into `i_ion`.
pub fn step_ionic<T: Scalar, M: IonicModel<T> + ?Sized>(
    model: &M,
    state: &mut IonicState<T>,
    u_star: &[T],
    dt: T,
    scheme: Bdf,
    i_ion: &mut [T],
) -> Result<(), IonicError> {
    let n = state.n_dofs;
    for len in [u_star.len(), i_ion.len()] {
        if len != n {
            return Err(IonicError::Size { expected: n, got: len });
        }
    }
    let order = scheme.order().min(state.history.len() + 1);
    let (alpha0, beta) = Bdf::from_order(order).coefficients();
    let c = T::of(alpha0) / dt;
    let (m, p) = (state.n_gating, state.n_concentration);
    let mut new_w = state.w.clone();
    let mut new_z = state.z.clone();
    let bounds = model.gating_bounds();
    let hist = &state.history;
    let (w_now, z_now) = (&state.w, &state.z);
    let chunk = 512;
    let n_chunks = n.div_ceil(chunk);
    let w_chunks = split_chunks(&mut new_w, chunk, m, n_chunks);
    let z_chunks = split_chunks(&mut new_z, chunk, p, n_chunks);
    let clamped: u64 = w_chunks
        .into_par_iter()
        .zip(z_chunks)
        .zip(i_ion.par_chunks_mut(chunk))
        .enumerate()
        .map(|(ci, ((wc, zc), ic))| -> Result<u64, IonicError> {
            let mut rw = vec![T::zero(); m];
            let mut rz = vec![T::zero(); p];
            let mut clamped = 0;
            for (li, cur) in ic.iter_mut().enumerate() {
                let i = ci * chunk + li;
                let u = u_star[i];
                for j in 0..m {
                    let mut s = T::of(beta[0]) * w_now[i * m + j];
                    for (b, (hw, _)) in beta[1..].iter().zip(hist) {
                        s += T::of(*b) * hw[i * m + j];
                    }
                    rw[j] = s / dt;
                }
                for j in 0..p {
                    let mut s = T::of(beta[0]) * z_now[i * p + j];
                    for (b, (_, hz)) in beta[1..].iter().zip(hist) {
                        s += T::of(*b) * hz[i * p + j];
                    }
                    rz[j] = s / dt;
                }
                let w = &mut wc[li * m..(li + 1) * m];
                let z = &mut zc[li * p..(li + 1) * p];
                model
                    .implicit_update(u, c, &rw, &rz, w, z)
                    .map_err(|residual| IonicError::Newton { dof: i, residual })?;
                if let Some((lo, hi)) = bounds {
                    for v in w.iter_mut() {
                        if *v < lo || *v > hi {
                            *v = v.max(lo).min(hi);
                            clamped += 1;
                        }
                    }
                }
                *cur = model.current(u, w, z);
                if !cur.is_finite() || w.iter().chain(z.iter()).any(|v| !v.is_finite()) {
                    return Err(IonicError::NonFinite {
                        dof: i,
                        u: u.as_f64(),
                        state: w.iter().chain(z.iter()).map(|v| v.as_f64()).collect(),
                    });
                }
            }
            Ok(clamped)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    state.push_history(2);
    state.w = new_w;
    state.z = new_z;
    state.clamped += clamped;
    Ok(())
}

/// Per-chunk slices of a DOF-major field with `width` entries per DOF.
fn split_chunks<T>(v: &mut [T], chunk: usize, width: usize, n_chunks: usize) -> Vec<&mut [T]> {
    if width == 0 {
        (0..n_chunks).map(|_| &mut [][..]).collect()
    } else {
        v.chunks_mut(chunk * width).collect()
    }
}

/// Ionic current interpolation: `s = -M I_ion` with the operator's mass.
pub fn ici_rhs<T: Scalar>(i_ion: &[T], mass: &MonodomainOperator<T>, out: &mut [T]) -> Result<(), OperatorError> {
    mass.mass_apply(i_ion, out)?;
    for v in out.iter_mut() {
        *v = -*v;
    }
    Ok(())
}

/// Single-cell trace from the partitioned scheme without diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTrace {
    pub dt: f64,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl CellTrace {
    /// First time after the upstroke at which `u` falls below `level`.
    pub fn return_time(&self, level: f64) -> Option<f64> {
        let peak = self.u.iter().position(|&u| u > 0.5)?;
        self.u[peak..].iter().position(|&u| u.abs() < level).map(|i| (peak + i) as f64 * self.dt)
    }
}

/// Integrates one cell from `u(0) = u0` at rest gating, with the same
/// extrapolated semi-implicit BDF scheme used in the tissue solver.
pub fn simulate_cell<M: IonicModel<f64> + ?Sized>(model: &M, u0: f64, dt: f64, t_final: f64, scheme: Bdf) -> Result<CellTrace, IonicError> {
    let mut state = IonicState::resting(model, 1);
    let steps = (t_final / dt).round() as usize;
    let mut us = vec![u0];
    let mut ws = vec![state.w.first().copied().unwrap_or(0.0)];
    let mut cur = [0.0];
    for _ in 0..steps {
        let order = scheme.order().min(us.len());
        let s = Bdf::from_order(order);
        let u_star = s.extrapolate(&us);
        step_ionic(model, &mut state, &[u_star], dt, s, &mut cur)?;
        let (alpha0, beta) = s.coefficients();
        let mut rhs = 0.0;
        for (j, b) in beta.iter().enumerate() {
            rhs += b * us[us.len() - 1 - j];
        }
        let u_new = (rhs - dt * cur[0]) / alpha0;
        us.push(u_new);
        ws.push(state.w.first().copied().unwrap_or(0.0));
    }
    Ok(CellTrace { dt, u: us, w: ws })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resting_and_plateau_roots() {
        let m = Surrogate::default();
        let mut h = [0.0];
        IonicModel::<f64>::gating_rhs(&m, 0.0, &[0.0], &[], &mut h);
        assert_eq!(h[0], 0.0);
        assert_eq!(IonicModel::<f64>::current(&m, 0.0, &[0.0], &[]), 0.0);
        assert_eq!(IonicModel::<f64>::current(&m, 1.0, &[0.0], &[]), 0.0);
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let m = Surrogate::default();
        for dt in [0.01, 0.1, 1.0] {
            for scheme in [Bdf::One, Bdf::Two, Bdf::Three] {
                let mut s = IonicState::<f64>::resting(&m, 4);
                let mut cur = vec![1.0f64; 4];
                for _ in 0..5 {
                    step_ionic(&m, &mut s, &[0.0; 4], dt, scheme, &mut cur).unwrap();
                }
                assert!(s.w.iter().all(|w| w.abs() < 1e-12));
                assert!(cur.iter().all(|c| c.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn closed_form_matches_newton() {
        let m = Surrogate::default();
        for &(u, c, r) in &[(0.3, 15.0, 0.7), (0.9, 20.0, 30.0), (-0.05, 10.0, 0.1), (0.5, 1.0, 2.0)] {
            let mut w1 = [0.2];
            let mut w2 = [0.2];
            IonicModel::<f64>::implicit_update(&m, u, c, &[r], &[], &mut w1, &mut []).unwrap();
            newton_update::<f64, Surrogate>(&m, u, c, &[r], &[], &mut w2, &mut []).unwrap();
            assert!((w1[0] - w2[0]).abs() < 1e-9, "{u} {c} {r}: {} {}", w1[0], w2[0]);
        }
    }

    #[test]
    fn returns_to_rest_after_documented_duration() {
        for tau_ms in [1.0, 3.0] {
            let m = Surrogate { tau_ms, ..Surrogate::default() };
            let apd = m.action_potential_duration();
            for dt in [0.01, 0.1] {
                let tr = simulate_cell(&m, 0.3, dt, 4.0 * apd, Bdf::Two).unwrap();
                let back = tr.return_time(1e-3).unwrap();
                assert!((back - apd).abs() < 0.2 * apd, "{back} vs {apd}");
                assert!(tr.u.iter().cloned().fold(0.0, f64::max) > 0.95);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = Surrogate { a: 0.7, ..Surrogate::default() };
        assert!(matches!(m.validate(), Err(IonicError::Parameter { name: "a", .. })));
        let m = Surrogate { tau_ms: 0.0, ..Surrogate::default() };
        assert!(m.validate().is_err());
        assert!(Surrogate::default().validate().is_ok());
    }

    #[test]
    fn millivolt_scaling() {
        assert_eq!(to_millivolts(0.0), -85.0);
        assert_eq!(to_millivolts(1.0), 40.0);
        assert!((rate_from_millivolts(15.0) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn size_mismatch() {
        let m = Surrogate::default();
        let mut s = IonicState::resting(&m, 3);
        let mut cur = vec![0.0; 2];
        assert!(matches!(step_ionic(&m, &mut s, &[0.0; 3], 0.1, Bdf::Two, &mut cur), Err(IonicError::Size { .. })));
    }
}
