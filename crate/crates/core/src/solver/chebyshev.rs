use super::estimate_lambda_max;
use crate::mf_operator::LinearOperator;
use crate::scalar::Scalar;

/// Chebyshev iteration on `D^{-1} A` targeting the eigenvalue interval
/// `[lo * lambda_max, hi * lambda_max]`.
#[derive(Debug, Clone)]
pub struct ChebyshevSmoother<T> {
    pub degree: usize,
    pub lambda_max: f64,
    pub lo: f64,
    pub hi: f64,
    inv_diag: Vec<T>,
    r: Vec<T>,
    d: Vec<T>,
    q: Vec<T>,
}

impl<T: Scalar> ChebyshevSmoother<T> {
    pub fn new(diag: &[T], lambda_max: f64, degree: usize) -> Self {
        let n = diag.len();
        Self {
            degree: degree.max(1),
            lambda_max,
            lo: 0.08,
            hi: 1.2,
            inv_diag: diag.iter().map(|d| T::one() / *d).collect(),
            r: vec![T::zero(); n],
            d: vec![T::zero(); n],
            q: vec![T::zero(); n],
        }
    }

    /// Estimates `lambda_max` with `lanczos_iters` CG steps on `op`.
    pub fn for_operator(op: &dyn LinearOperator<T>, diag: &[T], degree: usize, lanczos_iters: usize) -> Self {
        let l = estimate_lambda_max(op, diag, lanczos_iters);
        Self::new(diag, l, degree)
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.lo * self.lambda_max, self.hi * self.lambda_max)
    }

    /// Improves `x` for `A x = b`; `degree` operator applications.
    pub fn smooth(&mut self, op: &dyn LinearOperator<T>, b: &[T], x: &mut [T]) {
        op.apply(x, &mut self.r);
        for (ri, bi) in self.r.iter_mut().zip(b) {
            *ri = *bi - *ri;
        }
        self.iterate(op, x, None);
    }

    /// Smooths from `x = 0` and also returns the new residual `b - A x` in
    /// `residual`; `degree` operator applications.
    pub fn smooth_from_zero(&mut self, op: &dyn LinearOperator<T>, b: &[T], x: &mut [T], residual: &mut [T]) {
        x.fill(T::zero());
        self.r.copy_from_slice(b);
        self.iterate(op, x, Some(residual));
    }

    fn iterate(&mut self, op: &dyn LinearOperator<T>, x: &mut [T], residual: Option<&mut [T]>) {
        let (a, b) = self.interval();
        let theta = 0.5 * (b + a);
        let delta = 0.5 * (b - a);
        let sigma = theta / delta;
        let mut rho = 1.0 / sigma;
        let inv_theta = T::of(1.0 / theta);
        for ((d, r), s) in self.d.iter_mut().zip(&self.r).zip(&self.inv_diag) {
            *d = inv_theta * *s * *r;
        }
        let steps = self.degree;
        for k in 1..steps {
            for (xi, di) in x.iter_mut().zip(&self.d) {
                *xi += *di;
            }
            op.apply(&self.d, &mut self.q);
            for (ri, qi) in self.r.iter_mut().zip(&self.q) {
                *ri -= *qi;
            }
            let rho_new = 1.0 / (2.0 * sigma - rho);
            let c1 = T::of(rho_new * rho);
            let c2 = T::of(2.0 * rho_new / delta);
            for ((d, r), s) in self.d.iter_mut().zip(&self.r).zip(&self.inv_diag) {
                *d = c1 * *d + c2 * *s * *r;
            }
            rho = rho_new;
            let _ = k;
        }
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi += *di;
        }
        if let Some(res) = residual {
            op.apply(&self.d, &mut self.q);
            for ((o, r), q) in res.iter_mut().zip(&self.r).zip(&self.q) {
                *o = *r - *q;
            }
        }
    }

    /// Residual reduction factor `T_k((theta - lambda) / delta) / T_k(theta / delta)`
    /// of `k = degree` steps at eigenvalue `lambda` of `D^{-1} A`.
    pub fn contraction(&self, lambda: f64) -> f64 {
        let (a, b) = self.interval();
        let theta = 0.5 * (b + a);
        let delta = 0.5 * (b - a);
        chebyshev_t(self.degree, (theta - lambda) / delta) / chebyshev_t(self.degree, theta / delta)
    }
}

fn chebyshev_t(k: usize, x: f64) -> f64 {
    let (mut t0, mut t1) = (1.0, x);
    if k == 0 {
        return t0;
    }
    for _ in 1..k {
        let t2 = 2.0 * x * t1 - t0;
        t0 = t1;
        t1 = t2;
    }
    t1
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        diag: Vec<f64>,
        calls: AtomicUsize,
    }

    impl LinearOperator<f64> for Counting {
        fn n_rows(&self) -> usize {
            self.diag.len()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            self.calls.fetch_add(1, Ordering::Relaxed);
            for i in 0..x.len() {
                y[i] = self.diag[i] * x[i];
            }
        }
    }

    #[test]
    fn identity_contraction_matches_scalar_recurrence() {
        let op = Counting {
            diag: vec![1.0; 3],
            calls: AtomicUsize::new(0),
        };
        let mut s = ChebyshevSmoother::new(&[1.0; 3], 1.0, 5);
        let b = [1.0, -2.0, 0.5];
        let mut x = [0.3, 0.1, -4.0];
        let e0: Vec<f64> = x.iter().zip(&b).map(|(x, b)| x - b).collect();
        s.smooth(&op, &b, &mut x);
        assert_eq!(op.calls.load(Ordering::Relaxed), 5);
        let f = s.contraction(1.0);
        for i in 0..3 {
            assert!(((x[i] - b[i]) - f * e0[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_solution_is_fixed() {
        let op = Counting {
            diag: vec![2.0, 3.0, 5.0],
            calls: AtomicUsize::new(0),
        };
        let mut s = ChebyshevSmoother::new(&[2.0, 3.0, 5.0], 1.0, 5);
        let mut x = [1.0, 2.0, 3.0];
        s.smooth(&op, &[2.0, 6.0, 15.0], &mut x);
        assert_eq!(x, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_start_returns_residual() {
        let diag = vec![1.0, 4.0, 9.0];
        let op = Counting {
            diag: diag.clone(),
            calls: AtomicUsize::new(0),
        };
        let mut s = ChebyshevSmoother::new(&[1.0; 3], 9.0, 4);
        let b = [1.0, 1.0, 1.0];
        let mut x = [0.0; 3];
        let mut r = [0.0; 3];
        s.smooth_from_zero(&op, &b, &mut x, &mut r);
        assert_eq!(op.calls.load(Ordering::Relaxed), 4);
        for i in 0..3 {
            assert!((r[i] - (b[i] - diag[i] * x[i])).abs() < 1e-14);
        }
    }
}
