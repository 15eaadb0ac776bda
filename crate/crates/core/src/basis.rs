//! One-dimensional quadrature rules and nodal Lagrange bases on `[-1, 1]`.
//!
//! Every three-dimensional element operator in the crate is a tensor product
//! of the matrices built here: basis values `B[q][i] = l_i(xi_q)` and
//! derivatives `D[q][i] = l_i'(xi_q)`, where the `l_i` interpolate at the
//! Legendre-Gauss-Lobatto support nodes and `xi_q` are the quadrature points.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Largest number of points for which quadrature rules are constructed.
pub const MAX_QUADRATURE_POINTS: usize = 16;
/// Largest supported polynomial degree.
pub const MAX_DEGREE: usize = 8;

const NEWTON_MAX_ITERS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("{flavor} rule with {n} points is not supported (valid range {min}..={max})")]
    PointCount {
        flavor: Flavor,
        n: usize,
        min: usize,
        max: usize,
    },
    #[error("polynomial degree {0} outside supported range 1..={MAX_DEGREE}")]
    Degree(usize),
    #[error("interpolation nodes {0} and {1} coincide")]
    DuplicateNodes(usize, usize),
}

/// Quadrature node family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Legendre-Gauss: interior points, exact to degree `2n - 1`.
    Lg,
    /// Legendre-Gauss-Lobatto: includes the endpoints, exact to degree `2n - 3`.
    Lgl,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Flavor::Lg => write!(f, "LG"),
            Flavor::Lgl => write!(f, "LGL"),
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lg" | "sem" => Ok(Flavor::Lg),
            "lgl" | "sem-ni" | "semni" => Ok(Flavor::Lgl),
            other => Err(format!("unknown quadrature flavor `{other}` (expected lg or lgl)")),
        }
    }
}

/// Legendre polynomial `L_n(x)` and its derivative, by the three-term recurrence.
pub fn legendre<T: Scalar>(n: usize, x: T) -> (T, T) {
    if n == 0 {
        return (T::one(), T::zero());
    }
    let (mut l_prev, mut l) = (T::one(), x);
    let (mut d_prev, mut d) = (T::zero(), T::one());
    for k in 1..n {
        let kk = T::of_usize(k);
        let l_next = ((kk + kk + T::one()) * x * l - kk * l_prev) / (kk + T::one());
        // L'_{k+1} = L'_{k-1} + (2k+1) L_k
        let d_next = d_prev + (kk + kk + T::one()) * l;
        l_prev = l;
        l = l_next;
        d_prev = d;
        d = d_next;
    }
    (l, d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub flavor: Flavor,
    pub points: Vec<T>,
    pub weights: Vec<T>,
    pub degree_of_exactness: usize,
}

impl<T: Scalar> QuadratureRule<T> {
    /// Builds the `n`-point rule of the given flavor by Newton iteration from
    /// Chebyshev initial guesses.
    pub fn new(flavor: Flavor, n: usize) -> Result<Self, BasisError> {
        let min = match flavor {
            Flavor::Lg => 1,
            Flavor::Lgl => 2,
        };
        if n < min || n > MAX_QUADRATURE_POINTS {
            return Err(BasisError::PointCount {
                flavor,
                n,
                min,
                max: MAX_QUADRATURE_POINTS,
            });
        }
        let (points, weights) = match flavor {
            Flavor::Lg => gauss_nodes(n),
            Flavor::Lgl => lobatto_nodes(n),
        };
        let degree_of_exactness = match flavor {
            Flavor::Lg => 2 * n - 1,
            Flavor::Lgl => 2 * n - 3,
        };
        Ok(Self {
            flavor,
            points,
            weights,
            degree_of_exactness,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(T) -> T) -> T {
        self.points
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(x))
    }
}

fn newton_tolerance<T: Scalar>() -> T {
    T::of(1e-15).max(T::epsilon() * T::of(4.0))
}

fn gauss_nodes<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut x = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let tol = newton_tolerance::<T>();
    for i in 0..n.div_ceil(2) {
        let mut xi = -(T::PI() * T::of_usize(2 * i + 1) / T::of_usize(2 * n)).cos();
        for _ in 0..NEWTON_MAX_ITERS {
            let (l, d) = legendre(n, xi);
            let dx = l / d;
            xi -= dx;
            if dx.abs() <= tol {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            xi = T::zero();
        }
        let (_, d) = legendre(n, xi);
        let wi = T::of(2.0) / ((T::one() - xi * xi) * d * d);
        x[i] = xi;
        x[n - 1 - i] = -xi;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn lobatto_nodes<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let order = n - 1;
    let mut x = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let tol = newton_tolerance::<T>();
    let nn1 = T::of_usize(order * (order + 1));
    x[0] = -T::one();
    x[n - 1] = T::one();
    for i in 1..n.div_ceil(2) {
        let mut xi = -(T::PI() * T::of_usize(i) / T::of_usize(order)).cos();
        for _ in 0..NEWTON_MAX_ITERS {
            // interior nodes are the roots of L'_N
            let (l, d) = legendre(order, xi);
            let d2 = (T::of(2.0) * xi * d - nn1 * l) / (T::one() - xi * xi);
            let dx = d / d2;
            xi -= dx;
            if dx.abs() <= tol {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            xi = T::zero();
        }
        x[i] = xi;
        x[n - 1 - i] = -xi;
    }
    for i in 0..n {
        let (l, _) = legendre(order, x[i]);
        w[i] = T::of(2.0) / (nn1 * l * l);
    }
    (x, w)
}

/// Barycentric weights `w_i = 1 / prod_{j != i} (x_i - x_j)`.
pub fn barycentric_weights<T: Scalar>(nodes: &[T]) -> Result<Vec<T>, BasisError> {
    let n = nodes.len();
    let mut w = vec![T::one(); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let diff = nodes[i] - nodes[j];
            if diff == T::zero() {
                return Err(BasisError::DuplicateNodes(i.min(j), i.max(j)));
            }
            w[i] /= diff;
        }
    }
    Ok(w)
}

/// Lagrange interpolation basis on a fixed set of distinct nodes.
#[derive(Debug, Clone)]
pub struct Lagrange<T> {
    nodes: Vec<T>,
    bary: Vec<T>,
}

impl<T: Scalar> Lagrange<T> {
    pub fn new(nodes: &[T]) -> Result<Self, BasisError> {
        let bary = barycentric_weights(nodes)?;
        Ok(Self {
            nodes: nodes.to_vec(),
            bary,
        })
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.bary
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Values of all basis polynomials at `x`; exactly `delta_ik` at node `k`.
    pub fn values(&self, x: T) -> Vec<T> {
        let n = self.nodes.len();
        let mut out = vec![T::zero(); n];
        if let Some(k) = self.nodes.iter().position(|&xk| xk == x) {
            out[k] = T::one();
            return out;
        }
        let mut denom = T::zero();
        for i in 0..n {
            let t = self.bary[i] / (x - self.nodes[i]);
            out[i] = t;
            denom += t;
        }
        for v in &mut out {
            *v /= denom;
        }
        out
    }

    /// Derivatives of all basis polynomials at `x`.
    pub fn derivatives(&self, x: T) -> Vec<T> {
        let n = self.nodes.len();
        let mut out = vec![T::zero(); n];
        if let Some(m) = self.nodes.iter().position(|&xm| xm == x) {
            let mut diag = T::zero();
            for i in 0..n {
                if i != m {
                    let d = self.bary[i] / self.bary[m] / (self.nodes[m] - self.nodes[i]);
                    out[i] = d;
                    diag -= d;
                }
            }
            out[m] = diag;
            return out;
        }
        for i in 0..n {
            let mut sum = T::zero();
            for k in 0..n {
                if k == i {
                    continue;
                }
                let mut prod = T::one();
                for j in 0..n {
                    if j != i && j != k {
                        prod *= x - self.nodes[j];
                    }
                }
                sum += prod;
            }
            out[i] = self.bary[i] * sum;
        }
        out
    }

    /// Interpolant of nodal data `coeffs` evaluated at `x`.
    pub fn interpolate(&self, coeffs: &[T], x: T) -> T {
        self.values(x)
            .iter()
            .zip(coeffs)
            .fold(T::zero(), |acc, (l, c)| acc + *l * *c)
    }
}

/// Precomputed one-dimensional data for a degree-`p` nodal basis.
#[derive(Debug, Clone)]
pub struct TensorBasis<T> {
    pub degree: usize,
    pub flavor: Flavor,
    /// `p + 1` LGL support nodes.
    pub support: Vec<T>,
    pub quad: QuadratureRule<T>,
    /// `B[q * n + i] = l_i(xi_q)`.
    pub values: Vec<T>,
    /// `D[q * n + i] = l_i'(xi_q)`.
    pub grads: Vec<T>,
    /// Differentiation matrix of the interpolant through the quadrature points,
    /// `Dq[q * n + r] = lq_r'(xi_q)`; satisfies `D = Dq * B`.
    pub collocation_grads: Vec<T>,
    lagrange: Lagrange<T>,
}

impl<T: Scalar> TensorBasis<T> {
    pub fn new(degree: usize, flavor: Flavor) -> Result<Self, BasisError> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(BasisError::Degree(degree));
        }
        let n = degree + 1;
        let support = QuadratureRule::<T>::new(Flavor::Lgl, n)?.points;
        let quad = QuadratureRule::new(flavor, n)?;
        let lagrange = Lagrange::new(&support)?;
        let quad_lagrange = Lagrange::new(&quad.points)?;
        let mut values = vec![T::zero(); n * n];
        let mut grads = vec![T::zero(); n * n];
        let mut collocation_grads = vec![T::zero(); n * n];
        for (q, &xq) in quad.points.iter().enumerate() {
            let v = if flavor == Flavor::Lgl {
                (0..n).map(|i| if i == q { T::one() } else { T::zero() }).collect()
            } else {
                lagrange.values(xq)
            };
            values[q * n..(q + 1) * n].copy_from_slice(&v);
            grads[q * n..(q + 1) * n].copy_from_slice(&lagrange.derivatives(xq));
            collocation_grads[q * n..(q + 1) * n].copy_from_slice(&quad_lagrange.derivatives(xq));
        }
        Ok(Self {
            degree,
            flavor,
            support,
            quad,
            values,
            grads,
            collocation_grads,
            lagrange,
        })
    }

    /// Points per direction (`p + 1`), identical for nodes and quadrature.
    #[inline]
    pub fn n(&self) -> usize {
        self.degree + 1
    }

    #[inline]
    pub fn value(&self, q: usize, i: usize) -> T {
        self.values[q * self.n() + i]
    }

    #[inline]
    pub fn grad(&self, q: usize, i: usize) -> T {
        self.grads[q * self.n() + i]
    }

    pub fn is_collocated(&self) -> bool {
        self.flavor == Flavor::Lgl
    }

    /// Nodal basis on the support nodes, for evaluation at arbitrary points.
    pub fn lagrange(&self) -> &Lagrange<T> {
        &self.lagrange
    }
}
