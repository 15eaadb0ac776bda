//! Activation maps, functional traces, error metrics and VTK export.

use crate::basis::{Flavor, Lagrange, QuadratureRule};
use crate::ionic::IonicState;
use crate::mesh::{DofMap, HexMesh};
use crate::scalar::Scalar;
use crate::stepper::{Bdf, StepObserver};
use rayon::prelude::*;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostError {
    #[error("trace series differ: {0}")]
    Grid(String),
    #[error("point {0:?} lies outside the mesh")]
    Outside([f64; 3]),
    #[error("malformed trace file, line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-DOF activation times: the step of largest `|du/dt|`, with the
/// derivative taken by the time-stepping BDF formula.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub times: Vec<f64>,
    /// `max |du/dt|` reached at every DOF.
    pub peak_rate: Vec<f64>,
    pub dt: f64,
    pub t_final: f64,
}

impl ActivationMap {
    /// Value written for DOFs that never activated.
    pub fn sentinel(&self) -> f64 {
        self.t_final + self.dt
    }

    /// Activation times, with the sentinel wherever `max |du/dt|` stayed
    /// below `min_rate`.
    pub fn thresholded(&self, min_rate: f64) -> Vec<f64> {
        let s = self.sentinel();
        self.times
            .iter()
            .zip(&self.peak_rate)
            .map(|(&t, &r)| if r >= min_rate { t } else { s })
            .collect()
    }

    /// Index of the latest activation (earliest index among ties).
    pub fn last_activated(&self) -> usize {
        let mut best = 0;
        for (i, &t) in self.times.iter().enumerate() {
            if t > self.times[best] {
                best = i;
            }
        }
        best
    }
}

/// Single-pass activation tracker, fed with every new potential.
#[derive(Debug, Clone)]
pub struct ActivationTracker<T> {
    scheme: Bdf,
    dt: f64,
    /// Newest first.
    history: Vec<Vec<T>>,
    times: Vec<f64>,
    rates: Vec<f64>,
    last_time: f64,
}

impl<T: Scalar> ActivationTracker<T> {
    pub fn new(n_dofs: usize, dt: f64, scheme: Bdf) -> Self {
        Self {
            scheme,
            dt,
            history: Vec::new(),
            times: vec![0.0; n_dofs],
            rates: vec![-1.0; n_dofs],
            last_time: 0.0,
        }
    }

    /// Records `u` at `time`; consecutive calls must be one `dt` apart.
    pub fn push(&mut self, time: f64, u: &[T]) {
        assert_eq!(u.len(), self.times.len(), "activation tracker size");
        self.last_time = time;
        if !self.history.is_empty() {
            let order = self.scheme.order().min(self.history.len());
            let (alpha0, beta) = Bdf::from_order(order).coefficients();
            let hist = &self.history;
            let inv_dt = 1.0 / self.dt;
            self.times
                .par_iter_mut()
                .zip(self.rates.par_iter_mut())
                .enumerate()
                .for_each(|(i, (tau, rate))| {
                    let mut d = alpha0 * u[i].as_f64();
                    for (b, h) in beta.iter().zip(hist) {
                        d -= b * h[i].as_f64();
                    }
                    let r = (d * inv_dt).abs();
                    if r > *rate {
                        *rate = r;
                        *tau = time;
                    }
                });
        }
        let keep = self.scheme.order();
        let mut fresh = if self.history.len() >= keep { self.history.pop().unwrap() } else { Vec::new() };
        fresh.clear();
        fresh.extend_from_slice(u);
        self.history.insert(0, fresh);
    }

    pub fn map(&self) -> ActivationMap {
        ActivationMap {
            times: self.times.clone(),
            peak_rate: self.rates.iter().map(|r| r.max(0.0)).collect(),
            dt: self.dt,
            t_final: self.last_time,
        }
    }
}

impl<T: Scalar> StepObserver<T> for ActivationTracker<T> {
    fn observe(&mut self, _step: usize, time: f64, u: &[T], _ionic: &IonicState<T>) {
        self.push(time, u);
    }
}

/// Activation map recomputed from stored snapshots `u^0, u^1, ...`.
pub fn activation_offline<T: Scalar>(snapshots: &[Vec<T>], dt: f64, scheme: Bdf) -> ActivationMap {
    let n = snapshots.first().map_or(0, Vec::len);
    let mut times = vec![0.0; n];
    let mut rates = vec![-1.0f64; n];
    for s in 1..snapshots.len() {
        let (alpha0, beta) = Bdf::from_order(scheme.order().min(s)).coefficients();
        for i in 0..n {
            let mut d = alpha0 * snapshots[s][i].as_f64();
            for (j, b) in beta.iter().enumerate() {
                d -= b * snapshots[s - 1 - j][i].as_f64();
            }
            let r = (d / dt).abs();
            if r > rates[i] {
                rates[i] = r;
                times[i] = s as f64 * dt;
            }
        }
    }
    ActivationMap {
        times,
        peak_rate: rates.into_iter().map(|r| r.max(0.0)).collect(),
        dt,
        t_final: snapshots.len().saturating_sub(1) as f64 * dt,
    }
}

/// DOFs nearest to `samples` equispaced points on the segment `a -> b`,
/// without repeats, in order of distance from `a`.
pub fn nodes_along<T: Scalar>(dofs: &DofMap<T>, a: [f64; 3], b: [f64; 3], samples: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for s in 0..samples {
        let t = s as f64 / (samples.max(2) - 1) as f64;
        let x = [0, 1, 2].map(|k| T::of(a[k] + t * (b[k] - a[k])));
        let i = dofs.nearest_node(x);
        if out.last() != Some(&i) && !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Evaluates the finite-element interpolant at a fixed point.
#[derive(Debug, Clone)]
pub struct PointProbe<T> {
    pub point: [f64; 3],
    dofs: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> PointProbe<T> {
    pub fn new(mesh: &HexMesh<T>, dofs: &DofMap<T>, point: [f64; 3]) -> Result<Self, PostError> {
        let x = point.map(T::of);
        if !mesh.contains(x, T::of(1e-9)) {
            return Err(PostError::Outside(point));
        }
        let h = mesh.cell_size();
        let mut c = [0usize; 3];
        let mut xi = [T::zero(); 3];
        for a in 0..3 {
            let s = ((x[a] - mesh.origin[a]) / h[a]).max(T::zero());
            let k = s.floor().to_usize().unwrap_or(0).min(mesh.cells[a] - 1);
            c[a] = k;
            xi[a] = T::of(2.0) * (s - T::of_usize(k)) - T::one();
        }
        let support = QuadratureRule::<T>::new(Flavor::Lgl, dofs.degree + 1)
            .map_err(|_| PostError::Outside(point))?
            .points;
        let lag = Lagrange::new(&support).map_err(|_| PostError::Outside(point))?;
        let l = xi.map(|v| lag.values(v));
        let n = dofs.degree + 1;
        let mut weights = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    weights.push(l[0][i] * l[1][j] * l[2][k]);
                }
            }
        }
        Ok(Self {
            point,
            dofs: dofs.cell_dofs(mesh.cell_index(c)).to_vec(),
            weights,
        })
    }

    pub fn eval(&self, u: &[T]) -> T {
        let mut s = T::zero();
        for (&i, &w) in self.dofs.iter().zip(&self.weights) {
            s += w * u[i];
        }
        s
    }
}

/// `[min, mean, max, value at P]` of a nodal field, reduced in index order.
pub fn functionals<T: Scalar>(u: &[T], probe: &PointProbe<T>) -> [f64; 4] {
    if u.is_empty() {
        return [f64::NAN; 4];
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for v in u {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    [lo, sum / u.len() as f64, hi, probe.eval(u).as_f64()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub time_ms: f64,
    /// `[min, mean, max, P]` of the potential.
    pub u: [f64; 4],
    /// Same for the first gating variable (NaN without one).
    pub w: [f64; 4],
}

pub const TRACE_HEADER: &str = "step,time_ms,u_min,u_mean,u_max,u_P,w_min,w_mean,w_max,w_P";

/// Collects a [`TraceRecord`] per observed step.
#[derive(Debug, Clone)]
pub struct TraceRecorder<T> {
    pub probe: PointProbe<T>,
    pub records: Vec<TraceRecord>,
    w: Vec<T>,
}

impl<T: Scalar> TraceRecorder<T> {
    pub fn new(probe: PointProbe<T>) -> Self {
        Self {
            probe,
            records: Vec::new(),
            w: Vec::new(),
        }
    }

    pub fn record(&mut self, step: usize, time: f64, u: &[T], ionic: &IonicState<T>) {
        let w = if ionic.n_gating > 0 {
            self.w.clear();
            self.w.extend(ionic.gating(0));
            functionals(&self.w, &self.probe)
        } else {
            [f64::NAN; 4]
        };
        self.records.push(TraceRecord {
            step,
            time_ms: time,
            u: functionals(u, &self.probe),
            w,
        });
    }
}

impl<T: Scalar> StepObserver<T> for TraceRecorder<T> {
    fn observe(&mut self, step: usize, time: f64, u: &[T], ionic: &IonicState<T>) {
        self.record(step, time, u, ionic);
    }
}

pub fn write_traces(mut out: impl Write, records: &[TraceRecord]) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        write!(out, "{},{}", r.step, r.time_ms)?;
        for v in r.u.iter().chain(&r.w) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_traces(input: impl BufRead) -> Result<Vec<TraceRecord>, PostError> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if k == 0 {
            if line.trim() != TRACE_HEADER {
                return Err(PostError::Parse {
                    line: 1,
                    reason: format!("expected header `{TRACE_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| PostError::Parse { line: k + 1, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(bad(format!("{} fields, expected 10", fields.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let step = fields[0].trim().parse::<usize>().map_err(|e| bad(format!("step: {e}")))?;
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[2..]) {
            *slot = num(f)?;
        }
        out.push(TraceRecord {
            step,
            time_ms: num(fields[1])?,
            u: [v[0], v[1], v[2], v[3]],
            w: [v[4], v[5], v[6], v[7]],
        });
    }
    Ok(out)
}

/// Time-accumulated differences of the potential functionals,
/// `(dt sum_n |f_hp(t_n) - f_ref(t_n)|^2)^(1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ErrorNorms {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub probe: f64,
}

impl ErrorNorms {
    pub fn as_array(&self) -> [f64; 4] {
        [self.min, self.mean, self.max, self.probe]
    }
}

/// The initial record (`step == 0`) is skipped: sums run over `t_1 .. t_N`.
pub fn error_norms(hp: &[TraceRecord], reference: &[TraceRecord], dt: f64) -> Result<ErrorNorms, PostError> {
    if hp.len() != reference.len() {
        return Err(PostError::Grid(format!("{} vs {} records", hp.len(), reference.len())));
    }
    let mut acc = [0.0; 4];
    for (a, b) in hp.iter().zip(reference) {
        if a.step != b.step || (a.time_ms - b.time_ms).abs() > 1e-9 * (1.0 + a.time_ms.abs()) {
            return Err(PostError::Grid(format!("step {} at {} ms vs step {} at {} ms", a.step, a.time_ms, b.step, b.time_ms)));
        }
        if a.step == 0 {
            continue;
        }
        for k in 0..4 {
            acc[k] += (a.u[k] - b.u[k]).powi(2);
        }
    }
    let e = acc.map(|s| (dt * s).sqrt());
    Ok(ErrorNorms {
        min: e[0],
        mean: e[1],
        max: e[2],
        probe: e[3],
    })
}

/// Time-accumulated `L2` and `H1` errors against an exact solution.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct SpaceTimeNorms {
    pub l2: f64,
    pub h1: f64,
}

/// Accumulates `dt sum_n ||u_hp(t_n) - u(t_n)||^2` in `L2` and `H1`, with a
/// Gauss rule of `p + 2` points per direction.
#[derive(Debug, Clone)]
pub struct SpaceTimeAccumulator {
    dt: f64,
    n: usize,
    m: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    /// `val[q * n + i]`, `der[q * n + i]` on the reference interval.
    val: Vec<f64>,
    der: Vec<f64>,
    l2: f64,
    h1: f64,
}

impl SpaceTimeAccumulator {
    pub fn new(degree: usize, dt: f64) -> Self {
        let n = degree + 1;
        let quad = QuadratureRule::<f64>::new(Flavor::Lg, degree + 2).expect("quadrature size");
        let support = QuadratureRule::<f64>::new(Flavor::Lgl, n).expect("support size").points;
        let lag = Lagrange::new(&support).expect("distinct nodes");
        let m = quad.points.len();
        let mut val = Vec::with_capacity(m * n);
        let mut der = Vec::with_capacity(m * n);
        for &x in &quad.points {
            val.extend(lag.values(x));
            der.extend(lag.derivatives(x));
        }
        Self {
            dt,
            n,
            m,
            points: quad.points,
            weights: quad.weights,
            val,
            der,
            l2: 0.0,
            h1: 0.0,
        }
    }

    /// Squared spatial `L2` error and `H1` seminorm error of one snapshot.
    /// `exact(x)` returns the value and gradient.
    pub fn spatial<T: Scalar>(&self, mesh: &HexMesh<T>, dofs: &DofMap<T>, u: &[T], exact: impl Fn([f64; 3]) -> (f64, [f64; 3]) + Sync) -> (f64, f64) {
        let m = self.m;
        let h = mesh.cell_size().map(|v| v.as_f64());
        let jac = h[0] * h[1] * h[2] / 8.0;
        let parts: Vec<(f64, f64)> = (0..mesh.n_cells())
            .into_par_iter()
            .map(|cell| {
                let (lo, _) = mesh.cell_bounds(cell);
                let lo = lo.map(|v| v.as_f64());
                let local: Vec<f64> = dofs.cell_dofs(cell).iter().map(|&i| u[i].as_f64()).collect();
                let [v, gx, gy, gz] = self.evaluate(&local);
                let (mut e0, mut e1) = (0.0, 0.0);
                for qz in 0..m {
                    for qy in 0..m {
                        for qx in 0..m {
                            let q = [qx, qy, qz];
                            let idx = qx + m * (qy + m * qz);
                            let x = [0, 1, 2].map(|a| lo[a] + 0.5 * (self.points[q[a]] + 1.0) * h[a]);
                            let (ue, ge) = exact(x);
                            let w = self.weights[qx] * self.weights[qy] * self.weights[qz] * jac;
                            let g = [gx[idx], gy[idx], gz[idx]];
                            e0 += w * (v[idx] - ue).powi(2);
                            e1 += w * (0..3).map(|a| (2.0 * g[a] / h[a] - ge[a]).powi(2)).sum::<f64>();
                        }
                    }
                }
                (e0, e1)
            })
            .collect();
        parts.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d))
    }

    /// Values and reference gradients at the `m^3` points by sum factorization.
    fn evaluate(&self, c: &[f64]) -> [Vec<f64>; 4] {
        let (n, m) = (self.n, self.m);
        // x contraction: [qx, j, k]
        let mut x0 = vec![0.0; m * n * n];
        let mut x1 = vec![0.0; m * n * n];
        for jk in 0..n * n {
            for q in 0..m {
                let (mut a, mut b) = (0.0, 0.0);
                for i in 0..n {
                    a += self.val[q * n + i] * c[i + n * jk];
                    b += self.der[q * n + i] * c[i + n * jk];
                }
                x0[q + m * jk] = a;
                x1[q + m * jk] = b;
            }
        }
        // y contraction: [qx, qy, k]
        let y = |src: &[f64], tab: &[f64]| {
            let mut out = vec![0.0; m * m * n];
            for k in 0..n {
                for qy in 0..m {
                    for qx in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += tab[qy * n + j] * src[qx + m * (j + n * k)];
                        }
                        out[qx + m * (qy + m * k)] = s;
                    }
                }
            }
            out
        };
        let z = |src: &[f64], tab: &[f64]| {
            let mut out = vec![0.0; m * m * m];
            for qz in 0..m {
                for qxy in 0..m * m {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += tab[qz * n + k] * src[qxy + m * m * k];
                    }
                    out[qxy + m * m * qz] = s;
                }
            }
            out
        };
        let (bv, dv) = (&self.val, &self.der);
        let y00 = y(&x0, bv);
        let y01 = y(&x0, dv);
        let y10 = y(&x1, bv);
        [z(&y00, bv), z(&y10, bv), z(&y01, bv), z(&y00, dv)]
    }

    pub fn add<T: Scalar>(&mut self, mesh: &HexMesh<T>, dofs: &DofMap<T>, u: &[T], exact: impl Fn([f64; 3]) -> (f64, [f64; 3]) + Sync) {
        let (l2, semi) = self.spatial(mesh, dofs, u, exact);
        self.l2 += self.dt * l2;
        self.h1 += self.dt * (l2 + semi);
    }

    pub fn finish(&self) -> SpaceTimeNorms {
        SpaceTimeNorms {
            l2: self.l2.sqrt(),
            h1: self.h1.sqrt(),
        }
    }
}

/// Legacy ASCII VTK unstructured grid: every lattice sub-cell of the `Q_p`
/// nodes becomes one hexahedron (cell type 12), with nodal point data.
pub fn write_vtk<T: Scalar>(mut out: impl Write, title: &str, dofs: &DofMap<T>, fields: &[(&str, &[f64])]) -> io::Result<()> {
    let lat = dofs.lattice;
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{}", title.lines().next().unwrap_or("monodomain"))?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", dofs.n_dofs)?;
    for x in dofs.coords() {
        writeln!(out, "{} {} {}", x[0].as_f64(), x[1].as_f64(), x[2].as_f64())?;
    }
    let sub = [0, 1, 2].map(|a| lat[a] - 1);
    let n_sub = sub[0] * sub[1] * sub[2];
    writeln!(out, "CELLS {} {}", n_sub, 9 * n_sub)?;
    for k in 0..sub[2] {
        for j in 0..sub[1] {
            for i in 0..sub[0] {
                let v = |di, dj, dk| dofs.node_index([i + di, j + dj, k + dk]);
                writeln!(
                    out,
                    "8 {} {} {} {} {} {} {} {}",
                    v(0, 0, 0),
                    v(1, 0, 0),
                    v(1, 1, 0),
                    v(0, 1, 0),
                    v(0, 0, 1),
                    v(1, 0, 1),
                    v(1, 1, 1),
                    v(0, 1, 1)
                )?;
            }
        }
    }
    writeln!(out, "CELL_TYPES {n_sub}")?;
    for _ in 0..n_sub {
        writeln!(out, "12")?;
    }
    if !fields.is_empty() {
        writeln!(out, "POINT_DATA {}", dofs.n_dofs)?;
        for (name, data) in fields {
            assert_eq!(data.len(), dofs.n_dofs, "field {name} size");
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in *data {
                writeln!(out, "{v}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, u: [f64; 4]) -> TraceRecord {
        TraceRecord {
            step,
            time_ms: step as f64 * 0.1,
            u,
            w: [0.0; 4],
        }
    }

    #[test]
    fn constant_field_activates_at_first_step() {
        let mut t = ActivationTracker::<f64>::new(3, 0.1, Bdf::Two);
        for s in 0..5 {
            t.push(s as f64 * 0.1, &[1.0, 2.0, 3.0]);
        }
        let m = t.map();
        assert_eq!(m.times, vec![0.1; 3]);
        assert_eq!(m.thresholded(1e-9), vec![m.sentinel(); 3]);
    }

    #[test]
    fn error_norms_closed_forms() {
        let a: Vec<_> = (0..11).map(|s| rec(s, [0.0, 1.0, 2.0, 3.0])).collect();
        assert_eq!(error_norms(&a, &a, 0.1).unwrap().as_array(), [0.0; 4]);
        let b: Vec<_> = (0..11).map(|s| rec(s, [0.5, 1.5, 2.5, 3.5])).collect();
        let e = error_norms(&a, &b, 0.1).unwrap();
        let expect = 0.5 * (0.1f64 * 10.0).sqrt();
        for v in e.as_array() {
            assert!((v - expect).abs() < 1e-14);
        }
        assert!(error_norms(&a, &b[1..], 0.1).is_err());
    }

    #[test]
    fn probe_reproduces_polynomials() {
        let mesh = HexMesh::<f64>::new([2.0, 1.0, 3.0], [3, 2, 2]).unwrap();
        let dofs = DofMap::new(&mesh, 3).unwrap();
        let f = |x: [f64; 3]| x[0].powi(3) - x[1] * x[2] + 2.0 * x[2].powi(2);
        let u: Vec<f64> = dofs.coords().iter().map(|&x| f(x)).collect();
        for p in [[0.3, 0.7, 2.9], [2.0, 1.0, 3.0], [1.0, 0.5, 1.5]] {
            let probe = PointProbe::new(&mesh, &dofs, p).unwrap();
            assert!((probe.eval(&u) - f(p)).abs() < 1e-12);
        }
        assert!(PointProbe::new(&mesh, &dofs, [2.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn trace_csv_roundtrip() {
        let recs = vec![rec(0, [0.0, 0.1, 0.2, f64::NAN]), rec(1, [1e-300, -2.5, 3.0, 4.0])];
        let mut buf = Vec::new();
        write_traces(&mut buf, &recs).unwrap();
        let back = read_traces(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], recs[1]);
        assert!(back[0].u[3].is_nan());
    }

    #[test]
    fn space_norms_of_interpolated_polynomial() {
        let mesh = HexMesh::<f64>::new([1.0, 2.0, 0.5], [2, 3, 1]).unwrap();
        let dofs = DofMap::new(&mesh, 3).unwrap();
        let f = |x: [f64; 3]| (x[0] * x[0] * x[1] - x[2].powi(3), [2.0 * x[0] * x[1], x[0] * x[0], -3.0 * x[2] * x[2]]);
        let u: Vec<f64> = dofs.coords().iter().map(|&x| f(x).0).collect();
        let acc = SpaceTimeAccumulator::new(3, 0.1);
        let (l2, semi) = acc.spatial(&mesh, &dofs, &u, f);
        assert!(l2 < 1e-26 && semi < 1e-24, "{l2} {semi}");
        // the zero field against g = 1 on a box of volume 1
        let zero = vec![0.0; dofs.n_dofs];
        let (l2, semi) = acc.spatial(&mesh, &dofs, &zero, |_| (1.0, [0.0; 3]));
        assert!((l2 - 1.0).abs() < 1e-13 && semi == 0.0);
    }

    #[test]
    fn vtk_counts() {
        let mesh = HexMesh::<f64>::new([1.0; 3], [2, 1, 1]).unwrap();
        let dofs = DofMap::new(&mesh, 2).unwrap();
        let data = vec![0.5; dofs.n_dofs];
        let mut buf = Vec::new();
        write_vtk(&mut buf, "t", &dofs, &[("activation_time_ms", &data)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("POINTS 45 double"));
        assert!(s.contains("CELLS 16 144"));
        assert!(s.contains("SCALARS activation_time_ms double 1"));
        assert_eq!(s.lines().filter(|l| *l == "12").count(), 16);
    }
}
