//! Matrix-free action of `A = c_M M + c_K K` by sum factorization.
//!
//! Cells are processed in batches of `W` lanes; every workspace entry is laid
//! out as `index * W + lane` so the innermost loops run across lanes. Each
//! lane performs exactly the same arithmetic sequence whatever `W` is, and the
//! scatter visits cells in increasing order inside a layer, so results do not
//! depend on the batch width.

use crate::basis::{Flavor, TensorBasis};
use crate::mesh::{diffusion_at, for_each_layer_colored, DiffusionField, DofMap, HexMesh};
use crate::scalar::Scalar;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("vector length {got} does not match {expected} degrees of freedom")]
    Size { expected: usize, got: usize },
    #[error("unsupported batch width {0} (use 1, 2, 4 or 8)")]
    BatchWidth(usize),
    #[error("mesh and dof map disagree")]
    Mismatch,
}

pub const BATCH_WIDTHS: [usize; 4] = [1, 2, 4, 8];

/// Anything that maps a vector to a vector linearly.
pub trait LinearOperator<T>: Sync {
    fn n_rows(&self) -> usize;
    fn apply(&self, x: &[T], y: &mut [T]);
}

#[derive(Debug, Default)]
struct Workspace<T> {
    u: Vec<T>,
    t1: Vec<T>,
    t2: Vec<T>,
    g: [Vec<T>; 3],
}

impl<T: Scalar> Workspace<T> {
    fn new(len: usize) -> Self {
        let z = || vec![T::zero(); len];
        Self {
            u: z(),
            t1: z(),
            t2: z(),
            g: [z(), z(), z()],
        }
    }
}

/// Per quadrature point stiffness coefficients `w_q |J| J^-1 D J^-T`,
/// stored as the six upper-triangle entries.
#[derive(Debug, Clone)]
enum StiffnessData<T> {
    Shared(Vec<T>),
    PerCell(Vec<T>),
}

#[derive(Debug)]
pub struct MonodomainOperator<T> {
    basis: Arc<TensorBasis<T>>,
    mesh: HexMesh<T>,
    dofs: Arc<DofMap<T>>,
    mass_coeff: T,
    stiffness_coeff: T,
    batch_width: usize,
    /// `w_q |J|`, identical for all cells of the uniform grid.
    mass_weights: Vec<T>,
    stiffness: StiffnessData<T>,
    lumped: Option<Vec<T>>,
    pool: Mutex<Vec<Workspace<T>>>,
    flops: AtomicU64,
    applies: AtomicU64,
}

impl<T: Scalar> Clone for MonodomainOperator<T> {
    fn clone(&self) -> Self {
        Self {
            basis: self.basis.clone(),
            mesh: self.mesh.clone(),
            dofs: self.dofs.clone(),
            mass_coeff: self.mass_coeff,
            stiffness_coeff: self.stiffness_coeff,
            batch_width: self.batch_width,
            mass_weights: self.mass_weights.clone(),
            stiffness: self.stiffness.clone(),
            lumped: self.lumped.clone(),
            pool: Mutex::new(Vec::new()),
            flops: AtomicU64::new(0),
            applies: AtomicU64::new(0),
        }
    }
}

impl<T: Scalar> MonodomainOperator<T> {
    pub fn new(
        basis: Arc<TensorBasis<T>>,
        mesh: &HexMesh<T>,
        dofs: Arc<DofMap<T>>,
        diffusion: &DiffusionField<T>,
        mass_coeff: T,
    ) -> Result<Self, OperatorError> {
        if dofs.cells() != mesh.cells || dofs.degree != basis.degree {
            return Err(OperatorError::Mismatch);
        }
        let n = basis.n();
        let n3 = n * n * n;
        let h = mesh.cell_size();
        let half = T::of(0.5);
        let det = h[0] * h[1] * h[2] * half * half * half;
        let inv = h.map(|x| T::of(2.0) / x);
        let w = &basis.quad.weights;
        let mut mass_weights = Vec::with_capacity(n3);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    mass_weights.push(w[i] * w[j] * w[k] * det);
                }
            }
        }
        let fill = |out: &mut [T], cell: usize| {
            let (lo, _) = mesh.cell_bounds(cell);
            let xq = |a: usize, q: usize| lo[a] + (basis.quad.points[q] + T::one()) * half * h[a];
            for k in 0..n {
                for j in 0..n {
                    for i in 0..n {
                        let q = i + n * (j + n * k);
                        let d = diffusion_at([xq(0, i), xq(1, j), xq(2, k)], diffusion);
                        let s = mass_weights[q];
                        let c = &mut out[6 * q..6 * q + 6];
                        c[0] = s * inv[0] * d[0][0] * inv[0];
                        c[1] = s * inv[0] * d[0][1] * inv[1];
                        c[2] = s * inv[0] * d[0][2] * inv[2];
                        c[3] = s * inv[1] * d[1][1] * inv[1];
                        c[4] = s * inv[1] * d[1][2] * inv[2];
                        c[5] = s * inv[2] * d[2][2] * inv[2];
                    }
                }
            }
        };
        let stiffness = if diffusion.is_uniform() {
            let mut c = vec![T::zero(); 6 * n3];
            fill(&mut c, 0);
            StiffnessData::Shared(c)
        } else {
            let mut c = vec![T::zero(); 6 * n3 * mesh.n_cells()];
            for cell in 0..mesh.n_cells() {
                fill(&mut c[6 * n3 * cell..6 * n3 * (cell + 1)], cell);
            }
            StiffnessData::PerCell(c)
        };
        let mut op = Self {
            basis,
            mesh: mesh.clone(),
            dofs,
            mass_coeff,
            stiffness_coeff: T::one(),
            batch_width: 4,
            mass_weights,
            stiffness,
            lumped: None,
            pool: Mutex::new(Vec::new()),
            flops: AtomicU64::new(0),
            applies: AtomicU64::new(0),
        };
        if op.basis.flavor == Flavor::Lgl {
            let mut lumped = vec![T::zero(); op.n_dofs()];
            for cell in 0..op.mesh.n_cells() {
                for (l, &g) in op.dofs.cell_dofs(cell).iter().enumerate() {
                    lumped[g] += op.mass_weights[l];
                }
            }
            op.lumped = Some(lumped);
        }
        Ok(op)
    }

    pub fn with_batch_width(mut self, w: usize) -> Result<Self, OperatorError> {
        if !BATCH_WIDTHS.contains(&w) {
            return Err(OperatorError::BatchWidth(w));
        }
        self.batch_width = w;
        self.pool.get_mut().unwrap().clear();
        Ok(self)
    }

    pub fn batch_width(&self) -> usize {
        self.batch_width
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs
    }

    pub fn basis(&self) -> &Arc<TensorBasis<T>> {
        &self.basis
    }

    pub fn mesh(&self) -> &HexMesh<T> {
        &self.mesh
    }

    pub fn dofs(&self) -> &Arc<DofMap<T>> {
        &self.dofs
    }

    pub fn flavor(&self) -> Flavor {
        self.basis.flavor
    }

    pub fn mass_coeff(&self) -> T {
        self.mass_coeff
    }

    pub fn set_mass_coeff(&mut self, c: T) {
        self.mass_coeff = c;
    }

    pub fn stiffness_coeff(&self) -> T {
        self.stiffness_coeff
    }

    pub fn set_stiffness_coeff(&mut self, c: T) {
        self.stiffness_coeff = c;
    }

    /// Bytes held by precomputed coefficients (excluding the dof map).
    pub fn coefficient_bytes(&self) -> usize {
        let s = match &self.stiffness {
            StiffnessData::Shared(c) | StiffnessData::PerCell(c) => c.len(),
        };
        (s + self.mass_weights.len() + self.lumped.as_ref().map_or(0, |l| l.len())) * std::mem::size_of::<T>()
    }

    /// Floating point operations counted by the kernel since the last reset.
    pub fn flop_count(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn apply_count(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.flops.store(0, Ordering::Relaxed);
        self.applies.store(0, Ordering::Relaxed);
    }

    fn check(&self, len: usize) -> Result<(), OperatorError> {
        if len != self.n_dofs() {
            return Err(OperatorError::Size {
                expected: self.n_dofs(),
                got: len,
            });
        }
        Ok(())
    }

    /// `dst = A src`.
    pub fn try_apply(&self, src: &[T], dst: &mut [T]) -> Result<(), OperatorError> {
        self.check(src.len())?;
        self.check(dst.len())?;
        self.apply_with(src, dst, self.mass_coeff, self.stiffness_coeff);
        Ok(())
    }

    /// `dst = M src` with the flavor-consistent mass (diagonal for LGL).
    pub fn mass_apply(&self, src: &[T], dst: &mut [T]) -> Result<(), OperatorError> {
        self.check(src.len())?;
        self.check(dst.len())?;
        match &self.lumped {
            Some(d) => {
                for ((y, x), m) in dst.iter_mut().zip(src).zip(d) {
                    *y = *m * *x;
                }
            }
            None => self.apply_with(src, dst, T::one(), T::zero()),
        }
        Ok(())
    }

    /// `dst = K src`.
    pub fn stiffness_apply(&self, src: &[T], dst: &mut [T]) -> Result<(), OperatorError> {
        self.check(src.len())?;
        self.check(dst.len())?;
        self.apply_with(src, dst, T::zero(), T::one());
        Ok(())
    }

    /// Diagonal of the LGL mass matrix, `None` for the consistent LG mass.
    pub fn mass_lumped(&self) -> Option<&[T]> {
        self.lumped.as_deref()
    }

    /// Row sums of the mass matrix, `M 1`.
    pub fn mass_row_sums(&self) -> Vec<T> {
        if let Some(d) = &self.lumped {
            return d.clone();
        }
        let ones = vec![T::one(); self.n_dofs()];
        let mut out = vec![T::zero(); self.n_dofs()];
        self.apply_with(&ones, &mut out, T::one(), T::zero());
        out
    }

    pub fn apply_with(&self, src: &[T], dst: &mut [T], mass: T, stiff: T) {
        self.applies.fetch_add(1, Ordering::Relaxed);
        match self.batch_width {
            1 => self.apply_batched::<1>(src, dst, mass, stiff),
            2 => self.apply_batched::<2>(src, dst, mass, stiff),
            4 => self.apply_batched::<4>(src, dst, mass, stiff),
            _ => self.apply_batched::<8>(src, dst, mass, stiff),
        }
    }

    fn take_workspace<const W: usize>(&self) -> Workspace<T> {
        let n = self.basis.n();
        let len = n * n * n * W;
        let mut pool = self.pool.lock().unwrap();
        match pool.iter().position(|w| w.u.len() == len) {
            Some(i) => pool.swap_remove(i),
            None => Workspace::new(len),
        }
    }

    fn put_workspace(&self, ws: Workspace<T>) {
        self.pool.lock().unwrap().push(ws);
    }

    fn cell_stiffness(&self, cell: usize) -> &[T] {
        let n = self.basis.n();
        let m = 6 * n * n * n;
        match &self.stiffness {
            StiffnessData::Shared(c) => c,
            StiffnessData::PerCell(c) => &c[m * cell..m * (cell + 1)],
        }
    }

    fn apply_batched<const W: usize>(&self, src: &[T], dst: &mut [T], mass: T, stiff: T) {
        dst.fill(T::zero());
        let dofs = &*self.dofs;
        let n3 = dofs.dofs_per_cell();
        for_each_layer_colored(self.mesh.n_layers(), |k| dofs.layer_dof_range(k), dst, |layer, offset, out| {
            let mut ws = self.take_workspace::<W>();
            let mut flops = 0u64;
            let cells = self.mesh.layer_cells(layer);
            let mut start = cells.start;
            while start < cells.end {
                let lanes = W.min(cells.end - start);
                let lane_cell = |l: usize| start + l.min(lanes - 1);
                for l in 0..W {
                    let ids = dofs.cell_dofs(lane_cell(l));
                    for (idx, &g) in ids.iter().enumerate() {
                        ws.u[idx * W + l] = src[g];
                    }
                }
                let coef: [&[T]; W] = std::array::from_fn(|l| self.cell_stiffness(lane_cell(l)));
                let res = kernel::<T, W>(&self.basis, &self.mass_weights, &coef, mass, stiff, &mut ws, &mut flops);
                let res = res.select(&ws);
                for l in 0..lanes {
                    let ids = dofs.cell_dofs(start + l);
                    for idx in 0..n3 {
                        out[ids[idx] - offset] += res[idx * W + l];
                    }
                }
                start += W;
            }
            self.flops.fetch_add(flops, Ordering::Relaxed);
            self.put_workspace(ws);
        });
    }

    /// Exact diagonal of `A`, from the local kernel applied to unit vectors.
    pub fn diagonal(&self) -> Vec<T> {
        self.diagonal_with(self.mass_coeff, self.stiffness_coeff)
    }

    pub fn diagonal_with(&self, mass: T, stiff: T) -> Vec<T> {
        match self.batch_width {
            1 => self.diagonal_batched::<1>(mass, stiff),
            2 => self.diagonal_batched::<2>(mass, stiff),
            4 => self.diagonal_batched::<4>(mass, stiff),
            _ => self.diagonal_batched::<8>(mass, stiff),
        }
    }

    fn diagonal_batched<const W: usize>(&self, mass: T, stiff: T) -> Vec<T> {
        let dofs = &*self.dofs;
        let n3 = dofs.dofs_per_cell();
        let mut diag = vec![T::zero(); dofs.n_dofs];
        for_each_layer_colored(self.mesh.n_layers(), |k| dofs.layer_dof_range(k), &mut diag, |layer, offset, out| {
            let mut ws = self.take_workspace::<W>();
            let mut flops = 0u64;
            let mut local = vec![T::zero(); n3];
            for cell in self.mesh.layer_cells(layer) {
                self.local_diagonal::<W>(cell, mass, stiff, &mut ws, &mut local, &mut flops);
                for (idx, &g) in dofs.cell_dofs(cell).iter().enumerate() {
                    out[g - offset] += local[idx];
                }
            }
            self.put_workspace(ws);
        });
        diag
    }

    fn local_diagonal<const W: usize>(&self, cell: usize, mass: T, stiff: T, ws: &mut Workspace<T>, local: &mut [T], flops: &mut u64) {
        let n3 = local.len();
        let coef: [&[T]; W] = std::array::from_fn(|_| self.cell_stiffness(cell));
        let mut j0 = 0;
        while j0 < n3 {
            ws.u.fill(T::zero());
            for l in 0..W {
                ws.u[(j0 + l).min(n3 - 1) * W + l] = T::one();
            }
            let res = kernel::<T, W>(&self.basis, &self.mass_weights, &coef, mass, stiff, ws, flops);
            let res = res.select(ws);
            for l in 0..W.min(n3 - j0) {
                local[j0 + l] = res[(j0 + l) * W + l];
            }
            j0 += W;
        }
    }

    /// Dense `(p+1)^3 x (p+1)^3` local matrix of one cell (row-major), built by
    /// applying the kernel to unit vectors.
    pub fn cell_matrix(&self, cell: usize) -> Vec<T> {
        let n3 = self.dofs.dofs_per_cell();
        let mut ws = Workspace::new(n3);
        let coef = [self.cell_stiffness(cell)];
        let mut flops = 0;
        let mut a = vec![T::zero(); n3 * n3];
        for j in 0..n3 {
            ws.u.fill(T::zero());
            ws.u[j] = T::one();
            let res = kernel::<T, 1>(&self.basis, &self.mass_weights, &coef, self.mass_coeff, self.stiffness_coeff, &mut ws, &mut flops);
            let res = res.select(&ws);
            for i in 0..n3 {
                a[i * n3 + j] = res[i];
            }
        }
        a
    }

    /// Kernel flops for one cell at the current coefficients.
    pub fn flops_per_cell(&self) -> u64 {
        let n3 = self.dofs.dofs_per_cell();
        let mut ws = Workspace::new(n3);
        let coef = [self.cell_stiffness(0)];
        let mut flops = 0;
        kernel::<T, 1>(&self.basis, &self.mass_weights, &coef, self.mass_coeff, self.stiffness_coeff, &mut ws, &mut flops);
        flops
    }

    /// `out_i = \int f phi_i` using the operator's quadrature.
    pub fn load_vector(&self, f: impl Fn([T; 3]) -> T, out: &mut [T]) {
        let n = self.basis.n();
        let n3 = n * n * n;
        let h = self.mesh.cell_size();
        let half = T::of(0.5);
        let mut ws = Workspace::<T>::new(n3);
        out.fill(T::zero());
        for cell in 0..self.mesh.n_cells() {
            let (lo, _) = self.mesh.cell_bounds(cell);
            let xq = |a: usize, q: usize| lo[a] + (self.basis.quad.points[q] + T::one()) * half * h[a];
            for k in 0..n {
                for j in 0..n {
                    for i in 0..n {
                        let q = i + n * (j + n * k);
                        ws.t1[q] = self.mass_weights[q] * f([xq(0, i), xq(1, j), xq(2, k)]);
                    }
                }
            }
            let r = back_interpolate::<T, 1>(&self.basis, &mut ws, &mut 0);
            for (idx, &g) in self.dofs.cell_dofs(cell).iter().enumerate() {
                out[g] += r[idx];
            }
        }
    }

    /// Adds `\int_{dOmega} g(x, n) phi_i ds` over the six sides of the box,
    /// integrated with the operator's quadrature on each face.
    pub fn add_boundary_load(&self, g: impl Fn([T; 3], [T; 3]) -> T, out: &mut [T]) {
        let n = self.basis.n();
        let p = self.basis.degree;
        let h = self.mesh.cell_size();
        let half = T::of(0.5);
        let quad = &self.basis.quad;
        let cells = self.mesh.cells;
        let mut fq = vec![T::zero(); n * n];
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let jac = h[a] * h[b] * half * half;
            for side in 0..2 {
                let mut normal = [T::zero(); 3];
                normal[axis] = if side == 0 { -T::one() } else { T::one() };
                let plane_cell = if side == 0 { 0 } else { cells[axis] - 1 };
                let plane_node = if side == 0 { 0 } else { self.dofs.lattice[axis] - 1 };
                for cb in 0..cells[b] {
                    for ca in 0..cells[a] {
                        let mut c = [0; 3];
                        c[axis] = plane_cell;
                        c[a] = ca;
                        c[b] = cb;
                        let (lo, hi) = self.mesh.cell_bounds(self.mesh.cell_index(c));
                        for qb in 0..n {
                            for qa in 0..n {
                                let mut x = [T::zero(); 3];
                                x[axis] = if side == 0 { lo[axis] } else { hi[axis] };
                                x[a] = lo[a] + (quad.points[qa] + T::one()) * half * h[a];
                                x[b] = lo[b] + (quad.points[qb] + T::one()) * half * h[b];
                                fq[qa + n * qb] = quad.weights[qa] * quad.weights[qb] * jac * g(x, normal);
                            }
                        }
                        for ib in 0..n {
                            for ia in 0..n {
                                let mut s = T::zero();
                                for qb in 0..n {
                                    for qa in 0..n {
                                        s += fq[qa + n * qb] * self.basis.value(qa, ia) * self.basis.value(qb, ib);
                                    }
                                }
                                let mut gidx = [0; 3];
                                gidx[axis] = plane_node;
                                gidx[a] = ca * p + ia;
                                gidx[b] = cb * p + ib;
                                out[self.dofs.node_index(gidx)] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> LinearOperator<T> for MonodomainOperator<T> {
    fn n_rows(&self) -> usize {
        self.n_dofs()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.n_dofs(), "operator input length");
        assert_eq!(y.len(), self.n_dofs(), "operator output length");
        self.apply_with(x, y, self.mass_coeff, self.stiffness_coeff);
    }
}

#[derive(Clone, Copy)]
enum Slot {
    U,
    T1,
    T2,
}

impl Slot {
    fn select<T>(self, ws: &Workspace<T>) -> &[T] {
        match self {
            Slot::U => &ws.u,
            Slot::T1 => &ws.t1,
            Slot::T2 => &ws.t2,
        }
    }
}

/// Applies the 1D matrix `m` (row-major, `m[q * n + i]`) along `dir` of a
/// lane-interleaved `n^3` tensor. `TR` uses `m^T`, `ADD` accumulates into dst.
#[inline(always)]
fn contract<T: Scalar, const W: usize, const TR: bool, const ADD: bool>(
    n: usize,
    dir: usize,
    m: &[T],
    src: &[T],
    dst: &mut [T],
    flops: &mut u64,
) {
    let stride = [1, n, n * n][dir];
    for outer in 0..n * n {
        let base = match dir {
            0 => outer * n,
            1 => (outer % n) + (outer / n) * n * n,
            _ => outer,
        };
        for q in 0..n {
            let mut acc = [T::zero(); W];
            for i in 0..n {
                let c = if TR { m[i * n + q] } else { m[q * n + i] };
                let s = &src[(base + i * stride) * W..(base + i * stride + 1) * W];
                for l in 0..W {
                    acc[l] += c * s[l];
                }
            }
            let d = &mut dst[(base + q * stride) * W..(base + q * stride + 1) * W];
            for l in 0..W {
                if ADD {
                    d[l] += acc[l];
                } else {
                    d[l] = acc[l];
                }
            }
        }
    }
    *flops += (2 * n * n * n * n * W) as u64;
}

/// Back-interpolates quadrature data held in `t1` to the nodes.
fn back_interpolate<'a, T: Scalar, const W: usize>(basis: &TensorBasis<T>, ws: &'a mut Workspace<T>, flops: &mut u64) -> &'a [T] {
    if basis.is_collocated() {
        return &ws.t1;
    }
    let n = basis.n();
    let b = &basis.values;
    contract::<T, W, true, false>(n, 2, b, &ws.t1, &mut ws.t2, flops);
    contract::<T, W, true, false>(n, 1, b, &ws.t2, &mut ws.t1, flops);
    contract::<T, W, true, false>(n, 0, b, &ws.t1, &mut ws.t2, flops);
    &ws.t2
}

/// Local action `(mass M_K + stiff K_K) u` for `W` cells held in `ws.u`.
/// Returns the workspace slot containing the result.
fn kernel<T: Scalar, const W: usize>(
    basis: &TensorBasis<T>,
    mass_weights: &[T],
    coef: &[&[T]; W],
    mass: T,
    stiff: T,
    ws: &mut Workspace<T>,
    flops: &mut u64,
) -> Slot {
    let n = basis.n();
    let n3 = n * n * n;
    let lg = !basis.is_collocated();
    let b = &basis.values;
    let dq = &basis.collocation_grads;
    let do_mass = mass != T::zero();
    let do_stiff = stiff != T::zero();

    // values at quadrature points
    let uq_in_u = !lg;
    if lg {
        contract::<T, W, false, false>(n, 0, b, &ws.u, &mut ws.t1, flops);
        contract::<T, W, false, false>(n, 1, b, &ws.t1, &mut ws.t2, flops);
        contract::<T, W, false, false>(n, 2, b, &ws.t2, &mut ws.t1, flops);
    }
    if do_stiff {
        let [g0, g1, g2] = &mut ws.g;
        let uq: &[T] = if uq_in_u { &ws.u } else { &ws.t1 };
        contract::<T, W, false, false>(n, 0, dq, uq, g0, flops);
        contract::<T, W, false, false>(n, 1, dq, uq, g1, flops);
        contract::<T, W, false, false>(n, 2, dq, uq, g2, flops);
        for q in 0..n3 {
            for l in 0..W {
                let c = &coef[l][6 * q..6 * q + 6];
                let i = q * W + l;
                let (a0, a1, a2) = (g0[i], g1[i], g2[i]);
                g0[i] = stiff * (c[0] * a0 + c[1] * a1 + c[2] * a2);
                g1[i] = stiff * (c[1] * a0 + c[3] * a1 + c[4] * a2);
                g2[i] = stiff * (c[2] * a0 + c[4] * a1 + c[5] * a2);
            }
        }
        *flops += (18 * n3 * W) as u64;
    }
    // mass term, stored where the quadrature values were
    let mass_slot: &mut [T] = if uq_in_u { &mut ws.u } else { &mut ws.t1 };
    if do_mass {
        for q in 0..n3 {
            let s = mass * mass_weights[q];
            for l in 0..W {
                mass_slot[q * W + l] *= s;
            }
        }
        *flops += (n3 + n3 * W) as u64;
    }
    let acc_slot = if uq_in_u { Slot::T1 } else { Slot::T2 };
    {
        let (mass_src, acc): (&[T], &mut [T]) = if uq_in_u { (&ws.u, &mut ws.t1) } else { (&ws.t1, &mut ws.t2) };
        if do_stiff {
            let [g0, g1, g2] = &ws.g;
            contract::<T, W, true, false>(n, 0, dq, g0, acc, flops);
            contract::<T, W, true, true>(n, 1, dq, g1, acc, flops);
            contract::<T, W, true, true>(n, 2, dq, g2, acc, flops);
            if do_mass {
                for (a, m) in acc.iter_mut().zip(mass_src) {
                    *a += *m;
                }
                *flops += (n3 * W) as u64;
            }
        } else if do_mass {
            acc.copy_from_slice(mass_src);
        } else {
            acc.fill(T::zero());
        }
    }
    if !lg {
        return acc_slot;
    }
    // acc is t2: interpolate back to the nodes, result in u
    contract::<T, W, true, false>(n, 2, b, &ws.t2, &mut ws.t1, flops);
    contract::<T, W, true, false>(n, 1, b, &ws.t1, &mut ws.t2, flops);
    contract::<T, W, true, false>(n, 0, b, &ws.t2, &mut ws.u, flops);
    Slot::U
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::LevelHierarchy;

    fn unit_cube_op(p: usize, flavor: Flavor, mass: f64) -> MonodomainOperator<f64> {
        let mesh = HexMesh::new([1.0; 3], [1, 1, 1]).unwrap();
        let dofs = Arc::new(DofMap::new(&mesh, p).unwrap());
        let basis = Arc::new(TensorBasis::new(p, flavor).unwrap());
        MonodomainOperator::new(basis, &mesh, dofs, &DiffusionField::isotropic(1.0), mass).unwrap()
    }

    /// Trilinear stiffness on the unit cube: K_ij = prod over axes of the 1D
    /// factors, summed over the derivative direction.
    fn trilinear_stiffness(i: usize, j: usize) -> f64 {
        let m1 = |a: usize, b: usize| if a == b { 1.0 / 3.0 } else { 1.0 / 6.0 };
        let k1 = |a: usize, b: usize| if a == b { 1.0 } else { -1.0 };
        let bit = |v: usize, d: usize| (v >> d) & 1;
        (0..3)
            .map(|d| {
                (0..3)
                    .map(|e| {
                        let (a, b) = (bit(i, e), bit(j, e));
                        if e == d {
                            k1(a, b)
                        } else {
                            m1(a, b)
                        }
                    })
                    .product::<f64>()
            })
            .sum()
    }

    #[test]
    fn q1_stiffness_matches_classical_element() {
        let op = unit_cube_op(1, Flavor::Lg, 0.0);
        let a = op.cell_matrix(0);
        for i in 0..8 {
            for j in 0..8 {
                assert!((a[i * 8 + j] - trilinear_stiffness(i, j)).abs() < 1e-14, "{i} {j}");
            }
        }
    }

    #[test]
    fn q1_consistent_mass() {
        let op = unit_cube_op(1, Flavor::Lg, 1.0);
        let mut v = vec![0.0; 8];
        let mut y = vec![0.0; 8];
        for j in 0..8 {
            v.fill(0.0);
            v[j] = 1.0;
            op.mass_apply(&v, &mut y).unwrap();
            for i in 0..8 {
                let shared = (0..3).filter(|d| (i >> d) & 1 == (j >> d) & 1).count() as i32;
                let expect = 2f64.powi(shared) / 216.0;
                assert!((y[i] - expect).abs() < 1e-15);
            }
        }
        let sums = op.mass_row_sums();
        assert!(sums.iter().all(|s| (s - 0.125).abs() < 1e-15));
    }

    #[test]
    fn constants_are_in_the_stiffness_kernel() {
        for flavor in [Flavor::Lg, Flavor::Lgl] {
            let op = unit_cube_op(3, flavor, 0.0);
            let ones = vec![1.0; op.n_dofs()];
            let mut y = vec![0.0; op.n_dofs()];
            op.try_apply(&ones, &mut y).unwrap();
            assert!(y.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn size_mismatch() {
        let op = unit_cube_op(1, Flavor::Lgl, 1.0);
        let mut y = vec![0.0; 8];
        assert_eq!(op.try_apply(&[0.0; 7], &mut y), Err(OperatorError::Size { expected: 8, got: 7 }));
    }

    #[test]
    fn lumped_mass_and_diagonal() {
        let mesh = HexMesh::new([2.0, 1.0, 1.5], [3, 2, 2]).unwrap();
        let basis = Arc::new(TensorBasis::new(2, Flavor::Lgl).unwrap());
        let dofs = Arc::new(DofMap::new(&mesh, 2).unwrap());
        let op = MonodomainOperator::new(basis, &mesh, dofs, &DiffusionField::slab(), 5.0).unwrap();
        let lumped = op.mass_lumped().unwrap().to_vec();
        let total: f64 = lumped.iter().sum();
        assert!((total - 3.0).abs() < 1e-12);
        let d = op.diagonal_with(5.0, 0.0);
        for (a, b) in d.iter().zip(&lumped) {
            assert!((a - 5.0 * b).abs() <= 1e-14 * a.abs());
            assert!(*a > 0.0);
        }
    }

    #[test]
    fn flop_law_is_quartic() {
        let per_dof = |p: usize| {
            let op = unit_cube_op(p, Flavor::Lg, 1.0);
            op.flops_per_cell() as f64
        };
        let ratio = per_dof(4) / per_dof(1);
        let law = (5.0f64 / 2.0).powi(4);
        assert!((ratio / law - 1.0).abs() < 0.2, "ratio {ratio} vs {law}");
    }

    #[test]
    fn hierarchy_levels_build_operators() {
        let mesh = HexMesh::new([1.0; 3], [4, 4, 2]).unwrap();
        let h = LevelHierarchy::from_fine(mesh, 2, 100).unwrap();
        let basis = Arc::new(TensorBasis::new(2, Flavor::Lgl).unwrap());
        for level in &h.levels {
            let op = MonodomainOperator::new(basis.clone(), &level.mesh, level.dofs.clone(), &DiffusionField::isotropic(1.0), 1.0).unwrap();
            let ones = vec![1.0; op.n_dofs()];
            let mut y = vec![0.0; op.n_dofs()];
            op.try_apply(&ones, &mut y).unwrap();
            let vol: f64 = y.iter().sum();
            assert!((vol - 1.0).abs() < 1e-12);
        }
    }
}
