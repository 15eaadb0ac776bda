//! Structured hexahedral meshes, continuous `Q_p` numbering, multigrid level
//! hierarchies and analytic fiber fields.
//!
//! Global DOFs live on a lattice with `cells[a] * p + 1` nodes per axis and
//! are numbered lexicographically, x fastest. Cells are numbered the same way.
//! Because the local numbering inside a cell is also x fastest, the global
//! indices of every cell come out sorted, which the sparse assembly relies on.

use crate::basis::{Flavor, QuadratureRule};
use crate::scalar::Scalar;
use std::fmt::Debug;
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("extent along axis {axis} must be positive and finite, got {value}")]
    Extent { axis: usize, value: f64 },
    #[error("cell count along axis {0} must be at least 1")]
    CellCount(usize),
    #[error("polynomial degree must be at least 1")]
    Degree,
    #[error("levels are not nested: {0}")]
    NotNested(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexMesh<T> {
    pub origin: [T; 3],
    pub extent: [T; 3],
    pub cells: [usize; 3],
}

impl<T: Scalar> HexMesh<T> {
    pub fn new(extent: [T; 3], cells: [usize; 3]) -> Result<Self, MeshError> {
        Self::with_origin([T::zero(); 3], extent, cells)
    }

    pub fn with_origin(origin: [T; 3], extent: [T; 3], cells: [usize; 3]) -> Result<Self, MeshError> {
        for a in 0..3 {
            if !(extent[a] > T::zero()) || !extent[a].is_finite() {
                return Err(MeshError::Extent {
                    axis: a,
                    value: extent[a].as_f64(),
                });
            }
            if cells[a] == 0 {
                return Err(MeshError::CellCount(a));
            }
        }
        Ok(Self {
            origin,
            extent,
            cells,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    /// Edge lengths of every cell (the grid is uniform).
    pub fn cell_size(&self) -> [T; 3] {
        [0, 1, 2].map(|a| self.extent[a] / T::of_usize(self.cells[a]))
    }

    /// Mean of the three edge lengths.
    pub fn h_avg(&self) -> T {
        let h = self.cell_size();
        (h[0] + h[1] + h[2]) / T::of(3.0)
    }

    pub fn volume(&self) -> T {
        self.extent[0] * self.extent[1] * self.extent[2]
    }

    #[inline]
    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.cells[0] * (c[1] + self.cells[1] * c[2])
    }

    #[inline]
    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let i = cell % self.cells[0];
        let r = cell / self.cells[0];
        [i, r % self.cells[1], r / self.cells[1]]
    }

    /// Lower and upper corners of a cell.
    pub fn cell_bounds(&self, cell: usize) -> ([T; 3], [T; 3]) {
        let c = self.cell_coords(cell);
        let h = self.cell_size();
        let lo = [0, 1, 2].map(|a| self.origin[a] + T::of_usize(c[a]) * h[a]);
        let hi = [0, 1, 2].map(|a| lo[a] + h[a]);
        (lo, hi)
    }

    /// The eight vertices in lexicographic order (x fastest).
    pub fn cell_vertices(&self, cell: usize) -> [[T; 3]; 8] {
        let (lo, hi) = self.cell_bounds(cell);
        std::array::from_fn(|v| {
            [
                if v & 1 == 0 { lo[0] } else { hi[0] },
                if v & 2 == 0 { lo[1] } else { hi[1] },
                if v & 4 == 0 { lo[2] } else { hi[2] },
            ]
        })
    }

    /// Subdivides every cell `factors[a]` times along axis `a`.
    pub fn refined(&self, factors: [usize; 3]) -> Self {
        Self {
            origin: self.origin,
            extent: self.extent,
            cells: [0, 1, 2].map(|a| self.cells[a] * factors[a]),
        }
    }

    /// Cells along the slowest axis form the layers used for parallel scatter.
    pub fn n_layers(&self) -> usize {
        self.cells[2]
    }

    pub fn layer_cells(&self, layer: usize) -> Range<usize> {
        let per = self.cells[0] * self.cells[1];
        layer * per..(layer + 1) * per
    }

    pub fn contains(&self, x: [T; 3], tol: T) -> bool {
        (0..3).all(|a| x[a] >= self.origin[a] - tol && x[a] <= self.origin[a] + self.extent[a] + tol)
    }
}

/// Continuous `Q_p` numbering over a [`HexMesh`].
#[derive(Debug, Clone)]
pub struct DofMap<T> {
    pub degree: usize,
    /// Nodes per axis, `cells[a] * p + 1`.
    pub lattice: [usize; 3],
    pub n_dofs: usize,
    cells: [usize; 3],
    cell_dofs: Vec<usize>,
    coords: Vec<[T; 3]>,
}

impl<T: Scalar> DofMap<T> {
    pub fn new(mesh: &HexMesh<T>, degree: usize) -> Result<Self, MeshError> {
        if degree == 0 {
            return Err(MeshError::Degree);
        }
        let p = degree;
        let n = p + 1;
        let lattice = [0, 1, 2].map(|a| mesh.cells[a] * p + 1);
        let n_dofs = lattice.iter().product();
        let support = QuadratureRule::<T>::new(Flavor::Lgl, n)
            .map_err(|_| MeshError::Degree)?
            .points;
        let h = mesh.cell_size();
        let axis_coords: [Vec<T>; 3] = [0, 1, 2].map(|a| {
            (0..lattice[a])
                .map(|g| {
                    let c = (g / p).min(mesh.cells[a] - 1);
                    let l = g - c * p;
                    let half = T::of(0.5);
                    mesh.origin[a] + T::of_usize(c) * h[a] + (support[l] + T::one()) * half * h[a]
                })
                .collect()
        });
        let mut coords = Vec::with_capacity(n_dofs);
        for k in 0..lattice[2] {
            for j in 0..lattice[1] {
                for i in 0..lattice[0] {
                    coords.push([axis_coords[0][i], axis_coords[1][j], axis_coords[2][k]]);
                }
            }
        }
        let n_cells = mesh.n_cells();
        let mut cell_dofs = Vec::with_capacity(n_cells * n * n * n);
        for cell in 0..n_cells {
            let c = mesh.cell_coords(cell);
            for lk in 0..n {
                for lj in 0..n {
                    for li in 0..n {
                        let g = [c[0] * p + li, c[1] * p + lj, c[2] * p + lk];
                        cell_dofs.push(g[0] + lattice[0] * (g[1] + lattice[1] * g[2]));
                    }
                }
            }
        }
        Ok(Self {
            degree,
            lattice,
            n_dofs,
            cells: mesh.cells,
            cell_dofs,
            coords,
        })
    }

    /// DOFs per cell, `(p + 1)^3`.
    #[inline]
    pub fn dofs_per_cell(&self) -> usize {
        let n = self.degree + 1;
        n * n * n
    }

    #[inline]
    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        let m = self.dofs_per_cell();
        &self.cell_dofs[cell * m..(cell + 1) * m]
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    #[inline]
    pub fn node_index(&self, g: [usize; 3]) -> usize {
        g[0] + self.lattice[0] * (g[1] + self.lattice[1] * g[2])
    }

    #[inline]
    pub fn lattice_coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.lattice[0];
        let r = idx / self.lattice[0];
        [i, r % self.lattice[1], r / self.lattice[1]]
    }

    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> [T; 3] {
        self.coords[idx]
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let g = self.lattice_coords(idx);
        (0..3).any(|a| g[a] == 0 || g[a] + 1 == self.lattice[a])
    }

    /// Nodes in one lattice plane of constant z.
    #[inline]
    pub fn plane_size(&self) -> usize {
        self.lattice[0] * self.lattice[1]
    }

    /// DOFs touched by the cells of `layer`: a contiguous index range.
    pub fn layer_dof_range(&self, layer: usize) -> Range<usize> {
        let p = self.degree;
        let plane = self.plane_size();
        layer * p * plane..((layer + 1) * p + 1) * plane
    }

    /// Closest lattice node to `x` (Euclidean), ties to the lowest index.
    pub fn nearest_node(&self, x: [T; 3]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (i, c) in self.coords.iter().enumerate() {
            let d = (0..3).map(|a| (c[a] - x[a]) * (c[a] - x[a])).fold(T::zero(), |s, v| s + v);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Calls `f(layer, slice)` for every cell layer, where `slice` is the part of
/// `out` covering [`DofMap::layer_dof_range`] of that layer. Even layers run
/// first, then odd ones; within a color the ranges are disjoint, so the layers
/// may run in parallel while every entry still accumulates its contributions
/// in the same order regardless of thread count.
pub(crate) fn for_each_layer_colored<T, F>(n_layers: usize, range_of: impl Fn(usize) -> Range<usize>, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    for color in 0..2 {
        let mut jobs: Vec<(usize, usize, &mut [T])> = Vec::new();
        let mut rest: &mut [T] = out;
        let mut consumed = 0;
        for layer in (color..n_layers).step_by(2) {
            let r = range_of(layer);
            let tail = std::mem::take(&mut rest);
            let (_, tail) = tail.split_at_mut(r.start - consumed);
            let (mine, tail) = tail.split_at_mut(r.end - r.start);
            jobs.push((layer, r.start, mine));
            rest = tail;
            consumed = r.end;
        }
        jobs.into_par_iter().for_each(|(layer, offset, slice)| f(layer, offset, slice));
    }
}

#[derive(Debug, Clone)]
pub struct Level<T> {
    pub mesh: HexMesh<T>,
    pub dofs: Arc<DofMap<T>>,
}

/// Nested meshes from the coarsest (index 0) to the finest, all at degree `p`.
#[derive(Debug, Clone)]
pub struct LevelHierarchy<T> {
    pub degree: usize,
    pub levels: Vec<Level<T>>,
    /// `factors[l]`: per-axis subdivision from level `l` to level `l + 1`.
    pub factors: Vec<[usize; 3]>,
}

impl<T: Scalar> LevelHierarchy<T> {
    pub fn new(coarse: HexMesh<T>, degree: usize) -> Result<Self, MeshError> {
        let dofs = Arc::new(DofMap::new(&coarse, degree)?);
        Ok(Self {
            degree,
            levels: vec![Level { mesh: coarse, dofs }],
            factors: Vec::new(),
        })
    }

    /// Adds a finer level by octree subdivision (every cell split into 8).
    pub fn refine(&mut self) -> Result<(), MeshError> {
        self.refine_with([2, 2, 2])
    }

    pub fn refine_with(&mut self, factors: [usize; 3]) -> Result<(), MeshError> {
        if factors.iter().any(|&f| f != 1 && f != 2) {
            return Err(MeshError::NotNested(format!("factors {factors:?}")));
        }
        let fine = self.finest().mesh.refined(factors);
        let dofs = Arc::new(DofMap::new(&fine, self.degree)?);
        self.levels.push(Level { mesh: fine, dofs });
        self.factors.push(factors);
        Ok(())
    }

    /// Builds the hierarchy below `fine` by halving every axis with an even
    /// cell count, until the coarsest level has at most `max_coarse_dofs` DOFs
    /// or no axis can be halved. Axes with odd counts are kept (semi-coarsening).
    pub fn from_fine(fine: HexMesh<T>, degree: usize, max_coarse_dofs: usize) -> Result<Self, MeshError> {
        if degree == 0 {
            return Err(MeshError::Degree);
        }
        let dofs_of = |c: [usize; 3]| (0..3).map(|a| c[a] * degree + 1).product::<usize>();
        let mut chain = vec![fine.cells];
        loop {
            let cur = *chain.last().unwrap();
            if dofs_of(cur) <= max_coarse_dofs {
                break;
            }
            let f = cur.map(|c| if c % 2 == 0 { 2 } else { 1 });
            if f == [1, 1, 1] {
                break;
            }
            chain.push([0, 1, 2].map(|a| cur[a] / f[a]));
        }
        chain.reverse();
        let coarse = HexMesh::with_origin(fine.origin, fine.extent, chain[0])?;
        let mut h = Self::new(coarse, degree)?;
        for w in chain.windows(2) {
            h.refine_with([0, 1, 2].map(|a| w[1][a] / w[0][a]))?;
        }
        Ok(h)
    }

    pub fn finest(&self) -> &Level<T> {
        self.levels.last().unwrap()
    }

    pub fn coarsest(&self) -> &Level<T> {
        &self.levels[0]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Parent cell on level `level - 1` of `cell` on `level`.
    pub fn parent(&self, level: usize, cell: usize) -> usize {
        let f = self.factors[level - 1];
        let c = self.levels[level].mesh.cell_coords(cell);
        self.levels[level - 1]
            .mesh
            .cell_index([c[0] / f[0], c[1] / f[1], c[2] / f[2]])
    }
}

/// Orthonormal (fiber, sheetlet, sheet-normal) directions.
pub type Frame<T> = [[T; 3]; 3];

pub trait FiberField<T>: Send + Sync + Debug {
    fn frame(&self, x: [T; 3]) -> Frame<T>;

    /// True when the frame does not depend on position.
    fn is_uniform(&self) -> bool {
        false
    }
}

/// Fibers along x, sheetlets along y, normals along z.
#[derive(Debug, Clone, Copy, Default)]
pub struct SlabFibers;

impl<T: Scalar> FiberField<T> for SlabFibers {
    fn frame(&self, _x: [T; 3]) -> Frame<T> {
        let (o, z) = (T::one(), T::zero());
        [[o, z, z], [z, o, z], [z, z, o]]
    }

    fn is_uniform(&self) -> bool {
        true
    }
}

/// A constant, arbitrarily oriented frame.
#[derive(Debug, Clone, Copy)]
pub struct UniformFibers<T> {
    pub frame: Frame<T>,
}

impl<T: Scalar> UniformFibers<T> {
    /// Frame obtained by rotating the slab frame with Euler angles (z, y, x).
    pub fn from_angles(yaw: T, pitch: T, roll: T) -> Self {
        let (cz, sz) = (yaw.cos(), yaw.sin());
        let (cy, sy) = (pitch.cos(), pitch.sin());
        let (cx, sx) = (roll.cos(), roll.sin());
        // columns of R = Rz * Ry * Rx
        let r = [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ];
        let col = |j: usize| [r[0][j], r[1][j], r[2][j]];
        Self {
            frame: [col(0), col(1), col(2)],
        }
    }
}

impl<T: Scalar> FiberField<T> for UniformFibers<T> {
    fn frame(&self, _x: [T; 3]) -> Frame<T> {
        self.frame
    }

    fn is_uniform(&self) -> bool {
        true
    }
}

/// Fibers rotating in the xy-plane linearly with depth z, from `angle_bottom`
/// at `z = z0` to `angle_top` at `z = z0 + thickness`.
#[derive(Debug, Clone, Copy)]
pub struct TransmuralFibers<T> {
    pub z0: T,
    pub thickness: T,
    pub angle_bottom: T,
    pub angle_top: T,
}

impl<T: Scalar> FiberField<T> for TransmuralFibers<T> {
    fn frame(&self, x: [T; 3]) -> Frame<T> {
        let s = ((x[2] - self.z0) / self.thickness).max(T::zero()).min(T::one());
        let th = self.angle_bottom + s * (self.angle_top - self.angle_bottom);
        let (c, sn) = (th.cos(), th.sin());
        let z = T::zero();
        [[c, sn, z], [-sn, c, z], [z, z, T::one()]]
    }
}

/// Conductivities of the slab benchmark in m^2/s (longitudinal, transversal, normal).
pub const SLAB_CONDUCTIVITIES_SI: [f64; 3] = [0.7643e-4, 0.3494e-4, 0.1125e-4];

/// 1 m^2/s = 1e6 mm^2 / 1e3 ms.
pub fn si_to_mm2_per_ms(sigma: f64) -> f64 {
    sigma * 1e3
}

/// Anisotropic diffusion `D = sl f0 f0^T + st s0 s0^T + sn n0 n0^T`.
#[derive(Debug, Clone)]
pub struct DiffusionField<T> {
    pub fibers: Arc<dyn FiberField<T>>,
    /// (longitudinal, transversal, normal) conductivities.
    pub sigma: [T; 3],
}

impl<T: Scalar> DiffusionField<T> {
    pub fn new(fibers: Arc<dyn FiberField<T>>, sigma: [T; 3]) -> Self {
        Self { fibers, sigma }
    }

    pub fn isotropic(sigma: T) -> Self {
        Self::new(Arc::new(SlabFibers), [sigma; 3])
    }

    /// Slab fibers with the benchmark conductivities converted to mm^2/ms.
    pub fn slab() -> Self {
        Self::new(
            Arc::new(SlabFibers),
            SLAB_CONDUCTIVITIES_SI.map(|s| T::of(si_to_mm2_per_ms(s))),
        )
    }

    pub fn is_uniform(&self) -> bool {
        self.fibers.is_uniform()
    }

    pub fn tensor_at(&self, x: [T; 3]) -> [[T; 3]; 3] {
        diffusion_at(x, self)
    }
}

pub fn diffusion_at<T: Scalar>(x: [T; 3], field: &DiffusionField<T>) -> [[T; 3]; 3] {
    let fr = field.fibers.frame(x);
    let mut d = [[T::zero(); 3]; 3];
    for (dir, &s) in fr.iter().zip(&field.sigma) {
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] += s * dir[i] * dir[j];
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_mesh_resolution() {
        let m = HexMesh::<f64>::new([20.0, 7.0, 3.0], [42, 15, 7]).unwrap();
        let h = m.h_avg();
        assert!((h - (20.0 / 42.0 + 7.0 / 15.0 + 3.0 / 7.0) / 3.0).abs() < 1e-15);
        assert!((h - 0.457).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(HexMesh::new([0.0, 1.0, 1.0], [1, 1, 1]).is_err());
        assert!(HexMesh::new([1.0, -1.0, 1.0], [1, 1, 1]).is_err());
        assert_eq!(HexMesh::new([1.0, 1.0, 1.0], [1, 0, 1]).unwrap_err(), MeshError::CellCount(1));
        let m = HexMesh::new([1.0, 1.0, 1.0], [1, 1, 1]).unwrap();
        assert_eq!(DofMap::new(&m, 0).unwrap_err(), MeshError::Degree);
    }

    #[test]
    fn single_cell() {
        let m = HexMesh::new([1.0, 1.0, 1.0], [1, 1, 1]).unwrap();
        assert_eq!(m.n_cells(), 1);
        let v = m.cell_vertices(0);
        assert_eq!(v[0], [0.0, 0.0, 0.0]);
        assert_eq!(v[7], [1.0, 1.0, 1.0]);
        let d = DofMap::new(&m, 1).unwrap();
        assert_eq!(d.n_dofs, 8);
    }

    #[test]
    fn two_cells_share_a_face() {
        let m = HexMesh::new([2.0, 1.0, 1.0], [2, 1, 1]).unwrap();
        let a = m.cell_vertices(0);
        let b = m.cell_vertices(1);
        let shared = a.iter().filter(|v| b.contains(v)).count();
        assert_eq!(shared, 4);
        let d = DofMap::new(&m, 1).unwrap();
        assert_eq!(d.n_dofs, 12);
        let s0: Vec<_> = d.cell_dofs(0).to_vec();
        let s1: Vec<_> = d.cell_dofs(1).to_vec();
        assert_eq!(s0.iter().filter(|i| s1.contains(i)).count(), 4);
    }

    #[test]
    fn slab_dof_count() {
        let m = HexMesh::new([20.0, 7.0, 3.0], [42, 15, 7]).unwrap();
        let d = DofMap::new(&m, 4).unwrap();
        assert_eq!(d.n_dofs, 169 * 61 * 29);
        assert_eq!(d.n_dofs, 298_961);
    }

    #[test]
    fn cell_dofs_are_sorted() {
        let m = HexMesh::new([1.0, 2.0, 3.0], [3, 2, 2]).unwrap();
        let d = DofMap::new(&m, 3).unwrap();
        for c in 0..m.n_cells() {
            assert!(d.cell_dofs(c).windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn octree_refinement_counts() {
        let m = HexMesh::new([1.0, 1.0, 1.0], [1, 1, 1]).unwrap();
        let mut h = LevelHierarchy::new(m, 1).unwrap();
        h.refine().unwrap();
        assert_eq!(h.finest().mesh.n_cells(), 8);
        for c in 0..8 {
            assert_eq!(h.parent(1, c), 0);
            let (lo, hi) = h.finest().mesh.cell_bounds(c);
            assert!(lo.iter().chain(&hi).all(|&x| (0.0..=1.0).contains(&x)));
        }
        h.refine().unwrap();
        assert_eq!(h.finest().mesh.n_cells(), 64);
    }

    #[test]
    fn hierarchy_from_fine_mesh() {
        let m = HexMesh::new([20.0, 7.0, 3.0], [20, 8, 4]).unwrap();
        let h = LevelHierarchy::from_fine(m, 4, 4000).unwrap();
        let cells: Vec<_> = h.levels.iter().map(|l| l.mesh.cells).collect();
        assert_eq!(cells, vec![[5, 2, 1], [10, 4, 2], [20, 8, 4]]);
        assert_eq!(h.factors, vec![[2, 2, 2], [2, 2, 2]]);
        let m = HexMesh::new([1.0, 1.0, 0.05], [20, 20, 1]).unwrap();
        let h = LevelHierarchy::from_fine(m, 3, 4000).unwrap();
        assert_eq!(h.coarsest().mesh.cells, [10, 10, 1]);
        assert_eq!(h.factors[0], [2, 2, 1]);
    }

    #[test]
    fn fiber_frames() {
        let f = SlabFibers;
        let fr: Frame<f64> = f.frame([1.0, 2.0, 3.0]);
        assert_eq!(fr, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let d = DiffusionField::<f64>::slab().tensor_at([0.0; 3]);
        let expect = [0.07643, 0.03494, 0.01125];
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { expect[i] } else { 0.0 };
                assert!((d[i][j] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isotropic_tensor_ignores_fibers() {
        let fibers = Arc::new(UniformFibers::<f64>::from_angles(0.3, -1.1, 2.0));
        let field = DiffusionField::new(fibers, [0.5; 3]);
        let d = field.tensor_at([0.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 0.5 } else { 0.0 };
                assert!((d[i][j] - e).abs() < 1e-15);
            }
        }
    }
}
