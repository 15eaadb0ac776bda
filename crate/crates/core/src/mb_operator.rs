//! Assembled sparse baseline: CSR storage of `c_M M + c_K K`.
//!
//! Local matrices are computed densely by summing rank-one contributions of
//! every quadrature point, without sum factorization, so the assembled matrix
//! serves as an independent check of the matrix-free kernel.

use crate::basis::TensorBasis;
use crate::mesh::{diffusion_at, for_each_layer_colored, DiffusionField, DofMap, HexMesh};
use crate::mf_operator::LinearOperator;
use crate::scalar::Scalar;
use rayon::prelude::*;
use std::io::Write;
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("vector length {got} does not match matrix dimension {expected}")]
    Size { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Square matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (c, v) = self.row(i);
        match c.binary_search(&(j as u32)) {
            Ok(k) => v[k],
            Err(_) => T::zero(),
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Bytes for values, column indices and row offsets.
    pub fn memory_bytes(&self) -> usize {
        self.nnz() * (std::mem::size_of::<T>() + std::mem::size_of::<u32>()) + self.row_ptr.len() * std::mem::size_of::<usize>()
    }

    pub fn spmv(&self, x: &[T], y: &mut [T]) -> Result<(), SparseError> {
        for len in [x.len(), y.len()] {
            if len != self.n {
                return Err(SparseError::Size {
                    expected: self.n,
                    got: len,
                });
            }
        }
        y.par_chunks_mut(1024).enumerate().for_each(|(chunk, ys)| {
            for (k, yi) in ys.iter_mut().enumerate() {
                let i = chunk * 1024 + k;
                let mut s = T::zero();
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    s += self.values[p] * x[self.col_idx[p] as usize];
                }
                *yi = s;
            }
        });
        Ok(())
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        let mut scale = T::zero();
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                scale = scale.max(a.abs());
                worst = worst.max((a - self.get(j as usize, i)).abs());
            }
        }
        if scale > T::zero() {
            worst / scale
        } else {
            worst
        }
    }

    /// Number of nonzero entries in row `i`.
    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Dense row-major copy, for small test problems.
    pub fn to_dense(&self) -> Vec<T> {
        let mut a = vec![T::zero(); self.n * self.n];
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                a[i * self.n + j as usize] = x;
            }
        }
        a
    }

    /// Coordinate text export: one `row col value` line per stored entry.
    pub fn write_coo(&self, mut out: impl Write) -> Result<(), SparseError> {
        writeln!(out, "% {} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, x) in c.iter().zip(v) {
                writeln!(out, "{i} {j} {:e}", x.as_f64())?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> LinearOperator<T> for SparseMatrix<T> {
    fn n_rows(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        self.spmv(x, y).expect("sparse operand length");
    }
}

/// Column range coupled to lattice index `g` along one axis.
fn coupled(g: usize, p: usize, len: usize) -> Range<usize> {
    if g.is_multiple_of(p) {
        g.saturating_sub(p)..(g + p + 1).min(len)
    } else {
        let lo = g / p * p;
        lo..lo + p + 1
    }
}

/// Assembles `c_M M + c_K K` on a fixed sparsity pattern.
#[derive(Debug)]
pub struct MatrixAssembler<T> {
    basis: Arc<TensorBasis<T>>,
    mesh: HexMesh<T>,
    dofs: Arc<DofMap<T>>,
    diffusion: DiffusionField<T>,
    pattern: SparseMatrix<T>,
}

impl<T: Scalar> MatrixAssembler<T> {
    pub fn new(basis: Arc<TensorBasis<T>>, mesh: &HexMesh<T>, dofs: Arc<DofMap<T>>, diffusion: DiffusionField<T>) -> Self {
        let pattern = Self::build_pattern(&dofs);
        Self {
            basis,
            mesh: mesh.clone(),
            dofs,
            diffusion,
            pattern,
        }
    }

    fn build_pattern(dofs: &DofMap<T>) -> SparseMatrix<T> {
        let p = dofs.degree;
        let lat = dofs.lattice;
        let n = dofs.n_dofs;
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut total = 0;
        for r in 0..n {
            let g = dofs.lattice_coords(r);
            total += (0..3).map(|a| coupled(g[a], p, lat[a]).len()).product::<usize>();
            row_ptr.push(total);
        }
        let mut col_idx = Vec::with_capacity(total);
        for r in 0..n {
            let g = dofs.lattice_coords(r);
            let rg = [0, 1, 2].map(|a| coupled(g[a], p, lat[a]));
            for k in rg[2].clone() {
                for j in rg[1].clone() {
                    for i in rg[0].clone() {
                        col_idx.push(dofs.node_index([i, j, k]) as u32);
                    }
                }
            }
        }
        SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values: vec![T::zero(); total],
        }
    }

    pub fn pattern(&self) -> &SparseMatrix<T> {
        &self.pattern
    }

    pub fn assemble(&self, mass: T, stiff: T) -> SparseMatrix<T> {
        let mut a = self.pattern.clone();
        self.assemble_into(&mut a, mass, stiff);
        a
    }

    /// Overwrites the values of `a`, which must carry this assembler's pattern.
    pub fn assemble_into(&self, a: &mut SparseMatrix<T>, mass: T, stiff: T) {
        assert_eq!(a.row_ptr, self.pattern.row_ptr, "foreign sparsity pattern");
        a.values.fill(T::zero());
        let dofs = &*self.dofs;
        let p = dofs.degree;
        let lat = dofs.lattice;
        let n3 = dofs.dofs_per_cell();
        let row_ptr = &a.row_ptr;
        let range_of = |k: usize| {
            let r = dofs.layer_dof_range(k);
            row_ptr[r.start]..row_ptr[r.end]
        };
        for_each_layer_colored(self.mesh.n_layers(), range_of, &mut a.values, |layer, offset, vals| {
            let mut local = vec![T::zero(); n3 * n3];
            let mut scratch = LocalScratch::new(&self.basis);
            for cell in self.mesh.layer_cells(layer) {
                self.local_matrix(cell, mass, stiff, &mut scratch, &mut local);
                let ids = dofs.cell_dofs(cell);
                for (li, &gi) in ids.iter().enumerate() {
                    let g = dofs.lattice_coords(gi);
                    let rg = [0, 1, 2].map(|ax| coupled(g[ax], p, lat[ax]));
                    let base = row_ptr[gi] - offset;
                    for (lj, &gj) in ids.iter().enumerate() {
                        let c = dofs.lattice_coords(gj);
                        let pos = ((c[2] - rg[2].start) * rg[1].len() + (c[1] - rg[1].start)) * rg[0].len() + (c[0] - rg[0].start);
                        vals[base + pos] += local[li * n3 + lj];
                    }
                }
            }
        });
    }

    /// Dense local matrix of `cell` (row-major), symmetric by construction.
    pub fn local_matrix(&self, cell: usize, mass: T, stiff: T, s: &mut LocalScratch<T>, out: &mut [T]) {
        let n = self.basis.n();
        let n3 = n * n * n;
        let h = self.mesh.cell_size();
        let half = T::of(0.5);
        let det = h[0] * h[1] * h[2] * half * half * half;
        let inv = h.map(|x| T::of(2.0) / x);
        let (lo, _) = self.mesh.cell_bounds(cell);
        let quad = &self.basis.quad;
        out.fill(T::zero());
        let collocated = self.basis.is_collocated();
        for qk in 0..n {
            for qj in 0..n {
                for qi in 0..n {
                    let q = [qi, qj, qk];
                    let x = [0, 1, 2].map(|a| lo[a] + (quad.points[q[a]] + T::one()) * half * h[a]);
                    let w = quad.weights[qi] * quad.weights[qj] * quad.weights[qk] * det;
                    let d = diffusion_at(x, &self.diffusion);
                    // physical gradients and values of all local shape functions
                    for k in 0..n {
                        for j in 0..n {
                            for i in 0..n {
                                let l = i + n * (j + n * k);
                                let (bi, bj, bk) = (self.basis.value(qi, i), self.basis.value(qj, j), self.basis.value(qk, k));
                                s.phi[l] = bi * bj * bk;
                                s.grad[0][l] = inv[0] * self.basis.grad(qi, i) * bj * bk;
                                s.grad[1][l] = inv[1] * bi * self.basis.grad(qj, j) * bk;
                                s.grad[2][l] = inv[2] * bi * bj * self.basis.grad(qk, k);
                            }
                        }
                    }
                    for l in 0..n3 {
                        for a in 0..3 {
                            s.flux[a][l] = stiff * w * (d[a][0] * s.grad[0][l] + d[a][1] * s.grad[1][l] + d[a][2] * s.grad[2][l]);
                        }
                    }
                    let mw = mass * w;
                    for r in 0..n3 {
                        let row = &mut out[r * n3..(r + 1) * n3];
                        let (g0, g1, g2) = (s.grad[0][r], s.grad[1][r], s.grad[2][r]);
                        for c in r..n3 {
                            row[c] += g0 * s.flux[0][c] + g1 * s.flux[1][c] + g2 * s.flux[2][c];
                        }
                        if collocated {
                            row[r] += mw * s.phi[r] * s.phi[r];
                        } else {
                            let pr = mw * s.phi[r];
                            for c in r..n3 {
                                row[c] += pr * s.phi[c];
                            }
                        }
                    }
                }
            }
        }
        for r in 0..n3 {
            for c in 0..r {
                out[r * n3 + c] = out[c * n3 + r];
            }
        }
    }
}

#[derive(Debug)]
pub struct LocalScratch<T> {
    phi: Vec<T>,
    grad: [Vec<T>; 3],
    flux: [Vec<T>; 3],
}

impl<T: Scalar> LocalScratch<T> {
    pub fn new(basis: &TensorBasis<T>) -> Self {
        let n3 = basis.n().pow(3);
        let z = || vec![T::zero(); n3];
        Self {
            phi: z(),
            grad: [z(), z(), z()],
            flux: [z(), z(), z()],
        }
    }
}

/// One-shot assembly of `mass M + K`.
pub fn assemble<T: Scalar>(
    basis: Arc<TensorBasis<T>>,
    mesh: &HexMesh<T>,
    dofs: Arc<DofMap<T>>,
    diffusion: &DiffusionField<T>,
    mass_coeff: T,
) -> SparseMatrix<T> {
    MatrixAssembler::new(basis, mesh, dofs, diffusion.clone()).assemble(mass_coeff, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Flavor;

    fn setup(cells: [usize; 3], p: usize, flavor: Flavor) -> MatrixAssembler<f64> {
        let mesh = HexMesh::new([1.0, 0.7, 0.4], cells).unwrap();
        let dofs = Arc::new(DofMap::new(&mesh, p).unwrap());
        let basis = Arc::new(TensorBasis::new(p, flavor).unwrap());
        MatrixAssembler::new(basis, &mesh, dofs, DiffusionField::slab())
    }

    #[test]
    fn single_cell_q1() {
        let asm = setup([1, 1, 1], 1, Flavor::Lgl);
        let k = asm.assemble(0.0, 1.0);
        let m = asm.assemble(1.0, 0.0);
        for i in 0..8 {
            let (c, v) = k.row(i);
            let s: f64 = v.iter().sum();
            assert!(s.abs() < 1e-15);
            assert_eq!(c.len(), 8);
            for j in 0..8 {
                if i != j {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
            assert!(m.get(i, i) > 0.0);
        }
    }

    #[test]
    fn interior_row_widths() {
        let asm = setup([3, 3, 3], 1, Flavor::Lg);
        let a = asm.assemble(1.0, 1.0);
        let centre = 1 + 4 * (1 + 4);
        assert_eq!(a.row_nnz(centre), 27);
        let asm = setup([3, 3, 3], 4, Flavor::Lgl);
        let a = asm.assemble(1.0, 1.0);
        // a vertex node shared by eight cells
        let lat = 13;
        let v = 4 + lat * (4 + lat * 4);
        assert_eq!(a.row_nnz(v), 729);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        for flavor in [Flavor::Lg, Flavor::Lgl] {
            let asm = setup([3, 2, 2], 3, flavor);
            let k = asm.assemble(0.0, 1.0);
            let ones = vec![1.0; k.n];
            let mut y = vec![0.0; k.n];
            k.spmv(&ones, &mut y).unwrap();
            let scale = k.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(y.iter().all(|v| v.abs() < 1e-10 * scale));
            assert!(k.asymmetry() < 1e-14);
        }
    }

    #[test]
    fn coo_export() {
        let asm = setup([1, 1, 1], 1, Flavor::Lgl);
        let m = asm.assemble(1.0, 0.0);
        let mut buf = Vec::new();
        m.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 64);
        assert!(text.lines().nth(1).unwrap().starts_with("0 0 "));
    }

    #[test]
    fn memory_report() {
        let asm = setup([2, 2, 2], 2, Flavor::Lgl);
        let a = asm.assemble(1.0, 1.0);
        assert_eq!(a.memory_bytes(), a.nnz() * 12 + (a.n + 1) * 8);
    }
}
