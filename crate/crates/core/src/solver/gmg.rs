use super::{cg_solve, CgConfig, ChebyshevSmoother, Jacobi, Preconditioner};
use crate::basis::TensorBasis;
use crate::mesh::{DiffusionField, DofMap, HexMesh, LevelHierarchy, MeshError};
use crate::mf_operator::{MonodomainOperator, OperatorError};
use crate::scalar::Scalar;
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Degree-`p` interpolation between two nested levels and its transpose.
#[derive(Debug, Clone)]
pub struct Transfer<T> {
    coarse_mesh: HexMesh<T>,
    coarse: Arc<DofMap<T>>,
    fine: Arc<DofMap<T>>,
    factors: [usize; 3],
    /// Per axis, `(f p + 1) x (p + 1)` row-major values of the coarse basis at
    /// the fine nodes inside one coarse cell.
    interp: [Vec<T>; 3],
    inv_valence: Vec<T>,
}

impl<T: Scalar> Transfer<T> {
    pub fn new(
        coarse_mesh: &HexMesh<T>,
        coarse: Arc<DofMap<T>>,
        fine: Arc<DofMap<T>>,
        factors: [usize; 3],
        basis: &TensorBasis<T>,
    ) -> Result<Self, MeshError> {
        let p = basis.degree;
        if coarse.degree != p || fine.degree != p {
            return Err(MeshError::NotNested("degree mismatch".into()));
        }
        for a in 0..3 {
            if !(1..=2).contains(&factors[a]) || coarse.cells()[a] * factors[a] != fine.cells()[a] {
                return Err(MeshError::NotNested(format!(
                    "axis {a}: {} cells x {} != {}",
                    coarse.cells()[a],
                    factors[a],
                    fine.cells()[a]
                )));
            }
        }
        let n = p + 1;
        let interp = factors.map(|f| {
            let rows = f * p + 1;
            let mut m = vec![T::zero(); rows * n];
            for r in 0..rows {
                let child = (r / p).min(f - 1);
                let local = r - child * p;
                // child reference node mapped into the parent reference cell
                let xi = if f == 1 {
                    basis.support[local]
                } else {
                    (basis.support[local] + T::of_usize(2 * child) - T::one()) * T::of(0.5)
                };
                let v = if f == 1 { (0..n).map(|i| if i == local { T::one() } else { T::zero() }).collect() } else { basis.lagrange().values(xi) };
                m[r * n..(r + 1) * n].copy_from_slice(&v);
            }
            m
        });
        let mut t = Self {
            coarse_mesh: coarse_mesh.clone(),
            coarse,
            fine,
            factors,
            interp,
            inv_valence: Vec::new(),
        };
        let mut count = vec![0u32; t.fine.n_dofs];
        for cell in 0..t.coarse_mesh.n_cells() {
            t.for_sub_nodes(cell, |_, g| count[g] += 1);
        }
        t.inv_valence = count.iter().map(|&c| T::one() / T::of(c as f64)).collect();
        Ok(t)
    }

    fn sub_dims(&self) -> [usize; 3] {
        let p = self.coarse.degree;
        self.factors.map(|f| f * p + 1)
    }

    /// Calls `f(local_sub_index, fine_global)` for fine nodes inside coarse `cell`.
    fn for_sub_nodes(&self, cell: usize, mut f: impl FnMut(usize, usize)) {
        let p = self.coarse.degree;
        let c = self.coarse_mesh.cell_coords(cell);
        let m = self.sub_dims();
        for k in 0..m[2] {
            for j in 0..m[1] {
                for i in 0..m[0] {
                    let g = [
                        c[0] * self.factors[0] * p + i,
                        c[1] * self.factors[1] * p + j,
                        c[2] * self.factors[2] * p + k,
                    ];
                    f(i + m[0] * (j + m[1] * k), self.fine.node_index(g));
                }
            }
        }
    }

    /// `fine = P coarse`.
    pub fn prolongate(&self, coarse: &[T], fine: &mut [T]) {
        fine.fill(T::zero());
        self.prolongate_add(coarse, fine);
    }

    /// `fine += P coarse`.
    pub fn prolongate_add(&self, coarse: &[T], fine: &mut [T]) {
        let n = self.coarse.degree + 1;
        let m = self.sub_dims();
        let mut a = vec![T::zero(); m[0] * m[1] * m[2]];
        let mut b = a.clone();
        for cell in 0..self.coarse_mesh.n_cells() {
            let ids = self.coarse.cell_dofs(cell);
            // x sweep: [n][n][n] -> [n][n][m0]
            for kj in 0..n * n {
                for r in 0..m[0] {
                    let row = &self.interp[0][r * n..(r + 1) * n];
                    let mut s = T::zero();
                    for i in 0..n {
                        s += row[i] * coarse[ids[kj * n + i]];
                    }
                    a[kj * m[0] + r] = s;
                }
            }
            // y sweep: [n][n][m0] -> [n][m1][m0]
            for k in 0..n {
                for r in 0..m[1] {
                    let row = &self.interp[1][r * n..(r + 1) * n];
                    for i0 in 0..m[0] {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += row[j] * a[(k * n + j) * m[0] + i0];
                        }
                        b[(k * m[1] + r) * m[0] + i0] = s;
                    }
                }
            }
            // z sweep: [n][m1][m0] -> [m2][m1][m0]
            for r in 0..m[2] {
                let row = &self.interp[2][r * n..(r + 1) * n];
                for ji in 0..m[1] * m[0] {
                    let mut s = T::zero();
                    for k in 0..n {
                        s += row[k] * b[k * m[1] * m[0] + ji];
                    }
                    a[r * m[1] * m[0] + ji] = s;
                }
            }
            self.for_sub_nodes(cell, |l, g| fine[g] += self.inv_valence[g] * a[l]);
        }
    }

    /// `coarse = P^T fine`.
    pub fn restrict(&self, fine: &[T], coarse: &mut [T]) {
        coarse.fill(T::zero());
        let n = self.coarse.degree + 1;
        let m = self.sub_dims();
        let mut a = vec![T::zero(); m[0] * m[1] * m[2]];
        let mut b = a.clone();
        for cell in 0..self.coarse_mesh.n_cells() {
            self.for_sub_nodes(cell, |l, g| a[l] = self.inv_valence[g] * fine[g]);
            // z: [m2][m1][m0] -> [n][m1][m0]
            for k in 0..n {
                for ji in 0..m[1] * m[0] {
                    let mut s = T::zero();
                    for r in 0..m[2] {
                        s += self.interp[2][r * n + k] * a[r * m[1] * m[0] + ji];
                    }
                    b[k * m[1] * m[0] + ji] = s;
                }
            }
            // y: [n][m1][m0] -> [n][n][m0]
            for k in 0..n {
                for j in 0..n {
                    for i0 in 0..m[0] {
                        let mut s = T::zero();
                        for r in 0..m[1] {
                            s += self.interp[1][r * n + j] * b[(k * m[1] + r) * m[0] + i0];
                        }
                        a[(k * n + j) * m[0] + i0] = s;
                    }
                }
            }
            // x: [n][n][m0] -> [n][n][n]
            let ids = self.coarse.cell_dofs(cell);
            for kj in 0..n * n {
                for i in 0..n {
                    let mut s = T::zero();
                    for r in 0..m[0] {
                        s += self.interp[0][r * n + i] * a[kj * m[0] + r];
                    }
                    coarse[ids[kj * n + i]] += s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmgConfig {
    pub smoothing_degree: usize,
    pub lanczos_iters: usize,
    pub smoothing_range: (f64, f64),
    pub coarse_tol_rel: f64,
    pub coarse_max_iter: usize,
    pub max_coarse_dofs: usize,
}

impl Default for GmgConfig {
    fn default() -> Self {
        Self {
            smoothing_degree: 5,
            lanczos_iters: 10,
            smoothing_range: (0.08, 1.2),
            coarse_tol_rel: 1e-12,
            coarse_max_iter: 2000,
            max_coarse_dofs: 4000,
        }
    }
}

#[derive(Debug)]
struct Level<T> {
    op: MonodomainOperator<T>,
    smoother: ChebyshevSmoother<T>,
    diag: Vec<T>,
    b: Vec<T>,
    x: Vec<T>,
    res: Vec<T>,
}

/// Geometric multigrid V-cycle with Chebyshev smoothing; every level is
/// applied matrix-free.
#[derive(Debug)]
pub struct GmgPreconditioner<T> {
    cfg: GmgConfig,
    levels: Vec<Level<T>>,
    transfers: Vec<Transfer<T>>,
    pub cycles: usize,
    pub coarse_iterations: usize,
    pub level_time: Vec<Duration>,
}

impl<T: Scalar> GmgPreconditioner<T> {
    pub fn new(
        hierarchy: &LevelHierarchy<T>,
        basis: Arc<TensorBasis<T>>,
        diffusion: &DiffusionField<T>,
        mass_coeff: T,
        batch_width: usize,
        cfg: GmgConfig,
    ) -> Result<Self, OperatorError> {
        let mut levels = Vec::with_capacity(hierarchy.len());
        for lv in &hierarchy.levels {
            let op = MonodomainOperator::new(basis.clone(), &lv.mesh, lv.dofs.clone(), diffusion, mass_coeff)?.with_batch_width(batch_width)?;
            let n = op.n_dofs();
            levels.push(Level {
                smoother: ChebyshevSmoother::new(&vec![T::one(); n], 1.0, cfg.smoothing_degree),
                diag: Vec::new(),
                op,
                b: vec![T::zero(); n],
                x: vec![T::zero(); n],
                res: vec![T::zero(); n],
            });
        }
        let mut transfers = Vec::new();
        for l in 1..hierarchy.len() {
            let c = &hierarchy.levels[l - 1];
            let f = &hierarchy.levels[l];
            transfers.push(Transfer::new(&c.mesh, c.dofs.clone(), f.dofs.clone(), hierarchy.factors[l - 1], &basis).map_err(|_| OperatorError::Mismatch)?);
        }
        let n_levels = levels.len();
        let mut g = Self {
            cfg,
            levels,
            transfers,
            cycles: 0,
            coarse_iterations: 0,
            level_time: vec![Duration::ZERO; n_levels],
        };
        g.setup();
        Ok(g)
    }

    /// Diagonals and eigenvalue estimates for the current coefficients.
    fn setup(&mut self) {
        let cfg = self.cfg;
        for lv in &mut self.levels {
            lv.diag = lv.op.diagonal();
            lv.smoother = ChebyshevSmoother::for_operator(&lv.op, &lv.diag, cfg.smoothing_degree, cfg.lanczos_iters)
                .with_range(cfg.smoothing_range.0, cfg.smoothing_range.1);
        }
    }

    pub fn set_mass_coeff(&mut self, c: T) {
        if self.levels.iter().all(|l| l.op.mass_coeff() == c) {
            return;
        }
        for lv in &mut self.levels {
            lv.op.set_mass_coeff(c);
        }
        self.setup();
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_dofs(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.op.n_dofs()).collect()
    }

    pub fn lambda_max(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.smoother.lambda_max).collect()
    }

    pub fn fine_operator(&self) -> &MonodomainOperator<T> {
        &self.levels.last().unwrap().op
    }

    pub fn vcycle(&mut self, r: &[T], z: &mut [T]) {
        let top = self.levels.len() - 1;
        self.levels[top].b.copy_from_slice(r);
        self.cycle(top);
        z.copy_from_slice(&self.levels[top].x);
        self.cycles += 1;
    }

    fn cycle(&mut self, l: usize) {
        let start = Instant::now();
        if l == 0 {
            let Level { op, diag, b, x, .. } = &mut self.levels[0];
            x.fill(T::zero());
            let cfg = CgConfig {
                tol_abs: 0.0,
                tol_reduction: 0.0,
                tol_rel: self.cfg.coarse_tol_rel,
                max_iter: self.cfg.coarse_max_iter,
            };
            let mut jac = Jacobi::new(diag);
            if let Ok(res) = cg_solve(&*op, b, x, &cfg, Some(&mut jac)) {
                self.coarse_iterations += res.iterations;
            }
            self.level_time[0] += start.elapsed();
            return;
        }
        {
            let Level { op, smoother, b, x, res, .. } = &mut self.levels[l];
            smoother.smooth_from_zero(&*op, b, x, res);
        }
        {
            let (lo, hi) = self.levels.split_at_mut(l);
            self.transfers[l - 1].restrict(&hi[0].res, &mut lo[l - 1].b);
        }
        self.level_time[l] += start.elapsed();
        self.cycle(l - 1);
        let start = Instant::now();
        {
            let (lo, hi) = self.levels.split_at_mut(l);
            self.transfers[l - 1].prolongate_add(&lo[l - 1].x, &mut hi[0].x);
        }
        let Level { op, smoother, b, x, .. } = &mut self.levels[l];
        smoother.smooth(&*op, b, x);
        self.level_time[l] += start.elapsed();
    }
}

impl<T: Scalar> Preconditioner<T> for GmgPreconditioner<T> {
    fn apply(&mut self, r: &[T], z: &mut [T]) {
        self.vcycle(r, z);
    }
}
