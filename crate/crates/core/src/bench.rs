//! Desk-scale studies: BDF order on a manufactured heat problem, spectral
//! convergence of the elliptic operator, and slab sweeps with error, speedup,
//! phase and iteration tables.

use crate::app::{binary_hash, default_probe, io_context, run, AppError, RunOutcome};
use crate::basis::{Flavor, TensorBasis};
use crate::config::RunConfig;
use crate::ionic::Passive;
use crate::mesh::{DiffusionField, DofMap, HexMesh};
use crate::mf_operator::MonodomainOperator;
use crate::post::{error_norms, ErrorNorms, SpaceTimeAccumulator};
use crate::solver::{cg_solve, CgConfig, Jacobi};
use crate::stepper::{Bdf, PreconditionerKind, Problem, Simulation, SolverMode, Source, TimeLoopConfig};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    App(#[from] AppError),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("study setup failed: {0}")]
    Setup(String),
}

fn setup<E: std::fmt::Display>(e: E) -> BenchError {
    BenchError::Setup(e.to_string())
}

// ---------------------------------------------------------------------------
// heat equation with manufactured solutions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatSolution {
    /// `(x^2 + y^2)(2 + sin(pi t))`
    Polynomial,
    /// `sin(pi x) sin(pi y)(2 + sin(pi t))`
    SineProduct,
}

impl HeatSolution {
    pub fn label(self) -> &'static str {
        match self {
            HeatSolution::Polynomial => "polynomial",
            HeatSolution::SineProduct => "sine_product",
        }
    }

    fn time_factor(t: f64) -> (f64, f64) {
        (2.0 + (PI * t).sin(), PI * (PI * t).cos())
    }

    /// Value and gradient.
    pub fn exact(self, x: [f64; 3], t: f64) -> (f64, [f64; 3]) {
        let (g, _) = Self::time_factor(t);
        match self {
            HeatSolution::Polynomial => ((x[0] * x[0] + x[1] * x[1]) * g, [2.0 * x[0] * g, 2.0 * x[1] * g, 0.0]),
            HeatSolution::SineProduct => {
                let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
                let (cx, cy) = ((PI * x[0]).cos(), (PI * x[1]).cos());
                (sx * sy * g, [PI * cx * sy * g, PI * sx * cy * g, 0.0])
            }
        }
    }

    /// `u_t - sigma lap u`.
    pub fn forcing(self, x: [f64; 3], t: f64, sigma: f64) -> f64 {
        let (g, dg) = Self::time_factor(t);
        match self {
            HeatSolution::Polynomial => (x[0] * x[0] + x[1] * x[1]) * dg - 4.0 * sigma * g,
            HeatSolution::SineProduct => {
                let s = (PI * x[0]).sin() * (PI * x[1]).sin();
                s * dg + 2.0 * PI * PI * sigma * s * g
            }
        }
    }
}

/// Manufactured forcing plus the exact Neumann flux.
struct HeatSource {
    solution: HeatSolution,
    sigma: f64,
}

impl Source<f64> for HeatSource {
    fn nodal(&self, x: [f64; 3], t: f64) -> f64 {
        self.solution.forcing(x, t, self.sigma)
    }

    fn add_load(&self, op: &MonodomainOperator<f64>, t: f64, b: &mut [f64]) {
        op.add_boundary_load(
            |x, n| {
                let (_, g) = self.solution.exact(x, t);
                self.sigma * (g[0] * n[0] + g[1] * n[1] + g[2] * n[2])
            },
            b,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BdfStudyConfig {
    pub degrees: Vec<usize>,
    pub schemes: Vec<Bdf>,
    /// Side length of the square and the mesh size; the mesh is one cell thick.
    pub side: f64,
    pub h: f64,
    pub sigma: f64,
    pub flavor: Flavor,
    pub preconditioner: PreconditionerKind,
    pub polynomial_dts: Vec<f64>,
    pub polynomial_t_final: f64,
    pub sine_dts: Vec<f64>,
    pub sine_t_final: f64,
    /// Steps with `dt` at or below this are on the expected plateau.
    pub plateau_dt: f64,
}

impl Default for BdfStudyConfig {
    fn default() -> Self {
        Self {
            degrees: vec![3, 4],
            schemes: vec![Bdf::One, Bdf::Two, Bdf::Three],
            side: 1.0,
            h: 0.05,
            sigma: 1.0,
            flavor: Flavor::Lgl,
            preconditioner: PreconditionerKind::Jacobi,
            polynomial_dts: vec![0.1, 0.05, 0.025, 0.0125],
            polynomial_t_final: 1.0,
            sine_dts: vec![2e-3, 1e-3, 5e-4, 2.5e-4, 1e-4, 5e-5, 2.5e-5],
            sine_t_final: 0.01,
            plateau_dt: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BdfRow {
    pub solution: HeatSolution,
    pub degree: usize,
    pub scheme: Bdf,
    pub dt: f64,
    pub l2: f64,
    pub h1: f64,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeRow {
    pub solution: HeatSolution,
    pub degree: usize,
    pub scheme: Bdf,
    /// Least-squares slope of `log err` against `log dt`.
    pub slope_l2: f64,
    pub slope_h1: f64,
    /// Points used in the fit.
    pub points: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BdfStudy {
    pub rows: Vec<BdfRow>,
    /// Polynomial solution over all `dt`.
    pub slopes: Vec<SlopeRow>,
    /// Sine solution restricted to `dt <= plateau_dt`.
    pub plateau_slopes: Vec<SlopeRow>,
    /// Sine solution restricted to `dt > plateau_dt`.
    pub pre_plateau_slopes: Vec<SlopeRow>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// One manufactured heat run; the history is initialised exactly so every
/// step uses the full scheme.
pub fn heat_run(cfg: &BdfStudyConfig, solution: HeatSolution, degree: usize, scheme: Bdf, dt: f64, t_final: f64) -> Result<BdfRow, BenchError> {
    let n = (cfg.side / cfg.h).round() as usize;
    let mesh = HexMesh::new([cfg.side, cfg.side, cfg.h], [n, n, 1]).map_err(setup)?;
    let problem = Problem {
        mesh: mesh.clone(),
        degree,
        flavor: cfg.flavor,
        diffusion: DiffusionField::isotropic(cfg.sigma),
        model: Arc::new(Passive),
        source: Arc::new(HeatSource { solution, sigma: cfg.sigma }),
    };
    let tl = TimeLoopConfig {
        dt,
        t_final,
        scheme,
        solver: SolverMode::MatrixFree,
        preconditioner: cfg.preconditioner,
        cg: CgConfig {
            tol_abs: 1e-14,
            tol_rel: 1e-13,
            tol_reduction: 0.0,
            max_iter: 2000,
        },
        ..TimeLoopConfig::default()
    };
    let mut sim = Simulation::new(problem, tl).map_err(AppError::from)?;
    let dofs = sim.dofs().clone();
    let levels: Vec<Vec<f64>> = (0..scheme.order())
        .map(|j| {
            let t = -(j as f64) * dt;
            dofs.coords().iter().map(|&x| solution.exact(x, t).0).collect()
        })
        .collect();
    sim.set_history(levels, 0);
    let mut acc = SpaceTimeAccumulator::new(degree, dt);
    let steps = sim.cfg.n_steps();
    let mut iterations = 0usize;
    for _ in 0..steps {
        let log = sim.step().map_err(AppError::from)?;
        iterations += log.iterations;
        let t = sim.time();
        acc.add(&mesh, &dofs, sim.potential(), |x| solution.exact(x, t));
    }
    let norms = acc.finish();
    Ok(BdfRow {
        solution,
        degree,
        scheme,
        dt,
        l2: norms.l2,
        h1: norms.h1,
        mean_iterations: iterations as f64 / steps.max(1) as f64,
    })
}

fn slope_of(rows: &[&BdfRow]) -> Option<SlopeRow> {
    if rows.len() < 2 {
        return None;
    }
    let dt: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let l2: Vec<f64> = rows.iter().map(|r| r.l2).collect();
    let h1: Vec<f64> = rows.iter().map(|r| r.h1).collect();
    Some(SlopeRow {
        solution: rows[0].solution,
        degree: rows[0].degree,
        scheme: rows[0].scheme,
        slope_l2: loglog_slope(&dt, &l2),
        slope_h1: loglog_slope(&dt, &h1),
        points: rows.len(),
    })
}

pub fn bdf_study(cfg: &BdfStudyConfig, mut progress: impl FnMut(&BdfRow)) -> Result<BdfStudy, BenchError> {
    if cfg.degrees.is_empty() || cfg.schemes.is_empty() {
        return Err(BenchError::Plan("bdf study needs at least one degree and one scheme".into()));
    }
    let mut study = BdfStudy::default();
    for &(solution, dts, t_final) in &[
        (HeatSolution::Polynomial, &cfg.polynomial_dts, cfg.polynomial_t_final),
        (HeatSolution::SineProduct, &cfg.sine_dts, cfg.sine_t_final),
    ] {
        for &degree in &cfg.degrees {
            for &scheme in &cfg.schemes {
                let start = study.rows.len();
                for &dt in dts.iter() {
                    let row = heat_run(cfg, solution, degree, scheme, dt, t_final)?;
                    progress(&row);
                    study.rows.push(row);
                }
                let rows: Vec<&BdfRow> = study.rows[start..].iter().collect();
                let (on, off): (Vec<&BdfRow>, Vec<&BdfRow>) = rows.iter().partition(|r| r.dt <= cfg.plateau_dt * (1.0 + 1e-9));
                match solution {
                    HeatSolution::Polynomial => study.slopes.extend(slope_of(&rows)),
                    HeatSolution::SineProduct => {
                        study.plateau_slopes.extend(slope_of(&on));
                        study.pre_plateau_slopes.extend(slope_of(&off));
                    }
                }
            }
        }
    }
    Ok(study)
}

// ---------------------------------------------------------------------------
// spectral convergence of `c M + K` with a pure Neumann problem

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralStudyConfig {
    pub degrees: Vec<usize>,
    pub cells: usize,
    /// Cells per axis for the `p = 1` refinement.
    pub h_cells: Vec<usize>,
    pub mass_shift: f64,
    pub sigma: f64,
    pub flavor: Flavor,
}

impl Default for SpectralStudyConfig {
    fn default() -> Self {
        Self {
            degrees: (1..=6).collect(),
            cells: 4,
            h_cells: vec![2, 4, 8, 16],
            mass_shift: 1.0,
            sigma: 1.0,
            flavor: Flavor::Lgl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipticSolution {
    /// `sin(pi x) sin(pi y) sin(pi z)`
    SineProduct,
    /// `x^2 + y z`
    Quadratic,
}

impl EllipticSolution {
    pub fn label(self) -> &'static str {
        match self {
            EllipticSolution::SineProduct => "sine_product",
            EllipticSolution::Quadratic => "quadratic",
        }
    }

    pub fn exact(self, x: [f64; 3]) -> (f64, [f64; 3]) {
        match self {
            EllipticSolution::SineProduct => {
                let s = x.map(|v| (PI * v).sin());
                let c = x.map(|v| (PI * v).cos());
                (s[0] * s[1] * s[2], [PI * c[0] * s[1] * s[2], PI * s[0] * c[1] * s[2], PI * s[0] * s[1] * c[2]])
            }
            EllipticSolution::Quadratic => (x[0] * x[0] + x[1] * x[2], [2.0 * x[0], x[2], x[1]]),
        }
    }

    /// `c u - sigma lap u`.
    pub fn forcing(self, x: [f64; 3], c: f64, sigma: f64) -> f64 {
        let (u, _) = self.exact(x);
        match self {
            EllipticSolution::SineProduct => (c + 3.0 * PI * PI * sigma) * u,
            EllipticSolution::Quadratic => c * u - 2.0 * sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralRow {
    pub solution: EllipticSolution,
    pub degree: usize,
    pub cells: usize,
    pub n_dofs: usize,
    pub h: f64,
    pub l2: f64,
    pub h1: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SpectralStudy {
    /// Sine solution, degree sweep at fixed mesh.
    pub p_rows: Vec<SpectralRow>,
    /// Sine solution, `p = 1` on refined meshes.
    pub h_rows: Vec<SpectralRow>,
    /// Quadratic solution for degrees at least 2.
    pub exact_rows: Vec<SpectralRow>,
    /// Slope of `log H1 error` against `log h` between the two finest meshes.
    pub h_slope: f64,
}

pub fn elliptic_solve(cfg: &SpectralStudyConfig, solution: EllipticSolution, degree: usize, cells: usize, flavor: Flavor) -> Result<SpectralRow, BenchError> {
    let mesh = HexMesh::new([1.0; 3], [cells; 3]).map_err(setup)?;
    let basis = Arc::new(TensorBasis::new(degree, flavor).map_err(setup)?);
    let dofs = Arc::new(DofMap::new(&mesh, degree).map_err(setup)?);
    let diffusion = DiffusionField::isotropic(cfg.sigma);
    let op = MonodomainOperator::new(basis, &mesh, dofs.clone(), &diffusion, cfg.mass_shift).map_err(setup)?;
    let mut b = vec![0.0; dofs.n_dofs];
    op.load_vector(|x| solution.forcing(x, cfg.mass_shift, cfg.sigma), &mut b);
    op.add_boundary_load(
        |x, n| {
            let (_, g) = solution.exact(x);
            cfg.sigma * (g[0] * n[0] + g[1] * n[1] + g[2] * n[2])
        },
        &mut b,
    );
    let mut jac = Jacobi::new(&op.diagonal());
    let mut u = vec![0.0; dofs.n_dofs];
    let cg = CgConfig {
        tol_abs: 1e-300,
        tol_rel: 1e-13,
        tol_reduction: 0.0,
        max_iter: 20_000,
    };
    let res = cg_solve(&op, &b, &mut u, &cg, Some(&mut jac)).map_err(setup)?;
    if !res.converged {
        return Err(BenchError::Setup(format!("elliptic CG stalled at p={degree}, {cells}^3 cells: residual {:e}", res.final_residual)));
    }
    let acc = SpaceTimeAccumulator::new(degree, 1.0);
    let (l2, semi) = acc.spatial(&mesh, &dofs, &u, |x| solution.exact(x));
    Ok(SpectralRow {
        solution,
        degree,
        cells,
        n_dofs: dofs.n_dofs,
        h: 1.0 / cells as f64,
        l2: l2.sqrt(),
        h1: (l2 + semi).sqrt(),
        iterations: res.iterations,
    })
}

pub fn spectral_study(cfg: &SpectralStudyConfig, mut progress: impl FnMut(&SpectralRow)) -> Result<SpectralStudy, BenchError> {
    let mut s = SpectralStudy::default();
    let mut push = |rows: &mut Vec<SpectralRow>, row: SpectralRow| {
        progress(&row);
        rows.push(row);
    };
    for &p in &cfg.degrees {
        let row = elliptic_solve(cfg, EllipticSolution::SineProduct, p, cfg.cells, cfg.flavor)?;
        push(&mut s.p_rows, row);
    }
    for &c in &cfg.h_cells {
        let row = elliptic_solve(cfg, EllipticSolution::SineProduct, 1, c, cfg.flavor)?;
        push(&mut s.h_rows, row);
    }
    // the quadratic is integrated exactly only by the Gauss rule
    for &p in cfg.degrees.iter().filter(|&&p| p >= 2) {
        let row = elliptic_solve(cfg, EllipticSolution::Quadratic, p, cfg.cells, Flavor::Lg)?;
        push(&mut s.exact_rows, row);
    }
    if let [.., a, b] = &s.h_rows[..] {
        s.h_slope = loglog_slope(&[a.h, b.h], &[a.h1, b.h1]);
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// slab sweeps

/// Per-run overrides on top of the plan's base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub degree: usize,
    pub cells: [usize; 3],
    #[serde(default)]
    pub flavor: Option<Flavor>,
    #[serde(default)]
    pub solver: Option<SolverMode>,
    #[serde(default)]
    pub preconditioner: Option<PreconditionerKind>,
    #[serde(default)]
    pub dt: Option<f64>,
}

impl RunEntry {
    pub fn new(degree: usize, cells: [usize; 3]) -> Self {
        Self {
            degree,
            cells,
            flavor: None,
            solver: None,
            preconditioner: None,
            dt: None,
        }
    }

    pub fn with_solver(mut self, solver: SolverMode, preconditioner: PreconditionerKind) -> Self {
        self.solver = Some(solver);
        self.preconditioner = Some(preconditioner);
        self
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.mesh.degree = self.degree;
        c.mesh.cells = self.cells;
        if let Some(f) = self.flavor {
            c.mesh.flavor = f;
        }
        if let Some(s) = self.solver {
            c.solver.mode = s;
        }
        if let Some(p) = self.preconditioner {
            c.solver.preconditioner = p;
        }
        if let Some(dt) = self.dt {
            c.time.dt = dt;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub base: RunConfig,
    pub runs: Vec<RunEntry>,
    /// Self-convergence reference for the trace errors; none skips them.
    #[serde(default)]
    pub reference: Option<RunEntry>,
}

fn default_repeats() -> usize {
    3
}

impl SweepPlan {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let plan: SweepPlan = toml::from_str(text).map_err(|e| BenchError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Plan(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn configs(&self) -> Vec<RunConfig> {
        self.runs.iter().map(|r| r.apply(&self.base)).collect()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repeats == 0 {
            return Err(BenchError::Plan("repeats must be at least 1".into()));
        }
        let cfgs = self.configs();
        for (i, c) in cfgs.iter().enumerate() {
            c.validate().map_err(|e| BenchError::Plan(format!("run {i}: {e}")))?;
        }
        let hashes: Vec<String> = cfgs.iter().map(RunConfig::hash).collect();
        for i in 0..hashes.len() {
            if let Some(j) = (i + 1..hashes.len()).find(|&j| hashes[j] == hashes[i]) {
                return Err(BenchError::Plan(format!("runs {i} and {j} have identical configurations")));
            }
        }
        if let Some(r) = &self.reference {
            r.apply(&self.base).validate().map_err(|e| BenchError::Plan(format!("reference: {e}")))?;
        }
        Ok(())
    }
}

/// Summary of one plan entry over its repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRun {
    pub entry: RunEntry,
    pub config_hash: String,
    pub n_dofs: usize,
    pub h_avg: f64,
    /// Median over repetitions, per phase, in seconds.
    pub phase_seconds: [f64; 4],
    /// Median over repetitions of solve plus assembly seconds.
    pub solve_assembly_seconds: f64,
    pub phase_percent: [f64; 4],
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub errors: Option<ErrorNorms>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupRow {
    pub degree: usize,
    pub cells: [usize; 3],
    pub n_dofs: usize,
    pub mf_preconditioner: PreconditionerKind,
    pub mb_preconditioner: PreconditionerKind,
    pub mf_seconds: f64,
    pub mb_seconds: f64,
    pub speedup: f64,
    pub mf_hash: String,
    pub mb_hash: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    pub speedups: Vec<SpeedupRow>,
    pub reference_hash: Option<String>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn run_line(role: &str, index: usize, repeat: usize, entry: &RunEntry, cfg: &RunConfig, out: &RunOutcome) -> serde_json::Value {
    let mut v = crate::app::timings_json(cfg, out);
    let m = v.as_object_mut().expect("object");
    m.insert("role".into(), role.into());
    m.insert("index".into(), index.into());
    m.insert("repeat".into(), repeat.into());
    m.insert("dt".into(), cfg.time.dt.into());
    m.insert("entry".into(), serde_json::to_value(entry).expect("entry serializes"));
    v
}

/// Runs every plan entry `repeats` times (sequentially), appending one JSON
/// line per run to `runs.jsonl` as it completes, then writes the tables.
pub fn slab_study(plan: &SweepPlan, dir: &Path, mut progress: impl FnMut(&str)) -> Result<SweepReport, BenchError> {
    plan.validate()?;
    std::fs::create_dir_all(dir).map_err(io_context(format!("creating {}", dir.display())))?;
    let log_path = dir.join("runs.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_context(format!("creating {}", log_path.display())))?);
    let mut emit = |v: serde_json::Value| -> Result<(), BenchError> {
        writeln!(log, "{v}").and_then(|_| log.flush()).map_err(io_context("writing runs.jsonl"))?;
        Ok(())
    };

    // every run shares one probe point so the trace errors compare like with like
    let mut base = plan.base.clone();
    if base.output.probe.is_none() {
        let anchor = plan.reference.as_ref().unwrap_or(&plan.runs[0]).apply(&base);
        let dofs = DofMap::new(&anchor.mesh(), anchor.mesh.degree).map_err(setup)?;
        base.output.probe = Some(default_probe(&anchor, &dofs));
    }

    let reference = match &plan.reference {
        Some(entry) => {
            let cfg = entry.apply(&base);
            progress(&format!("reference p={} cells={:?}", entry.degree, entry.cells));
            let out = run(&cfg)?;
            emit(run_line("reference", 0, 0, entry, &cfg, &out))?;
            Some((cfg.hash(), out))
        }
        None => None,
    };

    let mut report = SweepReport {
        reference_hash: reference.as_ref().map(|r| r.0.clone()),
        ..SweepReport::default()
    };
    for (index, entry) in plan.runs.iter().enumerate() {
        let cfg = entry.apply(&base);
        let mut outcomes = Vec::with_capacity(plan.repeats);
        for repeat in 0..plan.repeats {
            progress(&format!(
                "run {}/{} repeat {}/{}: p={} cells={:?} {} {}",
                index + 1,
                plan.runs.len(),
                repeat + 1,
                plan.repeats,
                entry.degree,
                entry.cells,
                cfg.solver.mode,
                cfg.solver.preconditioner
            ));
            let out = run(&cfg)?;
            emit(run_line("sweep", index, repeat, entry, &cfg, &out))?;
            outcomes.push(out);
        }
        let first = &outcomes[0];
        let errors = match &reference {
            Some((_, r)) => Some(error_norms(&first.traces, &r.traces, cfg.time.dt).map_err(AppError::from)?),
            None => None,
        };
        let phase_seconds = [0, 1, 2, 3].map(|k| median(&outcomes.iter().map(|o| o.phase_seconds[k]).collect::<Vec<_>>()));
        let total: f64 = phase_seconds.iter().sum();
        report.runs.push(SweepRun {
            entry: entry.clone(),
            config_hash: cfg.hash(),
            n_dofs: first.n_dofs,
            h_avg: first.h_avg,
            phase_seconds,
            solve_assembly_seconds: median(&outcomes.iter().map(RunOutcome::solve_and_assembly_seconds).collect::<Vec<_>>()),
            phase_percent: phase_seconds.map(|s| if total > 0.0 { 100.0 * s / total } else { 0.0 }),
            mean_iterations: first.mean_iterations(),
            max_iterations: first.max_iterations(),
            errors,
        });
    }
    report.speedups = speedups(&base, &report.runs);
    write_tables(dir, &base, &report)?;
    Ok(report)
}

/// Pairs matrix-free and matrix-based runs that share degree, cells, flavor
/// and step size; a matching preconditioner is preferred when there is one.
pub fn speedups(base: &RunConfig, runs: &[SweepRun]) -> Vec<SpeedupRow> {
    let resolved: Vec<RunConfig> = runs.iter().map(|r| r.entry.apply(base)).collect();
    let same_problem = |a: &RunConfig, b: &RunConfig| a.mesh == b.mesh && a.time.dt == b.time.dt;
    let mut rows = Vec::new();
    for (i, a) in resolved.iter().enumerate() {
        if a.solver.mode != SolverMode::MatrixFree {
            continue;
        }
        let candidates: Vec<usize> = (0..runs.len())
            .filter(|&j| resolved[j].solver.mode == SolverMode::MatrixBased && same_problem(a, &resolved[j]))
            .collect();
        let j = candidates
            .iter()
            .copied()
            .find(|&j| resolved[j].solver.preconditioner == a.solver.preconditioner)
            .or_else(|| candidates.first().copied());
        if let Some(j) = j {
            let (mf, mb) = (&runs[i], &runs[j]);
            rows.push(SpeedupRow {
                degree: a.mesh.degree,
                cells: a.mesh.cells,
                n_dofs: mf.n_dofs,
                mf_preconditioner: a.solver.preconditioner,
                mb_preconditioner: resolved[j].solver.preconditioner,
                mf_seconds: mf.solve_assembly_seconds,
                mb_seconds: mb.solve_assembly_seconds,
                speedup: mb.solve_assembly_seconds / mf.solve_assembly_seconds,
                mf_hash: mf.config_hash.clone(),
                mb_hash: mb.config_hash.clone(),
            });
        }
    }
    rows
}

fn describe(base: &RunConfig, entry: &RunEntry) -> String {
    let c = entry.apply(base);
    format!(
        "{},{},{}x{}x{},{},{},{}",
        c.mesh.degree, c.mesh.flavor, c.mesh.cells[0], c.mesh.cells[1], c.mesh.cells[2], c.solver.mode, c.solver.preconditioner, c.time.dt
    )
}

const RUN_COLUMNS: &str = "config_hash,binary_hash,degree,flavor,cells,solver,preconditioner,dt_ms";

pub fn write_tables(dir: &Path, base: &RunConfig, report: &SweepReport) -> Result<(), BenchError> {
    let bin = binary_hash();
    let table = |name: &str, header: &str, lines: Vec<String>| -> Result<(), BenchError> {
        let path = dir.join(name);
        let mut f = BufWriter::new(File::create(&path).map_err(io_context(format!("creating {}", path.display())))?);
        let mut body = String::new();
        body.push_str(header);
        body.push('\n');
        for l in lines {
            body.push_str(&l);
            body.push('\n');
        }
        f.write_all(body.as_bytes()).and_then(|_| f.flush()).map_err(io_context(format!("writing {}", path.display())))?;
        Ok(())
    };
    let prefix = |r: &SweepRun| format!("{},{},{}", r.config_hash, bin, describe(base, &r.entry));

    table(
        "errors.csv",
        &format!("{RUN_COLUMNS},n_dofs,h_avg_mm,err_min,err_mean,err_max,err_probe,solve_s"),
        report
            .runs
            .iter()
            .filter_map(|r| {
                r.errors.as_ref().map(|e| {
                    format!(
                        "{},{},{},{:e},{:e},{:e},{:e},{}",
                        prefix(r),
                        r.n_dofs,
                        r.h_avg,
                        e.min,
                        e.mean,
                        e.max,
                        e.probe,
                        r.phase_seconds[0]
                    )
                })
            })
            .collect(),
    )?;
    table(
        "speedup.csv",
        "mf_hash,mb_hash,binary_hash,degree,cells,n_dofs,mf_preconditioner,mb_preconditioner,mf_solve_assembly_s,mb_solve_assembly_s,speedup",
        report
            .speedups
            .iter()
            .map(|s| {
                format!(
                    "{},{},{},{},{}x{}x{},{},{},{},{},{},{}",
                    s.mf_hash,
                    s.mb_hash,
                    bin,
                    s.degree,
                    s.cells[0],
                    s.cells[1],
                    s.cells[2],
                    s.n_dofs,
                    s.mf_preconditioner,
                    s.mb_preconditioner,
                    s.mf_seconds,
                    s.mb_seconds,
                    s.speedup
                )
            })
            .collect(),
    )?;
    let labels = crate::stepper::Phase::ALL.map(|p| p.label());
    table(
        "phases.csv",
        &format!(
            "{RUN_COLUMNS},n_dofs,{},{}",
            labels.map(|l| format!("{l}_s")).join(","),
            labels.map(|l| format!("{l}_pct")).join(",")
        ),
        report
            .runs
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{}",
                    prefix(r),
                    r.n_dofs,
                    r.phase_seconds.map(|v| v.to_string()).join(","),
                    r.phase_percent.map(|v| format!("{v:.2}")).join(",")
                )
            })
            .collect(),
    )?;
    table(
        "iterations.csv",
        &format!("{RUN_COLUMNS},n_dofs,h_avg_mm,mean_iterations,max_iterations"),
        report
            .runs
            .iter()
            .map(|r| format!("{},{},{},{:.3},{}", prefix(r), r.n_dofs, r.h_avg, r.mean_iterations, r.max_iterations))
            .collect(),
    )?;
    Ok(())
}

/// CSV renderings of the heat and spectral studies.
pub fn write_bdf_tables(dir: &Path, study: &BdfStudy) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(io_context(format!("creating {}", dir.display())))?;
    let mut body = String::from("solution,degree,scheme,dt,err_l2,err_h1,mean_iterations\n");
    for r in &study.rows {
        body.push_str(&format!("{},{},{},{:e},{:e},{:e},{:.2}\n", r.solution.label(), r.degree, r.scheme, r.dt, r.l2, r.h1, r.mean_iterations));
    }
    std::fs::write(dir.join("bdf_errors.csv"), body).map_err(io_context("writing bdf_errors.csv"))?;
    let mut body = String::from("solution,range,degree,scheme,slope_l2,slope_h1,points\n");
    for (range, rows) in [("all", &study.slopes), ("pre_plateau", &study.pre_plateau_slopes), ("plateau", &study.plateau_slopes)] {
        for s in rows {
            body.push_str(&format!("{},{range},{},{},{:.3},{:.3},{}\n", s.solution.label(), s.degree, s.scheme, s.slope_l2, s.slope_h1, s.points));
        }
    }
    std::fs::write(dir.join("bdf_slopes.csv"), body).map_err(io_context("writing bdf_slopes.csv"))?;
    Ok(())
}

pub fn write_spectral_table(dir: &Path, study: &SpectralStudy) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(io_context(format!("creating {}", dir.display())))?;
    let mut body = String::from("study,solution,degree,cells,n_dofs,h,err_l2,err_h1,cg_iterations\n");
    for (name, rows) in [("p", &study.p_rows), ("h", &study.h_rows), ("exact", &study.exact_rows)] {
        for r in rows {
            body.push_str(&format!(
                "{name},{},{},{},{},{},{:e},{:e},{}\n",
                r.solution.label(),
                r.degree,
                r.cells,
                r.n_dofs,
                r.h,
                r.l2,
                r.h1,
                r.iterations
            ));
        }
    }
    std::fs::write(dir.join("spectral.csv"), body).map_err(io_context("writing spectral.csv"))?;
    Ok(())
}
