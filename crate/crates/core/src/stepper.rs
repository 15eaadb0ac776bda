//! Partitioned semi-implicit BDF time loop.
//!
//! Each step extrapolates `u*`, advances the ionic state, assembles
//! `b = M (sum_j beta_j u^{n-j} / dt - I_ion + I_app) + loads` and solves
//! `(alpha_0 / dt M + K) u^{n+1} = b` with CG, starting from `u^n`.

use crate::basis::TensorBasis;
use crate::ionic::{step_ionic, IonicError, IonicModel, IonicState};
use crate::mb_operator::{MatrixAssembler, SparseMatrix};
use crate::mesh::{DiffusionField, DofMap, HexMesh, LevelHierarchy};
use crate::mf_operator::{LinearOperator, MonodomainOperator, OperatorError};
use crate::scalar::Scalar;
use crate::solver::{cg_solve, CgConfig, GmgConfig, GmgPreconditioner, Jacobi, Preconditioner, SolverError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bdf {
    #[serde(rename = "bdf1")]
    One,
    #[serde(rename = "bdf2")]
    Two,
    #[serde(rename = "bdf3")]
    Three,
}

impl Bdf {
    pub fn order(self) -> usize {
        match self {
            Bdf::One => 1,
            Bdf::Two => 2,
            Bdf::Three => 3,
        }
    }

    pub fn from_order(k: usize) -> Self {
        match k {
            0 | 1 => Bdf::One,
            2 => Bdf::Two,
            _ => Bdf::Three,
        }
    }

    /// `(alpha_0, [beta_0, beta_1, ...])` with
    /// `(alpha_0 y^{n+1} - sum_j beta_j y^{n-j}) / dt ~ y'(t^{n+1})`.
    pub fn coefficients(self) -> (f64, &'static [f64]) {
        match self {
            Bdf::One => (1.0, &[1.0]),
            Bdf::Two => (1.5, &[2.0, -0.5]),
            Bdf::Three => (11.0 / 6.0, &[3.0, -1.5, 1.0 / 3.0]),
        }
    }

    /// Weights of `u^n, u^{n-1}, ...` in the extrapolation `u*`.
    pub fn extrapolation(self) -> &'static [f64] {
        match self {
            Bdf::One => &[1.0],
            Bdf::Two => &[2.0, -1.0],
            Bdf::Three => &[3.0, -3.0, 1.0],
        }
    }

    /// Extrapolates from a scalar history ordered oldest to newest.
    pub fn extrapolate(self, history: &[f64]) -> f64 {
        let n = history.len();
        self.extrapolation().iter().enumerate().map(|(j, c)| c * history[n - 1 - j]).sum()
    }
}

impl fmt::Display for Bdf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BDF{}", self.order())
    }
}

impl FromStr for Bdf {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bdf1" | "1" => Ok(Bdf::One),
            "bdf2" | "2" => Ok(Bdf::Two),
            "bdf3" | "3" => Ok(Bdf::Three),
            _ => Err(format!("unknown scheme `{s}` (expected bdf1, bdf2 or bdf3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[serde(alias = "mf")]
    MatrixFree,
    #[serde(alias = "mb")]
    MatrixBased,
}

impl FromStr for SolverMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mf" | "matrix_free" | "matrix-free" => Ok(SolverMode::MatrixFree),
            "mb" | "matrix_based" | "matrix-based" => Ok(SolverMode::MatrixBased),
            _ => Err(format!("unknown solver `{s}` (expected mf or mb)")),
        }
    }
}

impl fmt::Display for SolverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMode::MatrixFree => "matrix-free",
            SolverMode::MatrixBased => "matrix-based",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    None,
    Gmg,
    Jacobi,
}

impl FromStr for PreconditionerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PreconditionerKind::None),
            "gmg" => Ok(PreconditionerKind::Gmg),
            "jacobi" => Ok(PreconditionerKind::Jacobi),
            _ => Err(format!("unknown preconditioner `{s}` (expected none, gmg or jacobi)")),
        }
    }
}

impl fmt::Display for PreconditionerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PreconditionerKind::None => "none",
            PreconditionerKind::Gmg => "gmg",
            PreconditionerKind::Jacobi => "jacobi",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeLoopConfig {
    pub dt: f64,
    /// Steps are taken while `t < t_final`; a last partial step is dropped.
    pub t_final: f64,
    pub scheme: Bdf,
    pub solver: SolverMode,
    pub preconditioner: PreconditionerKind,
    pub cg: CgConfig,
    pub gmg: GmgConfig,
    /// Matrix-based mode: reassemble `A` every this many steps (0 = only when
    /// its coefficients change).
    pub reassemble_every: usize,
    pub batch_width: usize,
}

impl Default for TimeLoopConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            t_final: 10.0,
            scheme: Bdf::Two,
            solver: SolverMode::MatrixFree,
            preconditioner: PreconditionerKind::Gmg,
            // the starting residual is reduced by about seven orders
            cg: CgConfig {
                tol_abs: 1e-15,
                tol_rel: 0.0,
                tol_reduction: 1e-7,
                max_iter: 500,
            },
            gmg: GmgConfig::default(),
            reassemble_every: 1,
            batch_width: 4,
        }
    }
}

impl TimeLoopConfig {
    pub fn n_steps(&self) -> usize {
        ((self.t_final / self.dt) * (1.0 + 1e-12)).floor() as usize
    }
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Ionic(#[from] IonicError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("linear solver failed at step {step}: {source}")]
    Solver { step: usize, source: SolverError },
    #[error("CG did not converge at step {step}: residual {residual:e} after {iterations} iterations")]
    NotConverged { step: usize, iterations: usize, residual: f64 },
    #[error("non-finite potential at step {step}, dof {dof}")]
    NonFinite { step: usize, dof: usize },
    #[error("invalid setup: {0}")]
    Setup(String),
}

/// Axis-aligned box or ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    Box { lo: [f64; 3], hi: [f64; 3] },
    Sphere { centre: [f64; 3], radius: f64 },
}

impl Region {
    pub fn contains(&self, x: [f64; 3]) -> bool {
        const TOL: f64 = 1e-12;
        match *self {
            Region::Box { lo, hi } => (0..3).all(|a| x[a] >= lo[a] - TOL && x[a] <= hi[a] + TOL),
            Region::Sphere { centre, radius } => {
                let d2: f64 = (0..3).map(|a| (x[a] - centre[a]).powi(2)).sum();
                d2 <= radius * radius + TOL
            }
        }
    }
}

/// Applied current and any extra load terms of the right-hand side.
pub trait Source<T: Scalar>: Send + Sync {
    /// Nodal applied current `I_app(x, t)`, projected through the mass matrix.
    fn nodal(&self, x: [T; 3], t: T) -> T;

    /// Additional load vector contributions at time `t` (e.g. boundary fluxes).
    fn add_load(&self, _op: &MonodomainOperator<T>, _t: T, _b: &mut [T]) {}

    /// False when `nodal` vanishes at `t`, letting the caller skip evaluation.
    fn active(&self, _t: T) -> bool {
        true
    }
}

/// `I_app = amplitude` inside `region` for `t in (0, duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stimulus {
    pub region: Region,
    /// Units of `u` per ms.
    pub amplitude: f64,
    /// ms.
    pub duration: f64,
}

impl Stimulus {
    pub fn value(&self, x: [f64; 3], t: f64) -> f64 {
        if self.active_at(t) && self.region.contains(x) {
            self.amplitude
        } else {
            0.0
        }
    }

    fn active_at(&self, t: f64) -> bool {
        t > 0.0 && t <= self.duration * (1.0 + 1e-12)
    }
}

impl<T: Scalar> Source<T> for Stimulus {
    fn nodal(&self, x: [T; 3], t: T) -> T {
        T::of(self.value(x.map(|v| v.as_f64()), t.as_f64()))
    }

    fn active(&self, t: T) -> bool {
        self.active_at(t.as_f64())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoSource;

impl<T: Scalar> Source<T> for NoSource {
    fn nodal(&self, _x: [T; 3], _t: T) -> T {
        T::zero()
    }

    fn active(&self, _t: T) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Solver,
    Assembly,
    Ionic,
    Other,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Solver, Phase::Assembly, Phase::Ionic, Phase::Other];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Solver => "monodomain_solver",
            Phase::Assembly => "monodomain_assembly",
            Phase::Ionic => "ionic_model_solver",
            Phase::Other => "other",
        }
    }
}

/// Splits wall time into consecutive laps, each charged to one phase, so the
/// phases always add up to the total.
#[derive(Debug, Clone)]
pub struct PhaseTimer {
    last: Instant,
    pub totals: [Duration; 4],
}

impl Default for PhaseTimer {
    fn default() -> Self {
        Self {
            last: Instant::now(),
            totals: [Duration::ZERO; 4],
        }
    }
}

impl PhaseTimer {
    pub fn restart(&mut self) {
        self.last = Instant::now();
    }

    pub fn lap(&mut self, phase: Phase) -> Duration {
        let now = Instant::now();
        let d = now - self.last;
        self.last = now;
        self.totals[phase as usize] += d;
        d
    }

    pub fn total(&self) -> Duration {
        self.totals.iter().sum()
    }

    pub fn get(&self, phase: Phase) -> Duration {
        self.totals[phase as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub time: f64,
    pub order: usize,
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Seconds per phase, indexed like [`Phase::ALL`].
    pub phase_seconds: [f64; 4],
}

/// Called after every completed step (and once for the initial state).
pub trait StepObserver<T> {
    fn observe(&mut self, step: usize, time: f64, u: &[T], ionic: &IonicState<T>);
}

enum Precond<T> {
    None,
    Jacobi(Jacobi<T>),
    Gmg(Box<GmgPreconditioner<T>>),
}

struct MatrixBased<T> {
    assembler: MatrixAssembler<T>,
    a: SparseMatrix<T>,
    m: SparseMatrix<T>,
    assembled_for: Option<f64>,
}

/// Everything the time loop needs besides the configuration.
#[derive(Clone)]
pub struct Problem<T: Scalar> {
    pub mesh: HexMesh<T>,
    pub degree: usize,
    pub flavor: crate::basis::Flavor,
    pub diffusion: DiffusionField<T>,
    pub model: Arc<dyn IonicModel<T>>,
    pub source: Arc<dyn Source<T>>,
}

pub struct Simulation<T: Scalar> {
    pub cfg: TimeLoopConfig,
    problem: Problem<T>,
    dofs: Arc<DofMap<T>>,
    op: MonodomainOperator<T>,
    mb: Option<MatrixBased<T>>,
    precond: Precond<T>,
    /// `u^n` followed by older levels.
    u: Vec<Vec<T>>,
    pub ionic: IonicState<T>,
    step: usize,
    /// History depth available for the next step (1 = only `u^n`).
    depth: usize,
    pub timer: PhaseTimer,
    pub log: Vec<StepLog>,
    scratch: Scratch<T>,
}

struct Scratch<T> {
    nodal: Vec<T>,
    b: Vec<T>,
    i_ion: Vec<T>,
    u_star: Vec<T>,
    x: Vec<T>,
}

impl<T: Scalar> Simulation<T> {
    pub fn new(problem: Problem<T>, cfg: TimeLoopConfig) -> Result<Self, SimulationError> {
        if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
            return Err(SimulationError::Setup(format!("time step must be positive, got {}", cfg.dt)));
        }
        if cfg.solver == SolverMode::MatrixBased && cfg.preconditioner == PreconditionerKind::Gmg {
            return Err(SimulationError::Setup("the matrix-based baseline supports only `none` or `jacobi` preconditioning".into()));
        }
        let basis = Arc::new(TensorBasis::new(problem.degree, problem.flavor).map_err(|e| SimulationError::Setup(e.to_string()))?);
        let dofs = Arc::new(DofMap::new(&problem.mesh, problem.degree).map_err(|e| SimulationError::Setup(e.to_string()))?);
        let (alpha0, _) = Bdf::One.coefficients();
        let c = T::of(alpha0 / cfg.dt);
        let op = MonodomainOperator::new(basis.clone(), &problem.mesh, dofs.clone(), &problem.diffusion, c)?.with_batch_width(cfg.batch_width)?;
        let n = dofs.n_dofs;
        let mb = (cfg.solver == SolverMode::MatrixBased).then(|| {
            let assembler = MatrixAssembler::new(basis.clone(), &problem.mesh, dofs.clone(), problem.diffusion.clone());
            let a = assembler.pattern().clone();
            let m = assembler.pattern().clone();
            MatrixBased {
                assembler,
                a,
                m,
                assembled_for: None,
            }
        });
        let precond = match cfg.preconditioner {
            PreconditionerKind::None => Precond::None,
            PreconditionerKind::Jacobi => Precond::Jacobi(Jacobi::new(&vec![T::one(); n])),
            PreconditionerKind::Gmg => {
                let h = LevelHierarchy::from_fine(problem.mesh.clone(), problem.degree, cfg.gmg.max_coarse_dofs)
                    .map_err(|e| SimulationError::Setup(e.to_string()))?;
                Precond::Gmg(Box::new(GmgPreconditioner::new(&h, basis, &problem.diffusion, c, cfg.batch_width, cfg.gmg)?))
            }
        };
        let (u0, _, _) = problem.model.resting_state();
        let ionic = IonicState::resting(&*problem.model, n);
        let mut sim = Self {
            cfg,
            problem,
            dofs,
            op,
            mb,
            precond,
            u: vec![vec![u0; n]],
            ionic,
            step: 0,
            depth: 1,
            timer: PhaseTimer::default(),
            log: Vec::new(),
            scratch: Scratch {
                nodal: vec![T::zero(); n],
                b: vec![T::zero(); n],
                i_ion: vec![T::zero(); n],
                u_star: vec![T::zero(); n],
                x: vec![T::zero(); n],
            },
        };
        sim.set_order(1);
        Ok(sim)
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs
    }

    pub fn dofs(&self) -> &Arc<DofMap<T>> {
        &self.dofs
    }

    pub fn operator(&self) -> &MonodomainOperator<T> {
        &self.op
    }

    pub fn problem(&self) -> &Problem<T> {
        &self.problem
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    /// Current potential `u^n`.
    pub fn potential(&self) -> &[T] {
        &self.u[0]
    }

    /// Matrix-based mode: the system matrix as last assembled.
    pub fn system_matrix(&self) -> Option<&SparseMatrix<T>> {
        self.mb.as_ref().map(|m| &m.a)
    }

    pub fn gmg(&self) -> Option<&GmgPreconditioner<T>> {
        match &self.precond {
            Precond::Gmg(g) => Some(g),
            _ => None,
        }
    }

    /// Replaces the potential history, newest first, and the step counter;
    /// with `levels.len() >= order` the first step already uses the full scheme.
    pub fn set_history(&mut self, levels: Vec<Vec<T>>, step: usize) {
        assert!(!levels.is_empty() && levels.iter().all(|l| l.len() == self.n_dofs()));
        self.depth = levels.len();
        self.u = levels;
        self.step = step;
    }

    /// Sets `u^n` (all DOFs) without touching the history depth.
    pub fn set_potential(&mut self, u: &[T]) {
        self.u[0].copy_from_slice(u);
    }

    fn set_order(&mut self, order: usize) {
        let (alpha0, _) = Bdf::from_order(order).coefficients();
        let c = T::of(alpha0 / self.cfg.dt);
        self.op.set_mass_coeff(c);
        if let Precond::Gmg(g) = &mut self.precond {
            g.set_mass_coeff(c);
        }
    }

    fn refresh_preconditioner(&mut self) {
        match (&mut self.precond, &self.mb) {
            (Precond::Jacobi(j), Some(mb)) => *j = Jacobi::new(&mb.a.diagonal()),
            (Precond::Jacobi(j), None) => *j = Jacobi::new(&self.op.diagonal()),
            _ => {}
        }
    }

    /// Advances one step.
    pub fn step(&mut self) -> Result<&StepLog, SimulationError> {
        let dt = self.cfg.dt;
        let order = self.cfg.scheme.order().min(self.depth);
        let scheme = Bdf::from_order(order);
        let (alpha0, beta) = scheme.coefficients();
        let t_new = (self.step + 1) as f64 * dt;
        let tn = T::of(t_new);
        let n = self.n_dofs();
        let mut phase = [Duration::ZERO; 4];
        self.timer.restart();

        // coefficient change (bootstrap): operators and smoothers follow alpha_0
        let c = T::of(alpha0 / dt);
        let mut coeff_changed = false;
        if self.op.mass_coeff() != c {
            self.set_order(order);
            coeff_changed = true;
        }
        phase[Phase::Other as usize] += self.timer.lap(Phase::Other);

        // ionic model, DOF-wise, at the extrapolated potential
        let ext = scheme.extrapolation();
        for i in 0..n {
            let mut s = T::zero();
            for (j, e) in ext.iter().enumerate() {
                s += T::of(*e) * self.u[j][i];
            }
            self.scratch.u_star[i] = s;
        }
        step_ionic(&*self.problem.model, &mut self.ionic, &self.scratch.u_star, T::of(dt), scheme, &mut self.scratch.i_ion)?;
        phase[Phase::Ionic as usize] += self.timer.lap(Phase::Ionic);

        // assembly: nodal combination, then mass projection and loads
        let source_active = self.problem.source.active(tn);
        let coords = self.dofs.coords();
        let inv_dt = T::of(1.0 / dt);
        for i in 0..n {
            let mut s = T::zero();
            for (j, b) in beta.iter().enumerate() {
                s += T::of(*b) * self.u[j][i];
            }
            let mut v = s * inv_dt - self.scratch.i_ion[i];
            if source_active {
                v += self.problem.source.nodal(coords[i], tn);
            }
            self.scratch.nodal[i] = v;
        }
        if let Some(mb) = &mut self.mb {
            let every = self.cfg.reassemble_every;
            let due = mb.assembled_for != Some(alpha0) || (every > 0 && self.step.is_multiple_of(every));
            if due {
                mb.assembler.assemble_into(&mut mb.a, c, T::one());
                mb.assembler.assemble_into(&mut mb.m, T::one(), T::zero());
                mb.assembled_for = Some(alpha0);
                coeff_changed = true;
            }
            mb.m.spmv(&self.scratch.nodal, &mut self.scratch.b).expect("sizes match");
        } else {
            self.op.mass_apply(&self.scratch.nodal, &mut self.scratch.b)?;
        }
        self.problem.source.add_load(&self.op, tn, &mut self.scratch.b);
        if coeff_changed || self.step == 0 {
            self.refresh_preconditioner();
        }
        phase[Phase::Assembly as usize] += self.timer.lap(Phase::Assembly);

        // linear solve from u^n
        self.scratch.x.copy_from_slice(&self.u[0]);
        let op: &dyn LinearOperator<T> = match &self.mb {
            Some(mb) => &mb.a,
            None => &self.op,
        };
        let pc: Option<&mut dyn Preconditioner<T>> = match &mut self.precond {
            Precond::None => None,
            Precond::Jacobi(j) => Some(j),
            Precond::Gmg(g) => Some(&mut **g),
        };
        let step_no = self.step + 1;
        let res = cg_solve(op, &self.scratch.b, &mut self.scratch.x, &self.cfg.cg, pc).map_err(|source| SimulationError::Solver { step: step_no, source })?;
        if !res.converged {
            return Err(SimulationError::NotConverged {
                step: step_no,
                iterations: res.iterations,
                residual: res.final_residual,
            });
        }
        phase[Phase::Solver as usize] += self.timer.lap(Phase::Solver);

        if let Some(dof) = self.scratch.x.iter().position(|v| !v.is_finite()) {
            return Err(SimulationError::NonFinite { step: step_no, dof });
        }
        // rotate history: the oldest buffer is recycled for u^{n+1}
        let keep = self.cfg.scheme.order();
        let mut fresh = if self.u.len() >= keep { self.u.pop().unwrap() } else { vec![T::zero(); n] };
        fresh.copy_from_slice(&self.scratch.x);
        self.u.insert(0, fresh);
        self.u.truncate(keep);
        self.depth = (self.depth + 1).min(keep);
        self.step = step_no;
        phase[Phase::Other as usize] += self.timer.lap(Phase::Other);

        self.log.push(StepLog {
            step: step_no,
            time: t_new,
            order,
            iterations: res.iterations,
            initial_residual: res.initial_residual,
            final_residual: res.final_residual,
            phase_seconds: phase.map(|d| d.as_secs_f64()),
        });
        Ok(self.log.last().unwrap())
    }

    /// Runs to `t_final`, notifying observers after the initial state and
    /// every step. Observer time is charged to [`Phase::Other`].
    pub fn run(&mut self, observers: &mut [&mut dyn StepObserver<T>]) -> Result<(), SimulationError> {
        let steps = self.cfg.n_steps();
        if self.step == 0 {
            for o in observers.iter_mut() {
                o.observe(0, 0.0, &self.u[0], &self.ionic);
            }
        }
        while self.step < steps {
            self.step()?;
            self.timer.restart();
            let (s, t) = (self.step, self.time());
            for o in observers.iter_mut() {
                o.observe(s, t, &self.u[0], &self.ionic);
            }
            let d = self.timer.lap(Phase::Other);
            if let Some(l) = self.log.last_mut() {
                l.phase_seconds[Phase::Other as usize] += d.as_secs_f64();
            }
        }
        Ok(())
    }

    /// Phase totals in seconds over all logged steps except the first
    /// (warm-up) step when more than one is available.
    pub fn phase_totals(&self) -> [f64; 4] {
        let skip = usize::from(self.log.len() > 1);
        let mut t = [0.0; 4];
        for l in &self.log[skip..] {
            for (a, b) in t.iter_mut().zip(l.phase_seconds) {
                *a += b;
            }
        }
        t
    }
}
