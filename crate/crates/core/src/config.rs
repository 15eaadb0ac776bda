//! Run configuration: a TOML document with one table per concern.
//!
//! Every field has a default, so an empty file describes the desk-scale slab
//! benchmark. Unknown keys are rejected.

use crate::basis::Flavor;
use crate::ionic::{Passive, Surrogate};
use crate::mesh::{DiffusionField, HexMesh, SlabFibers, TransmuralFibers, UniformFibers, SLAB_CONDUCTIVITIES_SI};
use crate::solver::{CgConfig, GmgConfig};
use crate::stepper::{Bdf, PreconditionerKind, Problem, Region, SolverMode, Stimulus, TimeLoopConfig};
use crate::ionic::IonicModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads; 0 picks `SOLVER_THREADS` or the number of physical cores.
    pub threads: usize,
    pub mesh: MeshConfig,
    pub fibers: FiberConfig,
    pub time: TimeConfig,
    pub solver: SolverConfig,
    pub ionic: IonicConfig,
    pub stimulus: Stimulus,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Box size in mm.
    pub extent: [f64; 3],
    pub cells: [usize; 3],
    pub degree: usize,
    pub flavor: Flavor,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            extent: [20.0, 7.0, 3.0],
            cells: [36, 12, 6],
            degree: 2,
            flavor: Flavor::Lgl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FiberLayout {
    /// Fibers along x, sheetlets along y.
    Slab,
    /// Constant frame rotated by Euler angles in degrees.
    Uniform { yaw_deg: f64, pitch_deg: f64, roll_deg: f64 },
    /// In-plane fiber angle varying linearly through the z thickness.
    Transmural { bottom_deg: f64, top_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberConfig {
    pub layout: FiberLayout,
    /// Longitudinal, transversal and normal conductivity in mm^2/ms.
    pub sigma: [f64; 3],
}

impl Default for FiberConfig {
    fn default() -> Self {
        Self {
            layout: FiberLayout::Slab,
            sigma: SLAB_CONDUCTIVITIES_SI.map(crate::mesh::si_to_mm2_per_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    /// ms
    pub dt: f64,
    /// ms
    pub t_final: f64,
    pub scheme: Bdf,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            t_final: 80.0,
            scheme: Bdf::Two,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub preconditioner: PreconditionerKind,
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub tol_reduction: f64,
    pub max_iter: usize,
    pub batch_width: usize,
    pub reassemble_every: usize,
    pub smoothing_degree: usize,
    pub lanczos_iters: usize,
    pub smoothing_range: [f64; 2],
    pub max_coarse_dofs: usize,
    pub coarse_tol_rel: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let t = TimeLoopConfig::default();
        let g = GmgConfig::default();
        Self {
            mode: t.solver,
            preconditioner: t.preconditioner,
            tol_abs: t.cg.tol_abs,
            tol_rel: t.cg.tol_rel,
            tol_reduction: t.cg.tol_reduction,
            max_iter: t.cg.max_iter,
            batch_width: t.batch_width,
            reassemble_every: t.reassemble_every,
            smoothing_degree: g.smoothing_degree,
            lanczos_iters: g.lanczos_iters,
            smoothing_range: [g.smoothing_range.0, g.smoothing_range.1],
            max_coarse_dofs: g.max_coarse_dofs,
            coarse_tol_rel: g.coarse_tol_rel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IonicKind {
    Surrogate,
    /// No ionic current: pure diffusion.
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IonicConfig {
    pub model: IonicKind,
    pub surrogate: Surrogate,
}

impl Default for IonicConfig {
    fn default() -> Self {
        Self {
            model: IonicKind::Surrogate,
            surrogate: Surrogate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Trace probe point in mm; when absent, the interior node farthest from
    /// the stimulus.
    pub probe: Option<[f64; 3]>,
    /// Nodes whose largest `|du/dt|` (1/ms) stays below this count as never
    /// activated.
    pub activation_min_rate: f64,
    pub vtk: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            probe: None,
            activation_min_rate: 0.01,
            vtk: true,
        }
    }
}

/// 15 mV/ms for 3 ms in a 1.5 mm cube at the origin corner.
pub fn default_stimulus() -> Stimulus {
    Stimulus {
        region: Region::Box {
            lo: [0.0; 3],
            hi: [1.5; 3],
        },
        amplitude: crate::ionic::rate_from_millivolts(15.0),
        duration: 3.0,
    }
}

impl Default for Stimulus {
    fn default() -> Self {
        default_stimulus()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, reason: String| Err(ConfigError::Invalid { key, reason });
        let m = &self.mesh;
        if m.extent.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return bad("mesh.extent", format!("{:?} must be positive", m.extent));
        }
        if m.cells.contains(&0) {
            return bad("mesh.cells", format!("{:?} must be at least 1 per axis", m.cells));
        }
        if m.degree == 0 || m.degree > crate::basis::MAX_DEGREE {
            return bad("mesh.degree", format!("{} not in 1..={}", m.degree, crate::basis::MAX_DEGREE));
        }
        if self.fibers.sigma.iter().any(|s| !(*s > 0.0)) {
            return bad("fibers.sigma", format!("{:?} must be positive", self.fibers.sigma));
        }
        let t = &self.time;
        if !(t.dt > 0.0) || !t.dt.is_finite() {
            return bad("time.dt", format!("{} must be positive", t.dt));
        }
        if !(t.t_final >= 0.0) || !t.t_final.is_finite() {
            return bad("time.t_final", format!("{} must be non-negative", t.t_final));
        }
        let s = &self.solver;
        if s.mode == SolverMode::MatrixBased && s.preconditioner == PreconditionerKind::Gmg {
            return bad("solver.preconditioner", "gmg needs the matrix-free mode; use jacobi or none with mb".into());
        }
        if !crate::mf_operator::BATCH_WIDTHS.contains(&s.batch_width) {
            return bad("solver.batch_width", format!("{} not one of {:?}", s.batch_width, crate::mf_operator::BATCH_WIDTHS));
        }
        if s.max_iter == 0 {
            return bad("solver.max_iter", "must be at least 1".into());
        }
        if s.smoothing_degree == 0 {
            return bad("solver.smoothing_degree", "must be at least 1".into());
        }
        let [lo, hi] = s.smoothing_range;
        if !(lo > 0.0 && hi > lo) {
            return bad("solver.smoothing_range", format!("[{lo}, {hi}] must satisfy 0 < lo < hi"));
        }
        self.ionic
            .surrogate
            .validate()
            .map_err(|e| ConfigError::Invalid { key: "ionic.surrogate", reason: e.to_string() })?;
        if !(self.stimulus.duration >= 0.0) || !self.stimulus.amplitude.is_finite() {
            return bad("stimulus", "duration must be non-negative and amplitude finite".into());
        }
        Ok(())
    }

    pub fn mesh(&self) -> HexMesh<f64> {
        HexMesh::new(self.mesh.extent, self.mesh.cells).expect("validated mesh")
    }

    pub fn diffusion(&self) -> DiffusionField<f64> {
        let d = std::f64::consts::PI / 180.0;
        let sigma = self.fibers.sigma;
        match self.fibers.layout {
            FiberLayout::Slab => DiffusionField::new(Arc::new(SlabFibers), sigma),
            FiberLayout::Uniform { yaw_deg, pitch_deg, roll_deg } => {
                DiffusionField::new(Arc::new(UniformFibers::from_angles(yaw_deg * d, pitch_deg * d, roll_deg * d)), sigma)
            }
            FiberLayout::Transmural { bottom_deg, top_deg } => DiffusionField::new(
                Arc::new(TransmuralFibers {
                    z0: 0.0,
                    thickness: self.mesh.extent[2],
                    angle_bottom: bottom_deg * d,
                    angle_top: top_deg * d,
                }),
                sigma,
            ),
        }
    }

    pub fn model(&self) -> Arc<dyn IonicModel<f64>> {
        match self.ionic.model {
            IonicKind::Surrogate => Arc::new(self.ionic.surrogate),
            IonicKind::Passive => Arc::new(Passive),
        }
    }

    pub fn problem(&self) -> Problem<f64> {
        Problem {
            mesh: self.mesh(),
            degree: self.mesh.degree,
            flavor: self.mesh.flavor,
            diffusion: self.diffusion(),
            model: self.model(),
            source: Arc::new(self.stimulus),
        }
    }

    pub fn time_loop(&self) -> TimeLoopConfig {
        let s = &self.solver;
        TimeLoopConfig {
            dt: self.time.dt,
            t_final: self.time.t_final,
            scheme: self.time.scheme,
            solver: s.mode,
            preconditioner: s.preconditioner,
            cg: CgConfig {
                tol_abs: s.tol_abs,
                tol_rel: s.tol_rel,
                tol_reduction: s.tol_reduction,
                max_iter: s.max_iter,
            },
            gmg: GmgConfig {
                smoothing_degree: s.smoothing_degree,
                lanczos_iters: s.lanczos_iters,
                smoothing_range: (s.smoothing_range[0], s.smoothing_range[1]),
                coarse_tol_rel: s.coarse_tol_rel,
                max_coarse_dofs: s.max_coarse_dofs,
                ..GmgConfig::default()
            },
            reassemble_every: s.reassemble_every,
            batch_width: s.batch_width,
        }
    }

    /// Closed-form DOF count `prod (cells * p + 1)`.
    pub fn n_dofs(&self) -> usize {
        self.mesh.cells.iter().map(|c| c * self.mesh.degree + 1).product()
    }
}
