//! Runs a [`RunConfig`] end to end and writes the output directory.
//!
//! Layout of a run directory:
//! `config.snapshot` (resolved TOML), `traces.csv`, `activation.vtk`,
//! `timings.json`, `iterations.csv`.

use crate::config::RunConfig;
use crate::mesh::DofMap;
use crate::post::{write_traces, write_vtk, ActivationMap, ActivationTracker, PointProbe, PostError, TraceRecord, TraceRecorder};
use crate::stepper::{Phase, Region, Simulation, SimulationError, StepLog};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Post(#[from] PostError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl AppError {
    /// Short failure category, used for exit codes and log lines.
    pub fn category(&self) -> &'static str {
        match self {
            AppError::Config(_) => "config",
            AppError::Simulation(_) => "simulation",
            AppError::Post(_) => "postprocessing",
            AppError::Io { .. } => "io",
        }
    }
}

pub fn io_context(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> AppError {
    let context = context.into();
    move |source| AppError::Io { context, source }
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub n_dofs: usize,
    pub h_avg: f64,
    pub dofs: Arc<DofMap<f64>>,
    pub probe: [f64; 3],
    pub traces: Vec<TraceRecord>,
    pub activation: ActivationMap,
    pub log: Vec<StepLog>,
    /// Seconds per phase over all steps but the first, indexed like [`Phase::ALL`].
    pub phase_seconds: [f64; 4],
    pub setup_seconds: f64,
    pub wall_seconds: f64,
    pub gating_clamps: u64,
    pub final_potential: Vec<f64>,
}

impl RunOutcome {
    pub fn mean_iterations(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().map(|l| l.iterations as f64).sum::<f64>() / self.log.len() as f64
    }

    pub fn max_iterations(&self) -> usize {
        self.log.iter().map(|l| l.iterations).max().unwrap_or(0)
    }

    /// Phase shares in percent of the timed total.
    pub fn phase_percent(&self) -> [f64; 4] {
        let total: f64 = self.phase_seconds.iter().sum();
        self.phase_seconds.map(|s| if total > 0.0 { 100.0 * s / total } else { 0.0 })
    }

    /// Linear solve plus right-hand-side assembly, in seconds.
    pub fn solve_and_assembly_seconds(&self) -> f64 {
        self.phase_seconds[Phase::Solver as usize] + self.phase_seconds[Phase::Assembly as usize]
    }
}

/// Interior node farthest from the stimulus centre.
pub fn default_probe(cfg: &RunConfig, dofs: &DofMap<f64>) -> [f64; 3] {
    let centre = match cfg.stimulus.region {
        Region::Box { lo, hi } => [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a])),
        Region::Sphere { centre, .. } => centre,
    };
    let mut best = (f64::NEG_INFINITY, dofs.coord(0));
    for (i, x) in dofs.coords().iter().enumerate() {
        if dofs.is_boundary(i) {
            continue;
        }
        let d: f64 = (0..3).map(|a| (x[a] - centre[a]).powi(2)).sum();
        if d > best.0 {
            best = (d, *x);
        }
    }
    best.1
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome, AppError> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = cfg.problem();
    let mesh = problem.mesh.clone();
    let mut sim = Simulation::new(problem, cfg.time_loop())?;
    let dofs = sim.dofs().clone();
    let probe_point = cfg.output.probe.unwrap_or_else(|| default_probe(cfg, &dofs));
    let probe = PointProbe::new(&mesh, &dofs, probe_point)?;
    let mut traces = TraceRecorder::new(probe);
    let mut tracker = ActivationTracker::new(dofs.n_dofs, cfg.time.dt, cfg.time.scheme);
    let setup_seconds = start.elapsed().as_secs_f64();
    sim.run(&mut [&mut traces, &mut tracker])?;
    Ok(RunOutcome {
        config_hash: cfg.hash(),
        n_dofs: dofs.n_dofs,
        h_avg: mesh.h_avg(),
        dofs,
        probe: probe_point,
        traces: traces.records,
        activation: tracker.map(),
        phase_seconds: sim.phase_totals(),
        log: sim.log.clone(),
        setup_seconds,
        wall_seconds: start.elapsed().as_secs_f64(),
        gating_clamps: sim.ionic.clamped,
        final_potential: sim.potential().to_vec(),
    })
}

/// SHA-256 of the running executable, hex encoded ("unknown" if unreadable).
pub fn binary_hash() -> &'static str {
    static HASH: OnceLock<String> = OnceLock::new();
    HASH.get_or_init(|| {
        std::env::current_exe()
            .and_then(std::fs::read)
            .map(|bytes| hex::encode(Sha256::digest(&bytes)))
            .unwrap_or_else(|_| "unknown".into())
    })
}

pub fn timings_json(cfg: &RunConfig, out: &RunOutcome) -> serde_json::Value {
    let mut phases = serde_json::Map::new();
    let mut percent = serde_json::Map::new();
    let pct = out.phase_percent();
    for (k, ph) in Phase::ALL.iter().enumerate() {
        phases.insert(ph.label().into(), json!(out.phase_seconds[k]));
        percent.insert(ph.label().into(), json!(pct[k]));
    }
    json!({
        "config_hash": out.config_hash,
        "binary_hash": binary_hash(),
        "n_dofs": out.n_dofs,
        "cells": cfg.mesh.cells,
        "degree": cfg.mesh.degree,
        "flavor": cfg.mesh.flavor.to_string(),
        "solver": cfg.solver.mode.to_string(),
        "preconditioner": cfg.solver.preconditioner.to_string(),
        "h_avg_mm": out.h_avg,
        "steps": out.log.len(),
        "threads": rayon::current_num_threads(),
        "setup_s": out.setup_seconds,
        "wall_s": out.wall_seconds,
        "phases_s": phases,
        "phases_percent": percent,
        "iterations_mean": out.mean_iterations(),
        "iterations_max": out.max_iterations(),
        "gating_clamps": out.gating_clamps,
    })
}

pub fn write_iterations(mut w: impl Write, log: &[StepLog]) -> std::io::Result<()> {
    writeln!(w, "step,time_ms,order,iterations,initial_residual,final_residual")?;
    for l in log {
        writeln!(w, "{},{},{},{},{:e},{:e}", l.step, l.time, l.order, l.iterations, l.initial_residual, l.final_residual)?;
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, AppError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(io_context(format!("creating {}", path.display())))
}

pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutcome) -> Result<(), AppError> {
    std::fs::create_dir_all(dir).map_err(io_context(format!("creating {}", dir.display())))?;
    let ctx = |name: &str| io_context(format!("writing {}", dir.join(name).display()));
    let mut f = create(dir, "config.snapshot")?;
    f.write_all(cfg.to_toml().as_bytes()).and_then(|_| f.flush()).map_err(ctx("config.snapshot"))?;
    let mut f = create(dir, "traces.csv")?;
    write_traces(&mut f, &out.traces).and_then(|_| f.flush()).map_err(ctx("traces.csv"))?;
    let mut f = create(dir, "iterations.csv")?;
    write_iterations(&mut f, &out.log).and_then(|_| f.flush()).map_err(ctx("iterations.csv"))?;
    if cfg.output.vtk {
        let act = out.activation.thresholded(cfg.output.activation_min_rate);
        let mut f = create(dir, "activation.vtk")?;
        write_vtk(
            &mut f,
            "monodomain activation map",
            &out.dofs,
            &[("activation_time_ms", &act), ("potential_final", &out.final_potential)],
        )
        .and_then(|_| f.flush())
        .map_err(ctx("activation.vtk"))?;
    }
    let mut f = create(dir, "timings.json")?;
    serde_json::to_writer_pretty(&mut f, &timings_json(cfg, out))
        .map_err(std::io::Error::from)
        .and_then(|_| writeln!(f))
        .and_then(|_| f.flush())
        .map_err(ctx("timings.json"))?;
    Ok(())
}
