use monodomain::config::RunConfig;
use monodomain::ionic::IonicState;
use monodomain::mesh::SlabFibers;
use monodomain::post::{activation_offline, ActivationTracker};
use monodomain::stepper::{PreconditionerKind, StepObserver};
use monodomain::{app, DiffusionField, HexMesh, IonicModel, Problem, Simulation, SolverMode, Surrogate};
use std::sync::Arc;

#[derive(Default)]
struct Snapshots(Vec<Vec<f64>>);

impl StepObserver<f64> for Snapshots {
    fn observe(&mut self, _step: usize, _time: f64, u: &[f64], _ionic: &IonicState<f64>) {
        self.0.push(u.to_vec());
    }
}

fn small(cells: [usize; 3], degree: usize, t_final: f64) -> RunConfig {
    let mut c = RunConfig::default();
    c.mesh.cells = cells;
    c.mesh.degree = degree;
    c.time.t_final = t_final;
    c.output.vtk = false;
    c
}

#[test]
fn online_activation_matches_offline_recomputation() {
    let c = small([6, 2, 2], 2, 2.0);
    let mut sim = Simulation::new(c.problem(), c.time_loop()).unwrap();
    let mut tracker = ActivationTracker::new(sim.n_dofs(), c.time.dt, c.time.scheme);
    let mut snaps = Snapshots::default();
    sim.run(&mut [&mut tracker, &mut snaps]).unwrap();
    assert_eq!(snaps.0.len(), 21);
    let online = tracker.map();
    let offline = activation_offline(&snaps.0, c.time.dt, c.time.scheme);
    assert!(online.peak_rate.iter().any(|&r| r > 0.0));
    for i in 0..sim.n_dofs() {
        assert!((online.times[i] - offline.times[i]).abs() < 1e-12, "dof {i}: {} vs {}", online.times[i], offline.times[i]);
        let (a, b) = (online.peak_rate[i], offline.peak_rate[i]);
        assert!((a - b).abs() <= 1e-12 * (1.0 + b), "dof {i}: rate {a} vs {b}");
    }
}

#[test]
fn matrix_free_and_matrix_based_agree_over_fifty_steps() {
    let mut c = small([8, 3, 2], 3, 5.0);
    c.solver.tol_abs = 1e-15;
    c.solver.tol_rel = 0.0;
    c.solver.tol_reduction = 1e-14;
    c.solver.max_iter = 2000;
    c.solver.preconditioner = PreconditionerKind::Jacobi;
    let mf = app::run(&c).unwrap();
    c.solver.mode = SolverMode::MatrixBased;
    let mb = app::run(&c).unwrap();
    assert_eq!(mf.log.len(), 50);
    let scale = mf.final_potential.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let diff = mf.final_potential.iter().zip(&mb.final_potential).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff <= 1e-9, "max |u_mf - u_mb| = {diff:e} (|u| up to {scale})");
    for (a, b) in mf.traces.iter().zip(&mb.traces) {
        for k in 0..4 {
            assert!((a.u[k] - b.u[k]).abs() <= 1e-9, "step {}: {:?} vs {:?}", a.step, a.u, b.u);
        }
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let mut c = small([6, 3, 2], 2, 1.5);
    c.solver.preconditioner = PreconditionerKind::Gmg;
    let a = app::run(&c).unwrap();
    let b = app::run(&c).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.final_potential), bits(&b.final_potential));
    assert_eq!(a.activation.times, b.activation.times);
    assert_eq!(a.config_hash, b.config_hash);
    let iters = |o: &app::RunOutcome| o.log.iter().map(|l| l.iterations).collect::<Vec<_>>();
    assert_eq!(iters(&a), iters(&b));
}

#[test]
fn single_precision_tracks_double() {
    let mut c = small([6, 2, 2], 2, 2.0);
    c.solver.tol_reduction = 1e-5;
    let reference = app::run(&c).unwrap();

    let sigma = c.fibers.sigma.map(|s| s as f32);
    let model: Arc<dyn IonicModel<f32>> = Arc::new(Surrogate::default());
    let problem = Problem::<f32> {
        mesh: HexMesh::new(c.mesh.extent.map(|e| e as f32), c.mesh.cells).unwrap(),
        degree: c.mesh.degree,
        flavor: c.mesh.flavor,
        diffusion: DiffusionField::new(Arc::new(SlabFibers), sigma),
        model,
        source: Arc::new(c.stimulus),
    };
    let mut sim = Simulation::new(problem, c.time_loop()).unwrap();
    sim.run(&mut []).unwrap();
    let u32: Vec<f64> = sim.potential().iter().map(|&u| f64::from(u)).collect();
    let scale = reference.final_potential.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let diff = u32.iter().zip(&reference.final_potential).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(scale > 0.1);
    assert!(diff <= 1e-4 * scale, "f32 vs f64: {diff:e} (scale {scale})");
}
