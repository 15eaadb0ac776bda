use monodomain::config::RunConfig;
use monodomain::ionic::{step_ionic, IonicState};
use monodomain::mb_operator::MatrixAssembler;
use monodomain::mesh::{DiffusionField, DofMap, HexMesh, LevelHierarchy, UniformFibers};
use monodomain::post::{error_norms, TraceRecord};
use monodomain::solver::{GmgConfig, GmgPreconditioner};
use monodomain::stepper::PreconditionerKind;
use monodomain::{Bdf, Flavor, MonodomainOperator, SolverMode, Surrogate, TensorBasis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn flavor() -> impl Strategy<Value = Flavor> {
    prop_oneof![Just(Flavor::Lg), Just(Flavor::Lgl)]
}

fn field(angles: [f64; 3], sigma: [f64; 3]) -> DiffusionField<f64> {
    DiffusionField::new(Arc::new(UniformFibers::from_angles(angles[0], angles[1], angles[2])), sigma)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_symmetric_and_matches_assembly(
        p in 1usize..=4,
        cells in prop::array::uniform3(1usize..=3),
        extent in prop::array::uniform3(0.3f64..3.0),
        angles in prop::array::uniform3(-1.5f64..1.5),
        sigma in prop::array::uniform3(0.01f64..0.5),
        mass in 0.0f64..50.0,
        fl in flavor(),
        seed in any::<u64>(),
    ) {
        let mesh = HexMesh::new(extent, cells).unwrap();
        let dofs = Arc::new(DofMap::new(&mesh, p).unwrap());
        let basis = Arc::new(TensorBasis::new(p, fl).unwrap());
        let diff = field(angles, sigma);
        let op = MonodomainOperator::new(basis.clone(), &mesh, dofs.clone(), &diff, mass).unwrap();
        let a = MatrixAssembler::new(basis, &mesh, dofs, diff).assemble(mass, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = op.n_dofs();
        let (v, w) = (random_vec(&mut rng, n), random_vec(&mut rng, n));
        let (mut av, mut aw, mut bv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        op.try_apply(&v, &mut av).unwrap();
        op.try_apply(&w, &mut aw).unwrap();
        a.spmv(&v, &mut bv).unwrap();
        let scale = av.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = av.iter().zip(&bv).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(diff <= 1e-11 * scale, "matrix-free vs assembled: {diff:e} (scale {scale:e})");
        let (vaw, wav) = (dot(&v, &aw), dot(&w, &av));
        prop_assert!((vaw - wav).abs() <= 1e-12 * (vaw.abs() + wav.abs() + scale));
        prop_assert!(dot(&v, &av) >= -1e-12 * scale);
    }

    #[test]
    fn operator_is_linear(
        p in 1usize..=4,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mesh = HexMesh::new([1.0, 0.7, 0.4], [2, 2, 1]).unwrap();
        let dofs = Arc::new(DofMap::new(&mesh, p).unwrap());
        let basis = Arc::new(TensorBasis::new(p, Flavor::Lgl).unwrap());
        let op = MonodomainOperator::new(basis, &mesh, dofs, &DiffusionField::slab(), 10.0).unwrap();
        let n = op.n_dofs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, w) = (random_vec(&mut rng, n), random_vec(&mut rng, n));
        let combo: Vec<f64> = v.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
        let (mut av, mut aw, mut ac) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        op.try_apply(&v, &mut av).unwrap();
        op.try_apply(&w, &mut aw).unwrap();
        op.try_apply(&combo, &mut ac).unwrap();
        for i in 0..n {
            let expect = alpha * av[i] + beta * aw[i];
            prop_assert!((ac[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()) * 10.0);
        }
    }

    #[test]
    fn gmg_vcycle_is_symmetric_positive(
        p in 1usize..=3,
        mass in 1.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let mesh = HexMesh::new([2.0, 1.0, 1.0], [4, 2, 2]).unwrap();
        let h = LevelHierarchy::from_fine(mesh, p, 10).unwrap();
        let basis = Arc::new(TensorBasis::new(p, Flavor::Lgl).unwrap());
        let cfg = GmgConfig { coarse_tol_rel: 1e-14, ..GmgConfig::default() };
        let mut g = GmgPreconditioner::new(&h, basis, &DiffusionField::slab(), mass, 4, cfg).unwrap();
        prop_assert!(g.n_levels() >= 2);
        let n = *g.level_dofs().last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, s) = (random_vec(&mut rng, n), random_vec(&mut rng, n));
        let (mut br, mut bs) = (vec![0.0; n], vec![0.0; n]);
        g.vcycle(&r, &mut br);
        g.vcycle(&s, &mut bs);
        let (sbr, rbs) = (dot(&s, &br), dot(&r, &bs));
        prop_assert!((sbr - rbs).abs() <= 1e-8 * (sbr.abs() + rbs.abs()), "{sbr} vs {rbs}");
        prop_assert!(dot(&r, &br) > 0.0);
    }

    #[test]
    fn ionic_step_commutes_with_permutation(
        u in prop::collection::vec(-0.2f64..1.2, 2..40),
        steps in 1usize..4,
        scheme in prop_oneof![Just(Bdf::One), Just(Bdf::Two), Just(Bdf::Three)],
        seed in any::<u64>(),
    ) {
        let model = Surrogate::default();
        let n = u.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let up: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
        let mut s = IonicState::resting(&model, n);
        let mut sp = IonicState::resting(&model, n);
        let (mut i_ion, mut i_ion_p) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..steps {
            step_ionic(&model, &mut s, &u, 0.1, scheme, &mut i_ion).unwrap();
            step_ionic(&model, &mut sp, &up, 0.1, scheme, &mut i_ion_p).unwrap();
        }
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(i_ion_p[k].to_bits(), i_ion[i].to_bits());
            prop_assert_eq!(sp.w[k].to_bits(), s.w[i].to_bits());
        }
    }

    #[test]
    fn error_norms_are_seminorms(
        a in prop::collection::vec(prop::array::uniform4(-1.0f64..1.0), 2..30),
        b_off in prop::collection::vec(prop::array::uniform4(-1.0f64..1.0), 30),
        c_off in prop::collection::vec(prop::array::uniform4(-1.0f64..1.0), 30),
        scale in -4.0f64..4.0,
        dt in 0.01f64..1.0,
    ) {
        let recs = |f: &dyn Fn(usize) -> [f64; 4]| -> Vec<TraceRecord> {
            (0..a.len()).map(|s| TraceRecord { step: s, time_ms: s as f64 * dt, u: f(s), w: [f64::NAN; 4] }).collect()
        };
        let add = |x: [f64; 4], y: [f64; 4], k: f64| [0, 1, 2, 3].map(|i| x[i] + k * y[i]);
        let ra = recs(&|s| a[s]);
        let rb = recs(&|s| add(a[s], b_off[s], 1.0));
        let rc = recs(&|s| add(add(a[s], b_off[s], 1.0), c_off[s], 1.0));
        let rs = recs(&|s| add(a[s], b_off[s], scale));
        let ab = error_norms(&ra, &rb, dt).unwrap().as_array();
        let ba = error_norms(&rb, &ra, dt).unwrap().as_array();
        let bc = error_norms(&rb, &rc, dt).unwrap().as_array();
        let ac = error_norms(&ra, &rc, dt).unwrap().as_array();
        let as_ = error_norms(&ra, &rs, dt).unwrap().as_array();
        let aa = error_norms(&ra, &ra, dt).unwrap().as_array();
        for k in 0..4 {
            prop_assert_eq!(ab[k], ba[k]);
            prop_assert_eq!(aa[k], 0.0);
            prop_assert!(ac[k] <= ab[k] + bc[k] + 1e-12);
            prop_assert!((as_[k] - scale.abs() * ab[k]).abs() <= 1e-12 * (1.0 + ab[k]));
        }
    }

    #[test]
    fn config_survives_toml_round_trip(
        degree in 1usize..=6,
        cells in prop::array::uniform3(1usize..=64),
        extent in prop::array::uniform3(0.1f64..100.0),
        dt in 1e-4f64..1.0,
        t_final in 0.0f64..500.0,
        scheme in prop_oneof![Just(Bdf::One), Just(Bdf::Two), Just(Bdf::Three)],
        fl in flavor(),
        mb in any::<bool>(),
        jacobi in any::<bool>(),
        threads in 0usize..16,
    ) {
        let mut c = RunConfig { threads, ..RunConfig::default() };
        c.mesh.degree = degree;
        c.mesh.cells = cells;
        c.mesh.extent = extent;
        c.mesh.flavor = fl;
        c.time.dt = dt;
        c.time.t_final = t_final;
        c.time.scheme = scheme;
        c.solver.mode = if mb { SolverMode::MatrixBased } else { SolverMode::MatrixFree };
        c.solver.preconditioner = if mb || jacobi { PreconditionerKind::Jacobi } else { PreconditionerKind::Gmg };
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(c.n_dofs(), DofMap::new(&c.mesh(), degree).unwrap().n_dofs);
    }
}
