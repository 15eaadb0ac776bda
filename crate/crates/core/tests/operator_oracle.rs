use monodomain::mb_operator::MatrixAssembler;
use monodomain::mesh::{DiffusionField, DofMap, HexMesh, TransmuralFibers};
use monodomain::{Flavor, MonodomainOperator, TensorBasis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn matrix_free_matches_assembled() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fibers = Arc::new(TransmuralFibers { z0: 0.0, thickness: 0.9, angle_bottom: -1.0, angle_top: 1.0 });
    for field in [DiffusionField::slab(), DiffusionField::new(fibers, [0.2, 0.05, 0.01])] {
        for p in 1..=4 {
            for flavor in [Flavor::Lg, Flavor::Lgl] {
                let mesh = HexMesh::new([2.0, 1.3, 0.9], [5, 3, 2]).unwrap();
                let dofs = Arc::new(DofMap::new(&mesh, p).unwrap());
                let basis = Arc::new(TensorBasis::new(p, flavor).unwrap());
                let op = MonodomainOperator::new(basis.clone(), &mesh, dofs.clone(), &field, 15.0).unwrap();
                let a = MatrixAssembler::new(basis, &mesh, dofs, field.clone()).assemble(15.0, 1.0);
                for _ in 0..3 {
                    let v: Vec<f64> = (0..op.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut y1 = vec![0.0; v.len()];
                    let mut y2 = vec![0.0; v.len()];
                    op.try_apply(&v, &mut y1).unwrap();
                    a.spmv(&v, &mut y2).unwrap();
                    let d = max_rel_diff(&y1, &y2);
                    assert!(d < 1e-11, "p={p} {flavor}: {d}");
                }
                let d1 = op.diagonal();
                let d2 = a.diagonal();
                assert!(max_rel_diff(&d1, &d2) < 1e-12);
            }
        }
    }
}
