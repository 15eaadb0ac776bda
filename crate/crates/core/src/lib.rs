//! Matrix-free spectral-element solver for the cardiac monodomain equation.

pub mod app;
pub mod basis;
pub mod bench;
pub mod config;
pub mod ionic;
pub mod mb_operator;
pub mod mesh;
pub mod mf_operator;
pub mod post;
pub mod scalar;
pub mod solver;
pub mod stepper;

pub use basis::{Flavor, QuadratureRule, TensorBasis};
pub use mb_operator::{MatrixAssembler, SparseMatrix};
pub use mesh::{DiffusionField, DofMap, HexMesh, LevelHierarchy};
pub use mf_operator::{LinearOperator, MonodomainOperator};
pub use ionic::{IonicModel, IonicState, Surrogate};
pub use scalar::Scalar;
pub use stepper::{Bdf, Problem, Simulation, SolverMode, TimeLoopConfig};

pub type Real = f64;
pub type FieldVector<T = Real> = Vec<T>;
