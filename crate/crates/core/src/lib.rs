pub mod material;
pub mod quadrature;
pub mod mesh;
pub mod fespace;
pub mod assembly;
pub mod solver;
pub mod adaptivity;
pub mod scenarios;
pub mod driver;
pub mod vtu;

pub use adaptivity::{indicators, mark, CellIndicators, MarkSettings};
pub use assembly::{Assembler, BodyForce, LoadSpec, SparseMatrix};
pub use driver::{run, run_with, DriverError, RunOutput, RunRecord};
pub use fespace::{ConstraintSet, DirichletSpec, FeFunction, HpSpace};
pub use material::{MaterialParams, SymTensor2};
pub use mesh::{BoundaryTag, CellId, Flag, RefinementFlags, SlitQuadMesh};
pub use scenarios::{Mode, ScenarioConfig};
pub use solver::{newton_solve, NewtonReport, NewtonSettings};
