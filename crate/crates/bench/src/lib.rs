//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use hpcrack::fespace::uniform_degrees;
use hpcrack::scenarios::setup;
use hpcrack::{Assembler, ConstraintSet, FeFunction, HpSpace, ScenarioConfig, SlitQuadMesh};

/// Tensile slit problem on an `n0` mesh with uniform degree `p`.
pub fn tensile_problem(n0: usize, p: usize, beta: f64) -> (Assembler, FeFunction) {
    let cfg = ScenarioConfig { n0, ..ScenarioConfig::default() }.with_beta(beta);
    let mesh = Arc::new(SlitQuadMesh::build_initial_mesh(n0).unwrap());
    let space = Arc::new(HpSpace::distribute_dofs(mesh.clone(), uniform_degrees(&mesh, p), cfg.p_max).unwrap());
    let (bc, loads) = setup(&cfg);
    let cs = Arc::new(ConstraintSet::build(&space, &bc).unwrap());
    let top = cfg.top_displacement();
    let u = hpcrack::fespace::interpolate(&space, |x| [top[0] * x[1], top[1] * x[1]]);
    (Assembler::new(space, cs, cfg.material, loads).unwrap(), u)
}
