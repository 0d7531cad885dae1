use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hpcrack::adaptivity::{indicators, mark, MarkSettings};
use hpcrack::assembly::{Assembler, LoadSpec};
use hpcrack::driver::run;
use hpcrack::fespace::{interpolate, uniform_degrees, ConstraintSet, DirichletSpec, FeFunction, HpSpace};
use hpcrack::material::{xi_crit, MaterialParams};
use hpcrack::mesh::{BoundaryTag, Flag, Neighbor, RefinementFlags, SlitQuadMesh};
use hpcrack::scenarios::{crack_jump, ligament_extract, Mode, ScenarioConfig, DEFAULT_TIP_GUARD};
use hpcrack::solver::{newton_solve, NewtonSettings};

/// Random refinement history of the slit mesh driven by `seed`.
fn random_mesh(n0: usize, steps: usize, seed: u64) -> SlitQuadMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SlitQuadMesh::build_initial_mesh(n0).unwrap();
    for _ in 0..steps {
        let mut f = RefinementFlags::new(&m);
        for &c in m.leaves() {
            if rng.gen_bool(0.25) {
                f.set(c, Flag::RefineH);
            }
        }
        m = m.refine(&f).unwrap();
    }
    m
}

fn random_space(mesh: SlitQuadMesh, seed: u64) -> Arc<HpSpace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mesh = Arc::new(mesh);
    let degrees = (0..mesh.cells.len()).map(|_| rng.gen_range(1..=4)).collect();
    Arc::new(HpSpace::distribute_dofs(mesh, degrees, 6).unwrap())
}

fn constrained_random_field(space: &Arc<HpSpace>, seed: u64) -> FeFunction {
    let cs = ConstraintSet::build(space, &DirichletSpec::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free: Vec<f64> = (0..cs.n_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeFunction::from_values(space.clone(), cs.expand(&free, true)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn refinement_keeps_area_balance_and_ancestry(steps in 0usize..4, seed in any::<u64>()) {
        let m = random_mesh(2, steps, seed);
        prop_assert!((m.total_area() - 1.0).abs() <= 1e-12);
        prop_assert!(m.max_level_jump() <= 1);
        for &c in m.leaves() {
            let chain = m.ancestry(c);
            let root = *chain.last().unwrap();
            prop_assert_eq!(m.cells[root].level, 0);
            for w in chain.windows(2) {
                prop_assert!(m.cells[w[1]].children.unwrap().contains(&w[0]));
            }
        }
    }

    #[test]
    fn basis_is_a_partition_of_unity(steps in 0usize..3, seed in any::<u64>()) {
        let s = random_space(random_mesh(2, steps, seed), seed);
        let u = FeFunction::from_values(s.clone(), vec![1.0; s.n_dofs()]).unwrap();
        let pts = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for &c in s.mesh().leaves() {
            for &x in &pts {
                for &y in &pts {
                    let v = u.evaluate_in_cell(c, [x, y]);
                    prop_assert!((v[0] - 1.0).abs() <= 1e-12 && (v[1] - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn constrained_fields_are_continuous(steps in 1usize..3, seed in any::<u64>()) {
        let s = random_space(random_mesh(2, steps, seed), seed);
        let u = constrained_random_field(&s, seed);
        let mesh = s.mesh();
        for f in mesh.faces() {
            let fine = match f.neighbor {
                Neighbor::Same(n) => vec![n],
                Neighbor::Finer(pair) => pair.to_vec(),
                _ => continue,
            };
            for n in fine {
                // sample along the shared face of the smaller cell
                let r = mesh.cell_rect(n);
                let g = mesh.cell_rect(f.cell);
                for k in 0..10 {
                    let t = (k as f64 + 0.5) / 10.0;
                    let p = match f.face {
                        0 => [g.x0, r.y0 + t * r.hy],
                        1 => [g.x0 + g.hx, r.y0 + t * r.hy],
                        2 => [r.x0 + t * r.hx, g.y0],
                        _ => [r.x0 + t * r.hx, g.y0 + g.hy],
                    };
                    let a = u.evaluate_in_cell(f.cell, g.to_reference(p));
                    let b = u.evaluate_in_cell(n, r.to_reference(p));
                    prop_assert!((a[0] - b[0]).abs() <= 1e-10 && (a[1] - b[1]).abs() <= 1e-10,
                        "cell {} face {} vs {}: {:?} {:?}", f.cell, f.face, n, a, b);
                }
            }
        }
    }

    #[test]
    fn polynomials_up_to_min_degree_are_reproduced(steps in 0usize..3, seed in any::<u64>()) {
        let s = random_space(random_mesh(2, steps, seed), seed);
        let q = s.mesh().leaves().iter().map(|&c| s.degree(c)).min().unwrap() as i32;
        let f = move |x: [f64; 2]| [x[0].powi(q) - 0.5 * x[1].powi(q), (x[0] * x[1]).powi(q / 2) + x[1]];
        let u = interpolate(&s, f);
        let cs = ConstraintSet::build(&s, &DirichletSpec::new()).unwrap();
        prop_assert!(cs.max_violation(u.values()) <= 1e-12);
        for &c in s.mesh().leaves() {
            let r = s.mesh().cell_rect(c);
            for xi in [[-0.7, 0.3], [0.2, -0.9], [0.6, 0.6]] {
                let v = u.evaluate_in_cell(c, xi);
                let e = f(r.to_physical(xi));
                prop_assert!((v[0] - e[0]).abs() <= 1e-12 && (v[1] - e[1]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn newton_steps_satisfy_armijo(beta in -10.0f64..10.0, v in 0.001f64..0.006) {
        let m = Arc::new(SlitQuadMesh::build_initial_mesh(4).unwrap());
        let s = Arc::new(HpSpace::distribute_dofs(m.clone(), uniform_degrees(&m, 2), 6).unwrap());
        let bc = DirichletSpec::new()
            .with(BoundaryTag::Bottom, [Some(0.0), Some(0.0)])
            .with(BoundaryTag::Top, [Some(v), Some(v)]);
        let cs = Arc::new(ConstraintSet::build(&s, &bc).unwrap());
        let material = MaterialParams::default().with_beta(beta);
        let asm = Assembler::new(s.clone(), cs, material, LoadSpec::default()).unwrap();
        let settings = NewtonSettings::default();
        let (u, rep) = newton_solve(&asm, &FeFunction::zeros(s), &settings).unwrap();
        prop_assert!(rep.converged);
        let mut prev = rep.initial_residual;
        for (r, a) in rep.residual_history.iter().zip(&rep.step_lengths) {
            prop_assert!(*r <= (1.0 - settings.gamma * a) * prev);
            prop_assert!(*r < prev);
            prev = *r;
        }
        if let Some(xc) = xi_crit(&material) {
            let smin = asm.min_volumetric_stiffness(u.values());
            prop_assert!(smin > 0.0, "xi_crit {}", xc);
        }
    }
}

#[test]
fn linear_problem_converges_in_one_step() {
    let m = Arc::new(SlitQuadMesh::build_initial_mesh(4).unwrap());
    let s = Arc::new(HpSpace::distribute_dofs(m.clone(), uniform_degrees(&m, 3), 6).unwrap());
    let bc = DirichletSpec::new()
        .with(BoundaryTag::Bottom, [Some(0.0), Some(0.0)])
        .with(BoundaryTag::Top, [Some(0.0), Some(0.01)]);
    let cs = Arc::new(ConstraintSet::build(&s, &bc).unwrap());
    let asm = Assembler::new(s.clone(), cs, MaterialParams::default(), LoadSpec::default()).unwrap();
    let (_, rep) = newton_solve(&asm, &FeFunction::zeros(s), &NewtonSettings::default()).unwrap();
    assert_eq!(rep.iterations, 1);
    assert!(rep.residual_history[0] <= 1e-10 * rep.initial_residual);
}

#[test]
fn smooth_fields_are_p_refined() {
    let m = Arc::new(SlitQuadMesh::unit_square(4).unwrap());
    let mut s = Arc::new(HpSpace::distribute_dofs(m.clone(), uniform_degrees(&m, 2), 6).unwrap());
    let f = |x: [f64; 2]| [(1.3 * x[0]).sin() * (0.7 * x[1]).cos(), (x[0] + x[1]).exp() * 0.1];
    let settings = MarkSettings::default();
    for _ in 0..3 {
        let u = interpolate(&s, f);
        let flags = mark(&s, &indicators(&u), &settings).unwrap();
        let marked = flags.count(Flag::RaiseP) + flags.count(Flag::RefineH);
        assert!(marked > 0);
        assert!(flags.count(Flag::RaiseP) as f64 >= 0.9 * marked as f64, "{marked} marked");
        let degrees: Vec<usize> = (0..s.mesh().cells.len())
            .map(|c| s.degree(c) + usize::from(flags.get(c) == Flag::RaiseP))
            .collect();
        s = Arc::new(HpSpace::distribute_dofs(s.mesh().clone(), degrees, 6).unwrap());
    }
}

fn linear_run(mode: Mode) -> hpcrack::fespace::FeFunction {
    let cfg = ScenarioConfig { n0: 4, cycles: 4, ..ScenarioConfig::default() }.with_mode(mode).with_beta(0.0);
    run(&cfg).unwrap().solution
}

#[test]
fn linear_tension_opens_the_ligament() {
    let u = linear_run(Mode::Tensile);
    let samples = ligament_extract(&u, &MaterialParams::default(), 50, DEFAULT_TIP_GUARD).unwrap();
    for s in &samples {
        assert!(s.t22 > 0.0, "x = {}: T22 = {}", s.x, s.t22);
    }
}

#[test]
fn linear_shear_slides_without_opening() {
    let u = linear_run(Mode::Shear);
    for x in [0.6, 0.75, 0.9] {
        let [jx, jy] = crack_jump(&u, x).unwrap();
        assert!(jy.abs() <= 1e-6 * jx.abs(), "x = {x}: jump {jx} {jy}");
    }
}
