//! Sparse direct solves and damped Newton iteration.

use faer::prelude::SpSolver;
use faer::sparse::SparseColMat;
use faer::{Col, Side};
use thiserror::Error;

use crate::assembly::{norm, AssemblyError, Assembler, SparseMatrix};
use crate::fespace::FeFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    /// Sufficient-decrease parameter of the Armijo test.
    pub gamma: f64,
    /// Backtracking factor.
    pub rho: f64,
    pub min_alpha: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_iters: 50,
            gamma: 1e-4,
            rho: 0.5,
            min_alpha: 2f64.powi(-20),
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.gamma > 0.0
            && self.gamma < 1.0
            && self.rho > 0.0
            && self.rho < 1.0
            && self.min_alpha > 0.0
            && self.rel_tol >= 0.0
            && self.abs_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SolverError::InvalidSettings(format!("{self:?}")))
        }
    }
}

/// Residual norms are Euclidean norms over free DOFs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub initial_residual: f64,
    /// Residual after each accepted step.
    pub residual_history: Vec<f64>,
    pub step_lengths: Vec<f64>,
    pub converged: bool,
}

impl NewtonReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(self.initial_residual)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("singular tangent (n={n}, beta={beta}, min volumetric stiffness={min_stiffness})")]
    SingularMatrix { n: usize, beta: f64, min_stiffness: f64 },
    #[error("line search stalled after {} iterations", .0.iterations)]
    LineSearchStalled(NewtonReport),
    #[error("no convergence in {} iterations", .0.iterations)]
    MaxIterations(NewtonReport),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// Relative residual a direct solve must reach.
pub const LINEAR_TOL: f64 = 1e-10;

fn to_faer(k: &SparseMatrix) -> Option<SparseColMat<usize, f64>> {
    let trip: Vec<(usize, usize, f64)> = k.triplets().collect();
    SparseColMat::try_new_from_triplets(k.n(), k.n(), &trip).ok()
}

/// Solves `K d = r` with sparse Cholesky, falling back to LU, plus up to two
/// refinement sweeps. `None` when the factorization breaks down or the
/// relative residual stays above [`LINEAR_TOL`].
fn direct_solve(k: &SparseMatrix, r: &[f64]) -> Option<Vec<f64>> {
    let n = k.n();
    if n == 0 {
        return Some(Vec::new());
    }
    let a = to_faer(k)?;
    let rhs_norm = norm(r);
    if rhs_norm == 0.0 {
        return Some(vec![0.0; n]);
    }
    enum Factor {
        Llt(faer::sparse::linalg::solvers::Cholesky<usize, f64>),
        Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
    }
    // the LU kernel panics on an exactly zero pivot instead of returning an error
    let factor = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match a.sp_cholesky(Side::Lower) {
        Ok(c) => Some(Factor::Llt(c)),
        Err(_) => a.sp_lu().ok().map(Factor::Lu),
    }))
    .ok()
    .flatten()?;
    let solve = |b: &[f64]| -> Vec<f64> {
        let mut col = Col::<f64>::from_fn(n, |i| b[i]);
        match &factor {
            Factor::Llt(c) => c.solve_in_place(col.as_mut()),
            Factor::Lu(l) => l.solve_in_place(col.as_mut()),
        }
        (0..n).map(|i| col[i]).collect()
    };
    let mut x = solve(r);
    for _ in 0..3 {
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        let kx = k.mul_vec(&x);
        let res: Vec<f64> = r.iter().zip(&kx).map(|(a, b)| a - b).collect();
        if norm(&res) <= LINEAR_TOL * rhs_norm {
            return Some(x);
        }
        let dx = solve(&res);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
    }
    None
}

/// `K d = r` to relative residual [`LINEAR_TOL`].
pub fn solve_linear(k: &SparseMatrix, r: &[f64]) -> Result<Vec<f64>, SolverError> {
    direct_solve(k, r).ok_or(SolverError::SingularMatrix {
        n: k.n(),
        beta: f64::NAN,
        min_stiffness: f64::NAN,
    })
}

fn add_scaled(u: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    u.iter().zip(d).map(|(x, y)| x + a * y).collect()
}

/// Newton iteration on the free DOFs with Armijo backtracking.
///
/// `u0` is projected onto the constraints first. A trial state with an
/// inadmissible strain counts as a failed Armijo test.
pub fn newton_solve(
    asm: &Assembler,
    u0: &FeFunction,
    settings: &NewtonSettings,
) -> Result<(FeFunction, NewtonReport), SolverError> {
    settings.validate()?;
    let cs = asm.constraints();
    let mut u = u0.values().to_vec();
    cs.distribute(&mut u);
    let mut r = asm.assemble_residual(&u)?;
    let mut rn = norm(&r);
    let mut report = NewtonReport { initial_residual: rn, ..NewtonReport::default() };
    let target = (settings.rel_tol * rn).max(settings.abs_tol);
    log::debug!("newton iter=0 residual={rn:.6e}");
    loop {
        if rn <= target {
            report.converged = true;
            break;
        }
        if report.iterations >= settings.max_iters {
            log::warn!("newton max_iters={} residual={rn:.6e}", settings.max_iters);
            return Err(SolverError::MaxIterations(report));
        }
        let k = asm.assemble_tangent(&u)?;
        let d_free = direct_solve(&k, &r).ok_or_else(|| SolverError::SingularMatrix {
            n: k.n(),
            beta: asm.material().beta,
            min_stiffness: asm.min_volumetric_stiffness(&u),
        })?;
        let d = cs.expand(&d_free, true);
        let mut alpha = 1.0;
        let (u_next, r_next, rn_next) = loop {
            let trial = add_scaled(&u, alpha, &d);
            match asm.assemble_residual(&trial) {
                Ok(rt) => {
                    let rtn = norm(&rt);
                    if rtn <= (1.0 - settings.gamma * alpha) * rn {
                        break (trial, rt, rtn);
                    }
                    log::trace!("newton backtrack alpha={alpha:e} residual={rtn:.6e}");
                }
                Err(AssemblyError::InadmissibleStrain { cell, xi, .. }) => {
                    log::debug!("newton backtrack alpha={alpha:e} inadmissible cell={cell} xi={xi:.6e}");
                }
                Err(e) => return Err(e.into()),
            }
            alpha *= settings.rho;
            if alpha < settings.min_alpha {
                log::warn!("newton line_search_stalled iter={} residual={rn:.6e}", report.iterations);
                return Err(SolverError::LineSearchStalled(report));
            }
        };
        u = u_next;
        r = r_next;
        rn = rn_next;
        report.iterations += 1;
        report.residual_history.push(rn);
        report.step_lengths.push(alpha);
        log::debug!("newton iter={} residual={rn:.6e} alpha={alpha:e}", report.iterations);
    }
    log::info!(
        "newton converged iterations={} residual={rn:.6e} initial={:.6e}",
        report.iterations,
        report.initial_residual
    );
    let out = FeFunction::from_values(asm.space().clone(), u).expect("length matches space");
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::LoadSpec;
    use crate::fespace::{uniform_degrees, ConstraintSet, DirichletSpec, HpSpace};
    use crate::material::MaterialParams;
    use crate::mesh::{BoundaryTag, SlitQuadMesh};
    use std::sync::Arc;

    fn tensile_assembler(n0: usize, p: usize, beta: f64, v: f64) -> Assembler {
        let m = Arc::new(SlitQuadMesh::build_initial_mesh(n0).unwrap());
        let s = Arc::new(HpSpace::distribute_dofs(m.clone(), uniform_degrees(&m, p), 6).unwrap());
        let bc = DirichletSpec::new()
            .with(BoundaryTag::Bottom, [Some(0.0), Some(0.0)])
            .with(BoundaryTag::Top, [Some(0.0), Some(v)]);
        let cs = Arc::new(ConstraintSet::build(&s, &bc).unwrap());
        Assembler::new(s, cs, MaterialParams::default().with_beta(beta), LoadSpec::default()).unwrap()
    }

    #[test]
    fn identity_and_two_by_two() {
        let r = [0.5, -2.0, 3.25];
        assert_eq!(solve_linear(&SparseMatrix::identity(3), &r).unwrap(), r.to_vec());
        let k = SparseMatrix::from_dense(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let d = solve_linear(&k, &[3.0, 3.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14 && (d[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_falls_back_to_lu() {
        let k = SparseMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let d = solve_linear(&k, &[3.0, 3.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14 && (d[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let k = SparseMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(solve_linear(&k, &[1.0, 0.0]), Err(SolverError::SingularMatrix { .. })));
    }

    #[test]
    fn assembled_linear_system_is_solved_accurately() {
        let asm = tensile_assembler(4, 1, 0.0, 0.01);
        let u0 = asm.constraints().expand(&vec![0.0; asm.n_free()], false);
        let (r, k) = asm.assemble_both(&u0).unwrap();
        let d = solve_linear(&k, &r).unwrap();
        let kd = k.mul_vec(&d);
        let res: Vec<f64> = r.iter().zip(&kd).map(|(a, b)| a - b).collect();
        assert!(norm(&res) <= 1e-10 * norm(&r));
    }

    #[test]
    fn linear_problem_takes_one_full_step() {
        let asm = tensile_assembler(4, 2, 0.0, 0.01);
        let u0 = FeFunction::zeros(asm.space().clone());
        let (_, rep) = newton_solve(&asm, &u0, &NewtonSettings::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.step_lengths, vec![1.0]);
        assert!(rep.residual_history[0] <= 1e-10 * rep.initial_residual);
    }

    #[test]
    fn zero_data_is_already_solved() {
        let asm = tensile_assembler(2, 2, -10.0, 0.0);
        let (u, rep) = newton_solve(&asm, &FeFunction::zeros(asm.space().clone()), &NewtonSettings::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonlinear_tensile_converges_quadratically() {
        let lin = tensile_assembler(8, 2, 0.0, 0.01);
        let (u_lin, _) = newton_solve(&lin, &FeFunction::zeros(lin.space().clone()), &NewtonSettings::default()).unwrap();
        let mut asm = lin.clone();
        asm.set_material(MaterialParams::default().with_beta(-10.0));
        let (_, rep) = newton_solve(&asm, &u_lin, &NewtonSettings::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations >= 3, "{rep:?}");
        let mut prev = rep.initial_residual;
        for (r, a) in rep.residual_history.iter().zip(&rep.step_lengths) {
            assert!(*r <= (1.0 - 1e-4 * a) * prev);
            prev = *r;
        }
        let h = &rep.residual_history;
        let n = h.len();
        let ratios: Vec<f64> = (n - 3..n).map(|k| h[k] / if k == 0 { rep.initial_residual } else { h[k - 1] }).collect();
        assert!(ratios[1] < ratios[0] && ratios[2] < ratios[1], "{ratios:?}");
    }

    #[test]
    fn iteration_cap_is_an_error_with_history() {
        let lin = tensile_assembler(4, 2, 0.0, 0.01);
        let (u_lin, _) = newton_solve(&lin, &FeFunction::zeros(lin.space().clone()), &NewtonSettings::default()).unwrap();
        let mut asm = lin.clone();
        asm.set_material(MaterialParams::default().with_beta(-10.0));
        let settings = NewtonSettings { max_iters: 1, ..NewtonSettings::default() };
        match newton_solve(&asm, &u_lin, &settings) {
            Err(SolverError::MaxIterations(rep)) => assert_eq!(rep.residual_history.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn settings_are_validated() {
        let asm = tensile_assembler(2, 1, 0.0, 0.01);
        let bad = NewtonSettings { rho: 1.5, ..NewtonSettings::default() };
        assert!(matches!(
            newton_solve(&asm, &FeFunction::zeros(asm.space().clone()), &bad),
            Err(SolverError::InvalidSettings(_))
        ));
    }
}
