//! Adaptive solve loop: Newton solve, estimate, mark, adapt, repeat.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::adaptivity::{apply_flags, indicators, mark, AdaptError, CellIndicators, MarkSettings};
use crate::assembly::{AssemblyError, Assembler};
use crate::fespace::{uniform_degrees, ConstraintSet, FeFunction, HpSpace, SpaceError};
use crate::mesh::{MeshError, SlitQuadMesh};
use crate::scenarios::{fmt_num, setup, ScenarioConfig, ScenarioError};
use crate::solver::{newton_solve, NewtonReport, SolverError};

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub n_dofs: usize,
    pub global_eta: f64,
    pub max_p: usize,
    pub min_h: f64,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Cycles,
    Converged,
    DofCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<CycleRecord>,
    pub stop: StopReason,
}

pub const RUN_HEADER: &str = "cycle,n_dofs,global_eta,max_p,min_h,newton_iters";

impl RunRecord {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{RUN_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.cycle,
                r.n_dofs,
                fmt_num(r.global_eta),
                r.max_p,
                fmt_num(r.min_h),
                r.newton_iters
            )?;
        }
        Ok(())
    }

    /// Number of cycles where the estimate went up.
    pub fn monotonicity_violations(&self) -> usize {
        self.rows.windows(2).filter(|w| w[1].global_eta > w[0].global_eta).count()
    }
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ScenarioError),
    #[error("Newton solve failed in cycle {cycle}")]
    Solver {
        cycle: usize,
        #[source]
        source: SolverError,
        partial: RunRecord,
    },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("rate fit needs at least 4 cycles, got {0}")]
    InsufficientData(usize),
    #[error("cycle output failed")]
    Output(#[source] io::Error),
}

/// State handed to the per-cycle observer.
pub struct CycleState<'a> {
    pub cycle: usize,
    pub u: &'a FeFunction,
    pub indicators: &'a CellIndicators,
    pub newton: &'a NewtonReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Converged solution of the last cycle.
    pub solution: FeFunction,
    pub indicators: CellIndicators,
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, DriverError> {
    run_with(cfg, |_| Ok(()))
}

/// [`run`] calling `observe` after every solve and estimate.
pub fn run_with(
    cfg: &ScenarioConfig,
    mut observe: impl FnMut(&CycleState) -> io::Result<()>,
) -> Result<RunOutput, DriverError> {
    cfg.validate()?;
    let (bc, loads) = setup(cfg);
    let mesh = Arc::new(SlitQuadMesh::build_initial_mesh(cfg.n0)?);
    let mut space = Arc::new(HpSpace::distribute_dofs(
        mesh.clone(),
        uniform_degrees(&mesh, cfg.initial_degree),
        cfg.p_max,
    )?);
    let mut constraints = Arc::new(ConstraintSet::build(&space, &bc)?);
    let mark_settings = MarkSettings {
        refine_fraction: cfg.refine_fraction,
        sigma_threshold: cfg.sigma_threshold,
        p_max: cfg.p_max,
        min_marked: cfg.min_marked,
    };
    let mut rows = Vec::new();
    let mut guess = FeFunction::zeros(space.clone());
    let mut stop = StopReason::Cycles;
    let fail = |cycle, source, rows: &Vec<CycleRecord>| DriverError::Solver {
        cycle,
        source,
        partial: RunRecord { rows: rows.clone(), stop: StopReason::Cycles },
    };
    if cfg.material.beta != 0.0 {
        let lin = Assembler::new(space.clone(), constraints.clone(), cfg.material.with_beta(0.0), loads.clone())?;
        guess = newton_solve(&lin, &guess, &cfg.newton).map_err(|e| fail(0, e, &rows))?.0;
    }
    let mut last = None;
    for cycle in 0..cfg.cycles {
        let asm = Assembler::new(space.clone(), constraints.clone(), cfg.material, loads.clone())?;
        let (u, report) = newton_solve(&asm, &guess, &cfg.newton).map_err(|e| fail(cycle, e, &rows))?;
        let ind = indicators(&u);
        let mesh = space.mesh();
        let row = CycleRecord {
            cycle,
            n_dofs: space.n_dofs(),
            global_eta: ind.global_eta,
            max_p: space.max_degree(),
            min_h: mesh.min_cell_diameter(),
            newton_iters: report.iterations,
        };
        log::info!(
            "cycle={} n_dofs={} global_eta={:.6e} max_p={} min_h={:.6e} newton_iters={}",
            row.cycle,
            row.n_dofs,
            row.global_eta,
            row.max_p,
            row.min_h,
            row.newton_iters
        );
        rows.push(row);
        observe(&CycleState { cycle, u: &u, indicators: &ind, newton: &report }).map_err(DriverError::Output)?;
        let converged = ind.global_eta < cfg.eta_tol;
        let is_last = cycle + 1 == cfg.cycles;
        if converged || is_last {
            if converged {
                stop = StopReason::Converged;
            }
            last = Some((u, ind));
            break;
        }
        let flags = mark(&space, &ind, &mark_settings)?;
        let out = apply_flags(&u, flags, &bc, cfg.p_max)?;
        if cfg.max_dofs.is_some_and(|cap| out.space.n_dofs() > cap) {
            log::info!("dof_cap reached n_dofs={} cap={}", out.space.n_dofs(), cfg.max_dofs.unwrap());
            stop = StopReason::DofCap;
            last = Some((u, ind));
            break;
        }
        space = out.space;
        constraints = out.constraints;
        guess = out.u;
    }
    let (solution, indicators) = last.expect("at least one cycle runs");
    Ok(RunOutput { record: RunRecord { rows, stop }, solution, indicators })
}

/// Convergence rate: minus the least-squares slope of `log eta` against
/// `log n_dofs` over the last `max(4, n / 2)` rows.
pub fn fit_rate(record: &RunRecord) -> Result<f64, DriverError> {
    let n = record.rows.len();
    if n < 4 {
        return Err(DriverError::InsufficientData(n));
    }
    let m = 4.max(n / 2);
    let pts: Vec<(f64, f64)> = record.rows[n - m..]
        .iter()
        .map(|r| ((r.n_dofs as f64).ln(), r.global_eta.ln()))
        .collect();
    Ok(0.0 - crate::adaptivity::least_squares_slope(&pts))
}
