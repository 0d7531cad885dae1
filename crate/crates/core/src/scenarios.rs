//! Cracked-square loading cases and field extraction along the crack line.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::assembly::LoadSpec;
use crate::fespace::{DirichletSpec, FeFunction, SpaceError};
use crate::material::{stress, strain_energy_density, MaterialError, MaterialParams, SymTensor2};
use crate::mesh::{BoundaryTag, SlitSide};
use crate::solver::NewtonSettings;

/// Distance from the tip at which ligament sampling stops.
pub const DEFAULT_TIP_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Tensile,
    Shear,
    Mixed,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Tensile, Mode::Shear, Mode::Mixed];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Tensile => "tensile",
            Mode::Shear => "shear",
            Mode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (tensile, shear, mixed)"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("x = {0} is not on the crack faces (0.5, 1)")]
    OffSlit(f64),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Material(#[from] MaterialError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub u_bar: f64,
    pub v_bar: f64,
    pub material: MaterialParams,
    pub beta_list: Vec<f64>,
    pub n0: usize,
    pub cycles: usize,
    pub refine_fraction: f64,
    pub sigma_threshold: f64,
    pub p_max: usize,
    /// Degree of every cell on the initial mesh.
    pub initial_degree: usize,
    /// Minimum number of cells marked per cycle.
    pub min_marked: usize,
    /// Stop once the DOF count exceeds this.
    pub max_dofs: Option<usize>,
    /// Stop once the global estimate drops below this.
    pub eta_tol: f64,
    pub newton: NewtonSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tensile,
            u_bar: 0.005,
            v_bar: 0.005,
            material: MaterialParams::default(),
            beta_list: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            n0: 8,
            cycles: 8,
            refine_fraction: 0.3,
            sigma_threshold: 2.0,
            p_max: 6,
            initial_degree: 2,
            min_marked: 1,
            max_dofs: None,
            eta_tol: 0.0,
            newton: NewtonSettings::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.material = self.material.with_beta(beta);
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if self.cycles < 1 {
            return bad("cycles must be at least 1".into());
        }
        if self.n0 < 2 || self.n0 % 2 != 0 {
            return bad(format!("n0 = {} must be even and at least 2", self.n0));
        }
        if !(self.refine_fraction > 0.0 && self.refine_fraction <= 1.0) {
            return bad(format!("refine fraction {} outside (0, 1]", self.refine_fraction));
        }
        if self.p_max < 1 || self.p_max > crate::fespace::DEFAULT_P_MAX {
            return bad(format!("p_max = {} outside 1..=6", self.p_max));
        }
        if self.initial_degree < 1 || self.initial_degree > self.p_max {
            return bad(format!("initial degree {} outside 1..={}", self.initial_degree, self.p_max));
        }
        if !self.u_bar.is_finite() || !self.v_bar.is_finite() {
            return bad("non-finite load".into());
        }
        self.material.validate()?;
        Ok(())
    }

    /// Displacement prescribed on the top edge.
    pub fn top_displacement(&self) -> [f64; 2] {
        match self.mode {
            Mode::Tensile => [0.0, self.v_bar],
            Mode::Shear => [self.u_bar, 0.0],
            Mode::Mixed => [self.u_bar, self.v_bar],
        }
    }
}

/// Clamped bottom, displaced top, all other boundaries (crack faces
/// included) traction free, no body force.
pub fn setup(cfg: &ScenarioConfig) -> (DirichletSpec, LoadSpec) {
    let top = cfg.top_displacement();
    let bc = DirichletSpec::new()
        .with(BoundaryTag::Bottom, [Some(0.0), Some(0.0)])
        .with(BoundaryTag::Top, [Some(top[0]), Some(top[1])]);
    (bc, LoadSpec::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LigamentSample {
    pub x: f64,
    pub ux: f64,
    pub t22: f64,
    pub eps22: f64,
    pub sed: f64,
}

/// `n_samples` points uniformly spaced on `y = 0.5`, `x` from 0 to
/// `0.5 - tip_guard`.
pub fn ligament_extract(
    u: &FeFunction,
    material: &MaterialParams,
    n_samples: usize,
    tip_guard: f64,
) -> Result<Vec<LigamentSample>, ScenarioError> {
    if n_samples < 2 || !(0.0..0.5).contains(&tip_guard) {
        return Err(ScenarioError::Config(format!("n_samples={n_samples} tip_guard={tip_guard}")));
    }
    let end = 0.5 - tip_guard;
    (0..n_samples)
        .map(|i| {
            let x = end * i as f64 / (n_samples - 1) as f64;
            let p = [x, 0.5];
            let v = u.evaluate(p, SlitSide::None)?;
            let eps = SymTensor2::sym_grad(u.gradient(p, SlitSide::None)?);
            let t = stress(&eps, material)?;
            Ok(LigamentSample { x, ux: v[0], t22: t.yy, eps22: eps.yy, sed: strain_energy_density(&eps, &t) })
        })
        .collect()
}

/// Displacement of the upper crack face minus that of the lower one at `(x, 0.5)`.
pub fn crack_jump(u: &FeFunction, x: f64) -> Result<[f64; 2], ScenarioError> {
    if !(x > 0.5 && x < 1.0) || !u.space().mesh().has_slit() {
        return Err(ScenarioError::OffSlit(x));
    }
    let up = u.evaluate([x, 0.5], SlitSide::Upper)?;
    let low = u.evaluate([x, 0.5], SlitSide::Lower)?;
    Ok([up[0] - low[0], up[1] - low[1]])
}

/// Locale-independent 17-significant-digit formatting.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub const LIGAMENT_HEADER: &str = "x,ux,t22,eps22,sed,beta,mode";
pub const JUMP_HEADER: &str = "x,jump_ux,jump_uy,beta,mode";

/// Rows without header.
pub fn write_ligament_rows<W: Write>(w: &mut W, samples: &[LigamentSample], beta: f64, mode: Mode) -> io::Result<()> {
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt_num(s.x),
            fmt_num(s.ux),
            fmt_num(s.t22),
            fmt_num(s.eps22),
            fmt_num(s.sed),
            fmt_num(beta),
            mode
        )?;
    }
    Ok(())
}

pub fn write_jump_rows<W: Write>(w: &mut W, jumps: &[(f64, [f64; 2])], beta: f64, mode: Mode) -> io::Result<()> {
    for (x, j) in jumps {
        writeln!(w, "{},{},{},{},{}", fmt_num(*x), fmt_num(j[0]), fmt_num(j[1]), fmt_num(beta), mode)?;
    }
    Ok(())
}
