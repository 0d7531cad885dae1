//! Discrete displacement fields.

use std::sync::Arc;

use crate::mesh::{CellId, SlitSide};
use crate::quadrature::LagrangeBasis1d;

use super::{HpSpace, SpaceError, N_COMPONENTS};

/// Coefficient vector tied to the space it was built on.
#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<HpSpace>,
    values: Vec<f64>,
}

impl FeFunction {
    pub fn zeros(space: Arc<HpSpace>) -> Self {
        let n = space.n_dofs();
        Self { space, values: vec![0.0; n] }
    }

    pub fn from_values(space: Arc<HpSpace>, values: Vec<f64>) -> Result<Self, SpaceError> {
        if values.len() != space.n_dofs() {
            return Err(SpaceError::LengthMismatch { expected: space.n_dofs(), got: values.len() });
        }
        Ok(Self { space, values })
    }

    pub fn space(&self) -> &Arc<HpSpace> {
        &self.space
    }

    /// Id of the owning space; stale functions are detected by comparing it.
    pub fn space_id(&self) -> u64 {
        self.space.id()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Local coefficients of cell `c` in tensor order.
    pub fn cell_values(&self, c: CellId) -> Vec<[f64; 2]> {
        self.space
            .cell_dofs(c)
            .iter()
            .map(|&s| [self.values[N_COMPONENTS * s], self.values[N_COMPONENTS * s + 1]])
            .collect()
    }

    /// Value at reference coordinates `xi` of cell `c`.
    pub fn evaluate_in_cell(&self, c: CellId, xi: [f64; 2]) -> [f64; 2] {
        let p = self.space.degree(c);
        let b = LagrangeBasis1d::lobatto(p);
        let (vx, vy) = (b.values(xi[0]), b.values(xi[1]));
        let coef = self.cell_values(c);
        let mut u = [0.0; 2];
        for j in 0..=p {
            for i in 0..=p {
                let phi = vx[i] * vy[j];
                let a = coef[i + (p + 1) * j];
                u[0] += phi * a[0];
                u[1] += phi * a[1];
            }
        }
        u
    }

    /// Physical gradient `g[comp][dir]` at reference coordinates `xi` of cell `c`.
    pub fn gradient_in_cell(&self, c: CellId, xi: [f64; 2]) -> [[f64; 2]; 2] {
        let p = self.space.degree(c);
        let b = LagrangeBasis1d::lobatto(p);
        let (vx, vy) = (b.values(xi[0]), b.values(xi[1]));
        let (dx, dy) = (b.derivatives(xi[0]), b.derivatives(xi[1]));
        let r = self.space.mesh().cell_rect(c);
        let (sx, sy) = (2.0 / r.hx, 2.0 / r.hy);
        let coef = self.cell_values(c);
        let mut g = [[0.0; 2]; 2];
        for j in 0..=p {
            for i in 0..=p {
                let gx = dx[i] * vy[j] * sx;
                let gy = vx[i] * dy[j] * sy;
                let a = coef[i + (p + 1) * j];
                for comp in 0..2 {
                    g[comp][0] += gx * a[comp];
                    g[comp][1] += gy * a[comp];
                }
            }
        }
        g
    }

    fn locate(&self, point: [f64; 2], side: SlitSide) -> Result<(CellId, [f64; 2]), SpaceError> {
        let mesh = self.space.mesh();
        let c = mesh.locate(point, side == SlitSide::Lower)?;
        Ok((c, mesh.cell_rect(c).to_reference(point)))
    }

    /// Value at a physical point. On the slit, `side` selects the flank.
    pub fn evaluate(&self, point: [f64; 2], side: SlitSide) -> Result<[f64; 2], SpaceError> {
        let (c, xi) = self.locate(point, side)?;
        Ok(self.evaluate_in_cell(c, xi))
    }

    pub fn gradient(&self, point: [f64; 2], side: SlitSide) -> Result<[[f64; 2]; 2], SpaceError> {
        let (c, xi) = self.locate(point, side)?;
        Ok(self.gradient_in_cell(c, xi))
    }
}

/// Nodal interpolant of `f`. Constrained entries are left as interpolated.
pub fn interpolate(space: &Arc<HpSpace>, f: impl Fn([f64; 2]) -> [f64; 2]) -> FeFunction {
    let mut u = FeFunction::zeros(space.clone());
    for s in 0..space.n_scalar_dofs() {
        let v = f(space.dof_point(s));
        u.values[N_COMPONENTS * s] = v[0];
        u.values[N_COMPONENTS * s + 1] = v[1];
    }
    u
}

/// Moves `old` onto `new_space`, whose mesh is `old`'s mesh or one refinement
/// of it. Every new node takes the value of the old cell covering it, which
/// is exact because the old space is contained in the new one.
pub fn transfer(old: &FeFunction, new_space: &Arc<HpSpace>) -> Result<FeFunction, SpaceError> {
    let old_space = old.space();
    if !new_space.is_successor_of(old_space) {
        return Err(SpaceError::GenerationMismatch);
    }
    let old_mesh = old_space.mesh();
    let new_mesh = new_space.mesh();
    let n_old = old_mesh.cells.len();
    let mut out = FeFunction::zeros(new_space.clone());
    for s in 0..new_space.n_scalar_dofs() {
        let mut src = new_space.dof_owner(s);
        while src >= n_old || !old_mesh.cells[src].is_leaf() {
            src = new_mesh.cells[src].parent.ok_or(SpaceError::GenerationMismatch)?;
        }
        let xi = old_mesh.cell_rect(src).to_reference(new_space.dof_point(s));
        let v = old.evaluate_in_cell(src, xi);
        out.values[N_COMPONENTS * s] = v[0];
        out.values[N_COMPONENTS * s + 1] = v[1];
    }
    Ok(out)
}
