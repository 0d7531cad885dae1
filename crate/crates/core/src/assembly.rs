//! Residual and tangent of the condensed discrete problem.
//!
//! Unknowns are the free vector DOFs of a [`ConstraintSet`]. Every local DOF
//! of a cell expands into free DOFs plus a constant, so the condensed
//! residual is `-W^T r_K` and the condensed tangent `W^T K_K W`, summed over
//! cells in ascending id. Cells are evaluated in parallel and scattered in
//! order, so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fespace::{ConstraintSet, HpSpace, N_COMPONENTS};
use crate::material::{stress_and_tangent, volumetric_stiffness, MaterialError, MaterialParams, SymTensor2};
use crate::mesh::{BoundaryTag, CellId, Neighbor};
use crate::quadrature::{self, gauss_legendre_1d, gauss_rule, tabulate, tabulate_points, QuadRule, Tabulation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("inadmissible strain xi={xi} in cell {cell} at ({}, {})", point[0], point[1])]
    InadmissibleStrain { cell: CellId, point: [f64; 2], xi: f64, xi_crit: Option<f64> },
    #[error("state has {got} entries, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("material: {0}")]
    Material(MaterialError),
}

pub type ForceField = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

#[derive(Clone)]
pub enum BodyForce {
    Constant([f64; 2]),
    Field(ForceField),
}

impl BodyForce {
    pub fn at(&self, x: [f64; 2]) -> [f64; 2] {
        match self {
            BodyForce::Constant(f) => *f,
            BodyForce::Field(f) => f(x),
        }
    }
}

impl Default for BodyForce {
    fn default() -> Self {
        BodyForce::Constant([0.0; 2])
    }
}

impl fmt::Debug for BodyForce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BodyForce::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            BodyForce::Field(_) => f.write_str("Field(..)"),
        }
    }
}

/// Fields compare by identity.
impl PartialEq for BodyForce {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (BodyForce::Constant(a), BodyForce::Constant(b)) => a == b,
            (BodyForce::Field(a), BodyForce::Field(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// Body force and constant tractions per boundary tag; all zero by default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadSpec {
    pub body_force: BodyForce,
    pub tractions: BTreeMap<BoundaryTag, [f64; 2]>,
}

/// Square CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_pattern(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Self {
        let nnz = col_idx.len();
        Self { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn identity(n: usize) -> Self {
        Self { n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Keeps entries with nonzero value; row-major input.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` at `(i, j)`, which must be in the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.position(i, j).expect("entry outside sparsity pattern");
        self.values[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |K_ij - K_ji|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                d = d.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        d
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    /// Smallest diagonal entry.
    pub fn min_diagonal(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).fold(f64::INFINITY, f64::min)
    }
}

/// Local vector DOF `2 a + comp` of a cell, expanded into positions of the
/// cell's sorted free-DOF list.
#[derive(Debug, Clone)]
struct CellPlan {
    cell: CellId,
    free: Vec<usize>,
    expansion: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
struct DegreeData {
    rule: QuadRule,
    tab: Tabulation,
}

/// Traction face: cell, local face, traction.
type TractionFace = (CellId, usize, [f64; 2]);

/// Cached per-space data for repeated assembly.
#[derive(Debug, Clone)]
pub struct Assembler {
    space: Arc<HpSpace>,
    constraints: Arc<ConstraintSet>,
    material: MaterialParams,
    loads: LoadSpec,
    plans: Vec<CellPlan>,
    degree_data: Vec<Option<DegreeData>>,
    traction_faces: Vec<TractionFace>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrainSample {
    pub cell: CellId,
    pub point: [f64; 2],
    /// Quadrature weight times Jacobian.
    pub weight: f64,
    pub strain: SymTensor2,
}

struct LocalContribution {
    residual: Vec<f64>,
    matrix: Option<Vec<f64>>,
}

impl Assembler {
    pub fn new(
        space: Arc<HpSpace>,
        constraints: Arc<ConstraintSet>,
        material: MaterialParams,
        loads: LoadSpec,
    ) -> Result<Self, AssemblyError> {
        material.validate().map_err(AssemblyError::Material)?;
        let mesh = space.mesh().clone();
        let mut degree_data = vec![None; space.max_degree() + 1];
        let mut plans = Vec::with_capacity(mesh.n_active_cells());
        let mut traction_faces = Vec::new();
        for &c in mesh.leaves() {
            let p = space.degree(c);
            if degree_data[p].is_none() {
                let rule = gauss_rule(p + 2).expect("degree within quadrature range");
                let tab = tabulate(p, &rule);
                degree_data[p] = Some(DegreeData { rule, tab });
            }
            let mut raw = Vec::new();
            for a in 0..(p + 1) * (p + 1) {
                for comp in 0..N_COMPONENTS {
                    let dof = space.vector_dof(c, a, comp);
                    raw.push(match constraints.line(dof) {
                        None => vec![(constraints.free_index(dof).unwrap(), 1.0)],
                        Some(l) => l
                            .entries
                            .iter()
                            .map(|&(m, w)| (constraints.free_index(m).unwrap(), w))
                            .collect(),
                    });
                }
            }
            let mut free: Vec<usize> = raw.iter().flatten().map(|&(i, _)| i).collect();
            free.sort_unstable();
            free.dedup();
            let expansion = raw
                .into_iter()
                .map(|e| e.into_iter().map(|(i, w)| (free.binary_search(&i).unwrap(), w)).collect())
                .collect();
            plans.push(CellPlan { cell: c, free, expansion });
            if !loads.tractions.is_empty() {
                for fnb in mesh.face_neighbors(c).expect("active cell") {
                    if let Neighbor::Boundary(tag) = fnb.neighbor {
                        if let Some(&g) = loads.tractions.get(&tag) {
                            traction_faces.push((c, fnb.face, g));
                        }
                    }
                }
            }
        }
        let n = constraints.n_free();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for plan in &plans {
            for &i in &plan.free {
                rows[i].extend_from_slice(&plan.free);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            space,
            constraints,
            material,
            loads,
            plans,
            degree_data,
            traction_faces,
            row_ptr,
            col_idx,
        })
    }

    pub fn space(&self) -> &Arc<HpSpace> {
        &self.space
    }

    pub fn constraints(&self) -> &Arc<ConstraintSet> {
        &self.constraints
    }

    pub fn material(&self) -> &MaterialParams {
        &self.material
    }

    pub fn set_material(&mut self, material: MaterialParams) {
        self.material = material;
    }

    pub fn loads(&self) -> &LoadSpec {
        &self.loads
    }

    pub fn n_free(&self) -> usize {
        self.constraints.n_free()
    }

    fn check_len(&self, u: &[f64]) -> Result<(), AssemblyError> {
        if u.len() != self.space.n_dofs() {
            return Err(AssemblyError::LengthMismatch { expected: self.space.n_dofs(), got: u.len() });
        }
        Ok(())
    }

    /// `-(a(u; phi_i) - L(phi_i))` for every free DOF `i`.
    pub fn assemble_residual(&self, u: &[f64]) -> Result<Vec<f64>, AssemblyError> {
        Ok(self.assemble(u, false)?.0)
    }

    pub fn assemble_tangent(&self, u: &[f64]) -> Result<SparseMatrix, AssemblyError> {
        Ok(self.assemble(u, true)?.1.expect("requested"))
    }

    pub fn assemble_both(&self, u: &[f64]) -> Result<(Vec<f64>, SparseMatrix), AssemblyError> {
        let (r, k) = self.assemble(u, true)?;
        Ok((r, k.expect("requested")))
    }

    fn assemble(&self, u: &[f64], want_matrix: bool) -> Result<(Vec<f64>, Option<SparseMatrix>), AssemblyError> {
        self.check_len(u)?;
        let locals: Vec<Result<LocalContribution, AssemblyError>> =
            self.plans.par_iter().map(|plan| self.cell_contribution(plan, u, want_matrix)).collect();
        let n = self.n_free();
        let mut residual = vec![0.0; n];
        let mut matrix = want_matrix
            .then(|| SparseMatrix::from_pattern(n, self.row_ptr.clone(), self.col_idx.clone()));
        let traction = self.traction_contributions();
        for (plan, local) in self.plans.iter().zip(locals) {
            let local = local?;
            let m = plan.free.len();
            let mut rc = vec![0.0; m];
            for (d, exp) in plan.expansion.iter().enumerate() {
                for &(k, w) in exp {
                    rc[k] += w * local.residual[d];
                }
            }
            if let Some(t) = traction.get(&plan.cell) {
                for (d, exp) in plan.expansion.iter().enumerate() {
                    for &(k, w) in exp {
                        rc[k] -= w * t[d];
                    }
                }
            }
            for (k, &i) in plan.free.iter().enumerate() {
                residual[i] -= rc[k];
            }
            if let (Some(kl), Some(mat)) = (local.matrix, matrix.as_mut()) {
                let nl = plan.expansion.len();
                let mut kc = vec![0.0; m * m];
                for (d1, e1) in plan.expansion.iter().enumerate() {
                    for (d2, e2) in plan.expansion.iter().enumerate() {
                        let v = kl[d1 * nl + d2];
                        if v == 0.0 {
                            continue;
                        }
                        for &(k1, w1) in e1 {
                            for &(k2, w2) in e2 {
                                kc[k1 * m + k2] += w1 * w2 * v;
                            }
                        }
                    }
                }
                for (k1, &i) in plan.free.iter().enumerate() {
                    let row = &mat.col_idx[mat.row_ptr[i]..mat.row_ptr[i + 1]];
                    let base = mat.row_ptr[i];
                    // both lists are sorted, walk them together
                    let mut pos = 0;
                    for (k2, &j) in plan.free.iter().enumerate() {
                        while row[pos] != j {
                            pos += 1;
                        }
                        mat.values[base + pos] += kc[k1 * m + k2];
                    }
                }
            }
        }
        Ok((residual, matrix))
    }

    fn cell_contribution(
        &self,
        plan: &CellPlan,
        u: &[f64],
        want_matrix: bool,
    ) -> Result<LocalContribution, AssemblyError> {
        let c = plan.cell;
        let p = self.space.degree(c);
        let data = self.degree_data[p].as_ref().expect("tabulated degree");
        let rect = self.space.mesh().cell_rect(c);
        let map = quadrature::map_to_physical(&rect, &data.rule).expect("mesh cells are non-degenerate");
        let nf = data.tab.n_funcs;
        let nl = N_COMPONENTS * nf;
        let coef: Vec<[f64; 2]> = self
            .space
            .cell_dofs(c)
            .iter()
            .map(|&s| [u[N_COMPONENTS * s], u[N_COMPONENTS * s + 1]])
            .collect();
        let mut residual = vec![0.0; nl];
        let mut matrix = want_matrix.then(|| vec![0.0; nl * nl]);
        let mut grads = vec![[0.0; 2]; nf];
        for q in 0..data.tab.n_points {
            let fb = self.loads.body_force.at(map.points[q]);
            let wj = data.rule.weights[q] * map.measure;
            let mut gu = [[0.0; 2]; 2];
            for a in 0..nf {
                let g = data.tab.grad(q, a);
                grads[a] = [g[0] * map.grad_scale[0], g[1] * map.grad_scale[1]];
                for comp in 0..2 {
                    gu[comp][0] += coef[a][comp] * grads[a][0];
                    gu[comp][1] += coef[a][comp] * grads[a][1];
                }
            }
            let eps = SymTensor2::sym_grad(gu);
            let (t, tan) = stress_and_tangent(&eps, &self.material).map_err(|e| match e {
                MaterialError::InadmissibleStrain { xi, xi_crit } => {
                    AssemblyError::InadmissibleStrain { cell: c, point: map.points[q], xi, xi_crit }
                }
                other => AssemblyError::Material(other),
            })?;
            let rows = [t.row(0), t.row(1)];
            for a in 0..nf {
                let phi = data.tab.value(q, a);
                for comp in 0..2 {
                    residual[2 * a + comp] += wj
                        * (rows[comp][0] * grads[a][0] + rows[comp][1] * grads[a][1] - fb[comp] * phi);
                }
            }
            if let Some(k) = matrix.as_mut() {
                let (s, vol) = (tan.shear, tan.volumetric);
                for a in 0..nf {
                    let ga = grads[a];
                    for b in 0..nf {
                        let gb = grads[b];
                        let dot = ga[0] * gb[0] + ga[1] * gb[1];
                        for ci in 0..2 {
                            for ei in 0..2 {
                                let mut v = 0.5 * s * ga[ei] * gb[ci] + vol * ga[ci] * gb[ei];
                                if ci == ei {
                                    v += 0.5 * s * dot;
                                }
                                k[(2 * a + ci) * nl + 2 * b + ei] += wj * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(LocalContribution { residual, matrix })
    }

    /// Strain at every quadrature point, cells in ascending id.
    pub fn quadrature_strains(&self, u: &[f64]) -> Result<Vec<StrainSample>, AssemblyError> {
        self.check_len(u)?;
        let mut out = Vec::new();
        for plan in &self.plans {
            let c = plan.cell;
            let p = self.space.degree(c);
            let data = self.degree_data[p].as_ref().expect("tabulated degree");
            let rect = self.space.mesh().cell_rect(c);
            let map = quadrature::map_to_physical(&rect, &data.rule).expect("mesh cells are non-degenerate");
            let dofs = self.space.cell_dofs(c);
            for q in 0..data.tab.n_points {
                let mut gu = [[0.0; 2]; 2];
                for (a, &s) in dofs.iter().enumerate() {
                    let g = data.tab.grad(q, a);
                    let g = [g[0] * map.grad_scale[0], g[1] * map.grad_scale[1]];
                    for comp in 0..2 {
                        let v = u[N_COMPONENTS * s + comp];
                        gu[comp][0] += v * g[0];
                        gu[comp][1] += v * g[1];
                    }
                }
                out.push(StrainSample {
                    cell: c,
                    point: map.points[q],
                    weight: data.rule.weights[q] * map.measure,
                    strain: SymTensor2::sym_grad(gu),
                });
            }
        }
        Ok(out)
    }

    /// Smallest `1/E1 + h'(xi)` over quadrature points.
    pub fn min_volumetric_stiffness(&self, u: &[f64]) -> f64 {
        self.quadrature_strains(u)
            .map(|v| {
                v.iter()
                    .map(|s| volumetric_stiffness(s.strain.trace(), &self.material))
                    .fold(f64::INFINITY, f64::min)
            })
            .unwrap_or(f64::NAN)
    }

    /// `int_face g . phi` per local DOF, keyed by cell.
    fn traction_contributions(&self) -> BTreeMap<CellId, Vec<f64>> {
        let mut out: BTreeMap<CellId, Vec<f64>> = BTreeMap::new();
        for &(c, face, g) in &self.traction_faces {
            let p = self.space.degree(c);
            let (x, w) = gauss_legendre_1d(p + 2).expect("degree within quadrature range");
            let pts: Vec<[f64; 2]> = x
                .iter()
                .map(|&s| match face {
                    0 => [-1.0, s],
                    1 => [1.0, s],
                    2 => [s, -1.0],
                    _ => [s, 1.0],
                })
                .collect();
            let tab = tabulate_points(p, &pts);
            let rect = self.space.mesh().cell_rect(c);
            let half_len = 0.5 * if face < 2 { rect.hy } else { rect.hx };
            let entry = out.entry(c).or_insert_with(|| vec![0.0; N_COMPONENTS * tab.n_funcs]);
            for (q, wq) in w.iter().enumerate() {
                for a in 0..tab.n_funcs {
                    let v = wq * half_len * tab.value(q, a);
                    entry[2 * a] += v * g[0];
                    entry[2 * a + 1] += v * g[1];
                }
            }
        }
        out
    }
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::{uniform_degrees, DirichletSpec};
    use crate::mesh::{Flag, RefinementFlags, SlitQuadMesh};
    use crate::quadrature::LagrangeBasis1d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensile(v: f64) -> DirichletSpec {
        DirichletSpec::new()
            .with(BoundaryTag::Bottom, [Some(0.0), Some(-v)])
            .with(BoundaryTag::Top, [Some(0.0), Some(v)])
    }

    /// Hanging node and mixed degrees on a 7-cell mesh.
    fn small_space() -> Arc<HpSpace> {
        let m = SlitQuadMesh::unit_square(2).unwrap();
        let mut f = RefinementFlags::new(&m);
        f.set(0, Flag::RefineH);
        let m = Arc::new(m.refine(&f).unwrap());
        let mut d = uniform_degrees(&m, 2);
        for (k, &c) in m.leaves().iter().enumerate() {
            d[c] = 1 + k % 3;
        }
        Arc::new(HpSpace::distribute_dofs(m, d, 6).unwrap())
    }

    fn slit_space(p: usize) -> Arc<HpSpace> {
        let m = SlitQuadMesh::build_initial_mesh(4).unwrap();
        let mut f = RefinementFlags::new(&m);
        for c in m.tip_adjacent_cells() {
            f.set(c, Flag::RefineH);
        }
        let m = Arc::new(m.refine(&f).unwrap());
        let mut d = uniform_degrees(&m, p);
        for (k, &c) in m.leaves().iter().enumerate() {
            d[c] = p + k % 2;
        }
        Arc::new(HpSpace::distribute_dofs(m, d, 6).unwrap())
    }

    fn setup(space: Arc<HpSpace>, bc: &DirichletSpec, beta: f64) -> Assembler {
        let cs = Arc::new(ConstraintSet::build(&space, bc).unwrap());
        Assembler::new(space, cs, MaterialParams::default().with_beta(beta), LoadSpec::default()).unwrap()
    }

    fn random_state(asm: &Assembler, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free: Vec<f64> = (0..asm.n_free()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        asm.constraints().expand(&free, false)
    }

    #[test]
    fn zero_state_zero_loads() {
        let asm = setup(slit_space(2), &DirichletSpec::new(), -10.0);
        let r = asm.assemble_residual(&vec![0.0; asm.space().n_dofs()]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rigid_motion_has_no_internal_force() {
        let s = slit_space(2);
        let asm = setup(s.clone(), &DirichletSpec::new(), 10.0);
        let u = crate::fespace::interpolate(&s, |x| [0.3 - 0.01 * x[1], -0.2 + 0.01 * x[0]]);
        let r = asm.assemble_residual(u.values()).unwrap();
        assert!(norm(&r) < 1e-12, "{}", norm(&r));
    }

    #[test]
    fn linear_tangent_is_state_independent() {
        let asm = setup(slit_space(2), &tensile(0.01), 0.0);
        let k1 = asm.assemble_tangent(&random_state(&asm, 1e-2, 1)).unwrap();
        let k2 = asm.assemble_tangent(&random_state(&asm, 1e-2, 2)).unwrap();
        let d = k1.values().iter().zip(k2.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(d <= 1e-12);
    }

    #[test]
    fn linear_residual_is_affine() {
        // with beta = 0, R(u) = R(0) - K u, so the exact linear step zeroes it
        let asm = setup(slit_space(1), &tensile(0.01), 0.0);
        let u0 = asm.constraints().expand(&vec![0.0; asm.n_free()], false);
        let (r0, k) = asm.assemble_both(&u0).unwrap();
        let u1 = random_state(&asm, 1e-2, 4);
        let r1 = asm.assemble_residual(&u1).unwrap();
        let du: Vec<f64> = asm.constraints().restrict(&u1).iter().zip(asm.constraints().restrict(&u0)).map(|(a, b)| a - b).collect();
        let kd = k.mul_vec(&du);
        let err: Vec<f64> = (0..r0.len()).map(|i| r1[i] - (r0[i] - kd[i])).collect();
        assert!(norm(&err) <= 1e-12 * norm(&r0));
    }

    #[test]
    fn tangent_matches_central_differences() {
        for beta in [-10.0, 0.0, 10.0] {
            let asm = setup(slit_space(2), &tensile(1e-3), beta);
            let u = random_state(&asm, 1e-4, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let dfree: Vec<f64> = (0..asm.n_free()).map(|_| 1e-4 * rng.gen_range(-1.0..1.0)).collect();
            let du = asm.constraints().expand(&dfree, true);
            let h = 1e-6;
            let up: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + h * b).collect();
            let um: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a - h * b).collect();
            let rp = asm.assemble_residual(&up).unwrap();
            let rm = asm.assemble_residual(&um).unwrap();
            let kd = asm.assemble_tangent(&u).unwrap().mul_vec(&dfree);
            let diff: Vec<f64> = (0..kd.len()).map(|i| (rp[i] - rm[i]) / (2.0 * h) + kd[i]).collect();
            assert!(norm(&diff) <= 1e-6 * norm(&kd), "beta={beta}: {} vs {}", norm(&diff), norm(&kd));
        }
    }

    #[test]
    fn tangent_is_symmetric() {
        let asm = setup(small_space(), &tensile(1e-3), -10.0);
        let k = asm.assemble_tangent(&random_state(&asm, 1e-3, 3)).unwrap();
        assert!(k.symmetry_defect() <= 1e-10 * k.max_abs());
    }

    #[test]
    fn assembly_is_deterministic_across_thread_counts() {
        let asm = setup(slit_space(3), &tensile(1e-3), -10.0);
        let u = random_state(&asm, 1e-4, 5);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (r1, k1) = one.install(|| asm.assemble_both(&u).unwrap());
        let (r2, k2) = asm.assemble_both(&u).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(k1, k2);
    }

    #[test]
    fn inadmissible_strain_names_the_cell() {
        let s = slit_space(1);
        let asm = setup(s.clone(), &DirichletSpec::new(), 10.0);
        // uniform dilation with trace far beyond the critical value
        let u = crate::fespace::interpolate(&s, |x| [0.5 * x[0], 0.5 * x[1]]);
        match asm.assemble_residual(u.values()) {
            Err(AssemblyError::InadmissibleStrain { xi, xi_crit, .. }) => {
                assert!((xi - 1.0).abs() < 1e-12);
                assert!(xi > xi_crit.unwrap());
            }
            other => panic!("{other:?}"),
        }
    }

    /// Independent dense evaluation: loops over cells and tensor quadrature
    /// with a fresh 1D basis, builds the full local vectors, then condenses
    /// with an explicit dense constraint matrix.
    fn oracle_residual(space: &HpSpace, cs: &ConstraintSet, mat: &MaterialParams, u: &[f64]) -> Vec<f64> {
        let n = space.n_dofs();
        let mut full = vec![0.0; n];
        for &c in space.mesh().leaves() {
            let p = space.degree(c);
            let b = LagrangeBasis1d::lobatto(p);
            let (x, w) = gauss_legendre_1d(p + 2).unwrap();
            let r = space.mesh().cell_rect(c);
            let dofs = space.cell_dofs(c);
            for (qy, &sy) in x.iter().enumerate() {
                for (qx, &sx) in x.iter().enumerate() {
                    let (vx, vy, dx, dy) = (b.values(sx), b.values(sy), b.derivatives(sx), b.derivatives(sy));
                    let grad = |i: usize, j: usize| [dx[i] * vy[j] * 2.0 / r.hx, vx[i] * dy[j] * 2.0 / r.hy];
                    let mut g = [[0.0; 2]; 2];
                    for j in 0..=p {
                        for i in 0..=p {
                            let s = dofs[i + (p + 1) * j];
                            let gr = grad(i, j);
                            for comp in 0..2 {
                                for dir in 0..2 {
                                    g[comp][dir] += u[2 * s + comp] * gr[dir];
                                }
                            }
                        }
                    }
                    let xi = g[0][0] + g[1][1];
                    let f = (1.0 + mat.beta * xi) / (mat.e1 + mat.d * mat.e2 * (1.0 + mat.beta * xi));
                    let exy = 0.5 * (g[0][1] + g[1][0]);
                    let t = [
                        [g[0][0] / mat.e1 - mat.e2 * f * xi, exy / mat.e1],
                        [exy / mat.e1, g[1][1] / mat.e1 - mat.e2 * f * xi],
                    ];
                    let wj = w[qx] * w[qy] * r.hx * r.hy / 4.0;
                    for j in 0..=p {
                        for i in 0..=p {
                            let s = dofs[i + (p + 1) * j];
                            let gr = grad(i, j);
                            for comp in 0..2 {
                                full[2 * s + comp] += wj * (t[comp][0] * gr[0] + t[comp][1] * gr[1]);
                            }
                        }
                    }
                }
            }
        }
        // dense W: full dof d -> free index
        let nf = cs.n_free();
        let mut wmat = vec![vec![0.0; nf]; n];
        for d in 0..n {
            match cs.line(d) {
                None => wmat[d][cs.free_index(d).unwrap()] = 1.0,
                Some(l) => {
                    for &(m, wt) in &l.entries {
                        wmat[d][cs.free_index(m).unwrap()] += wt;
                    }
                }
            }
        }
        (0..nf).map(|i| -(0..n).map(|d| wmat[d][i] * full[d]).sum::<f64>()).collect()
    }

    #[test]
    fn residual_matches_dense_oracle() {
        let s = small_space();
        let asm = setup(s.clone(), &tensile(1e-2), -10.0);
        let u = random_state(&asm, 1e-2, 21);
        let r = asm.assemble_residual(&u).unwrap();
        let o = oracle_residual(&s, asm.constraints(), asm.material(), &u);
        let err = r.iter().zip(&o).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn traction_load_balances_linear_stretch() {
        // uniform traction on the top edge against a clamped bottom: total
        // external work of a unit vertical field equals the traction
        let m = Arc::new(SlitQuadMesh::unit_square(2).unwrap());
        let s = Arc::new(HpSpace::distribute_dofs(m.clone(), uniform_degrees(&m, 2), 6).unwrap());
        let cs = Arc::new(ConstraintSet::build(&s, &DirichletSpec::new()).unwrap());
        let mut loads = LoadSpec::default();
        loads.tractions.insert(BoundaryTag::Top, [0.0, 0.7]);
        let asm = Assembler::new(s.clone(), cs.clone(), MaterialParams::default(), loads).unwrap();
        let r = asm.assemble_residual(&vec![0.0; s.n_dofs()]).unwrap();
        let ones: f64 = (0..r.len()).filter(|&i| cs.free_dofs()[i] % 2 == 1).map(|i| r[i]).sum();
        assert!((ones - 0.7).abs() < 1e-13);
    }

    #[test]
    fn sparse_helpers() {
        let k = SparseMatrix::from_dense(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert_eq!(k.mul_vec(&[1.0, 1.0]), vec![3.0, 3.0]);
        assert_eq!(k.symmetry_defect(), 0.0);
        assert_eq!(SparseMatrix::identity(3).mul_vec(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }
}
