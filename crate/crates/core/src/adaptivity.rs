//! Error and smoothness indicators, marking, and one refine/enrich/transfer step.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fespace::{transfer, ConstraintSet, DirichletSpec, FeFunction, HpSpace, SpaceError};
use crate::mesh::{CellId, Flag, MeshError, Neighbor, RefinementFlags, SlitQuadMesh, FACE_NORMALS, FACE_VERTICES};
use crate::quadrature::{gauss_legendre_1d, legendre, LagrangeBasis1d};

/// Coefficients below this are treated as zero in the decay fit.
pub const COEFF_FLOOR: f64 = 1e-14;
/// `sigma` of cells that cannot be classified as smooth (degree 1).
pub const NON_SMOOTH: f64 = f64::NEG_INFINITY;
/// `sigma` of cells whose higher modes vanish.
pub const MAX_SMOOTH: f64 = f64::INFINITY;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("refine fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Per-cell indicators indexed by cell id; inactive cells hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CellIndicators {
    pub eta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub global_eta: f64,
}

/// Face integral of the squared normal-gradient jump between `a` and `b`
/// over the segment `[x0, x1]`, with `n` the outward normal of `a`.
fn jump_integral(u: &FeFunction, a: CellId, b: CellId, x0: [f64; 2], x1: [f64; 2], n: [f64; 2]) -> f64 {
    let space = u.space();
    let mesh = space.mesh();
    let npts = space.degree(a).max(space.degree(b)) + 2;
    let (s, w) = gauss_legendre_1d(npts).expect("degree within quadrature range");
    let half_len = 0.5 * ((x1[0] - x0[0]).powi(2) + (x1[1] - x0[1]).powi(2)).sqrt();
    let (ra, rb) = (mesh.cell_rect(a), mesh.cell_rect(b));
    let mut total = 0.0;
    for (sq, wq) in s.iter().zip(&w) {
        let t = 0.5 * (sq + 1.0);
        let x = [x0[0] + t * (x1[0] - x0[0]), x0[1] + t * (x1[1] - x0[1])];
        let ga = u.gradient_in_cell(a, ra.to_reference(x));
        let gb = u.gradient_in_cell(b, rb.to_reference(x));
        let mut j2 = 0.0;
        for comp in 0..2 {
            let j = (ga[comp][0] - gb[comp][0]) * n[0] + (ga[comp][1] - gb[comp][1]) * n[1];
            j2 += j * j;
        }
        total += wq * half_len * j2;
    }
    total
}

/// Kelly indicators: `eta_K^2 = h_K / 24 * sum over faces of the integrated
/// squared jump of the normal derivative`, summed over components. Boundary
/// and crack faces contribute nothing. A face with two finer neighbours is
/// integrated per sub-face against the coarse trace.
pub fn kelly_indicators(u: &FeFunction) -> Vec<f64> {
    let space = u.space();
    let mesh = space.mesh();
    // (cell receiving the integral, other cell, segment, normal)
    let mut pieces: Vec<(CellId, CellId, [f64; 2], [f64; 2], [f64; 2])> = Vec::new();
    for &c in mesh.leaves() {
        let nb = mesh.face_neighbors(c).expect("active cell");
        for fnb in nb {
            let v = mesh.cells[c].vertices;
            let normal = FACE_NORMALS[fnb.face];
            match fnb.neighbor {
                Neighbor::Same(n) if c < n => {
                    let a = mesh.vertex_point(v[FACE_VERTICES[fnb.face][0]]);
                    let b = mesh.vertex_point(v[FACE_VERTICES[fnb.face][1]]);
                    pieces.push((c, n, a, b, normal));
                }
                Neighbor::Finer(fs) => {
                    for f in fs {
                        let fv = mesh.cells[f].vertices;
                        let opp = fnb.face ^ 1;
                        let a = mesh.vertex_point(fv[FACE_VERTICES[opp][0]]);
                        let b = mesh.vertex_point(fv[FACE_VERTICES[opp][1]]);
                        pieces.push((c, f, a, b, normal));
                    }
                }
                _ => {}
            }
        }
    }
    let integrals: Vec<f64> = pieces
        .par_iter()
        .map(|&(a, b, x0, x1, n)| jump_integral(u, a, b, x0, x1, n))
        .collect();
    let mut face_sum = vec![0.0; mesh.cells.len()];
    for (&(a, b, ..), v) in pieces.iter().zip(integrals) {
        face_sum[a] += v;
        face_sum[b] += v;
    }
    let mut eta = vec![0.0; mesh.cells.len()];
    for &c in mesh.leaves() {
        eta[c] = (mesh.cell_diameter(c) / 24.0 * face_sum[c]).sqrt();
    }
    eta
}

/// Tensor Legendre coefficients `a[i][j]`, `i + j <= p`, of one component of
/// a degree-`p` cell polynomial given by its Lobatto nodal values.
pub fn legendre_coefficients(nodal: &[f64], p: usize) -> Vec<Vec<f64>> {
    let basis = LagrangeBasis1d::lobatto(p);
    let (x, w) = gauss_legendre_1d(p + 2).expect("degree within quadrature range");
    let phi: Vec<Vec<f64>> = x.iter().map(|&s| basis.values(s)).collect();
    let leg: Vec<Vec<f64>> = x.iter().map(|&s| (0..=p).map(|k| legendre(k, s).0).collect()).collect();
    // values at the Gauss grid
    let nq = x.len();
    let mut vals = vec![0.0; nq * nq];
    for qy in 0..nq {
        for qx in 0..nq {
            let mut v = 0.0;
            for j in 0..=p {
                for i in 0..=p {
                    v += nodal[i + (p + 1) * j] * phi[qx][i] * phi[qy][j];
                }
            }
            vals[qx + nq * qy] = v;
        }
    }
    let mut a = vec![vec![0.0; p + 1]; p + 1];
    for i in 0..=p {
        for j in 0..=p - i {
            let mut s = 0.0;
            for qy in 0..nq {
                for qx in 0..nq {
                    s += w[qx] * w[qy] * vals[qx + nq * qy] * leg[qx][i] * leg[qy][j];
                }
            }
            a[i][j] = s * (2 * i + 1) as f64 * (2 * j + 1) as f64 / 4.0;
        }
    }
    a
}

/// Decay exponent from coefficients: `-slope` of the least-squares line
/// through `(log k, log A_k)`, `A_k = max over i + j = k of |a_ij|`, for
/// `k = 1..=p`, skipping `A_k` below [`COEFF_FLOOR`].
pub fn decay_exponent(a: &[Vec<f64>], p: usize) -> f64 {
    if p < 2 {
        return NON_SMOOTH;
    }
    let amax: Vec<f64> = (1..=p)
        .map(|k| (0..=k).map(|i| a[i][k - i].abs()).fold(0.0, f64::max))
        .collect();
    let pts: Vec<(f64, f64)> = amax
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= COEFF_FLOOR)
        .map(|(k, &v)| (((k + 1) as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        // nothing or a single mode left: smooth unless only the top mode survives
        return if amax[p - 1] < COEFF_FLOOR { MAX_SMOOTH } else { NON_SMOOTH };
    }
    -least_squares_slope(&pts)
}

/// Slope of the least-squares line through `pts`.
pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Smoothness exponent per cell, minimum over the two components.
pub fn legendre_smoothness(u: &FeFunction) -> Vec<f64> {
    let space = u.space();
    let mesh = space.mesh();
    let leaves = mesh.leaves();
    let per_cell: Vec<f64> = leaves
        .par_iter()
        .map(|&c| {
            let p = space.degree(c);
            if p < 2 {
                return NON_SMOOTH;
            }
            let vals = u.cell_values(c);
            (0..2)
                .map(|comp| {
                    let nodal: Vec<f64> = vals.iter().map(|v| v[comp]).collect();
                    decay_exponent(&legendre_coefficients(&nodal, p), p)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut sigma = vec![0.0; mesh.cells.len()];
    for (&c, s) in leaves.iter().zip(per_cell) {
        sigma[c] = s;
    }
    sigma
}

pub fn indicators(u: &FeFunction) -> CellIndicators {
    let eta = kelly_indicators(u);
    let sigma = legendre_smoothness(u);
    let global_eta = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
    CellIndicators { eta, sigma, global_eta }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkSettings {
    pub refine_fraction: f64,
    pub sigma_threshold: f64,
    pub p_max: usize,
    /// Lower bound on the number of marked cells (0 disables).
    pub min_marked: usize,
}

impl Default for MarkSettings {
    fn default() -> Self {
        Self { refine_fraction: 0.3, sigma_threshold: 2.0, p_max: 6, min_marked: 1 }
    }
}

/// Flags the `ceil(fraction * n)` cells of largest `eta` (ties to the lower
/// id). A flagged cell is p-enriched when its `sigma` exceeds the threshold
/// and its degree is below `p_max`, and h-refined otherwise.
pub fn mark(space: &HpSpace, ind: &CellIndicators, settings: &MarkSettings) -> Result<RefinementFlags, AdaptError> {
    let f = settings.refine_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(AdaptError::BadFraction(f));
    }
    let mesh = space.mesh();
    let mut order: Vec<CellId> = mesh.leaves().to_vec();
    order.sort_by(|&a, &b| ind.eta[b].total_cmp(&ind.eta[a]).then(a.cmp(&b)));
    let n = order.len();
    let count = ((f * n as f64 - 1e-9).ceil().max(0.0) as usize).max(settings.min_marked).min(n);
    let mut flags = RefinementFlags::new(mesh);
    for &c in &order[..count] {
        let smooth = ind.sigma[c] > settings.sigma_threshold;
        let flag = if smooth && space.degree(c) < settings.p_max { Flag::RaiseP } else { Flag::RefineH };
        flags.set(c, flag);
    }
    Ok(flags)
}

/// Result of one refine/enrich/transfer step.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub flags: RefinementFlags,
    pub space: Arc<HpSpace>,
    pub constraints: Arc<ConstraintSet>,
    /// Previous solution moved to the new space, constraints applied.
    pub u: FeFunction,
}

/// Applies `flags`: h-refines (with closure), raises degrees, rebuilds the
/// constraints and transfers `u`. Children inherit the parent's degree,
/// raised by one when the parent was flagged for p-enrichment.
pub fn apply_flags(
    u: &FeFunction,
    flags: RefinementFlags,
    dirichlet: &DirichletSpec,
    p_max: usize,
) -> Result<AdaptOutcome, AdaptError> {
    let old = u.space();
    let mesh = old.mesh();
    let raise = |c: CellId, p: usize| if flags.get(c) == Flag::RaiseP { (p + 1).min(p_max) } else { p };
    if flags.count(Flag::RefineH) == 0 && flags.count(Flag::RaiseP) == 0 {
        let constraints = Arc::new(ConstraintSet::build(old, dirichlet)?);
        return Ok(AdaptOutcome { flags, space: old.clone(), constraints, u: u.clone() });
    }
    let new_mesh: Arc<SlitQuadMesh> = if flags.count(Flag::RefineH) > 0 {
        Arc::new(mesh.refine(&flags)?)
    } else {
        mesh.clone()
    };
    let mut degrees = vec![0; new_mesh.cells.len()];
    for &c in new_mesh.leaves() {
        degrees[c] = if c < mesh.cells.len() {
            raise(c, old.degree(c))
        } else {
            let parent = new_mesh.cells[c].parent.expect("new cells have parents");
            raise(parent, old.degree(parent))
        };
    }
    let space = Arc::new(HpSpace::distribute_dofs(new_mesh, degrees, p_max)?);
    let constraints = Arc::new(ConstraintSet::build(&space, dirichlet)?);
    let mut v = transfer(u, &space)?;
    constraints.distribute(v.values_mut());
    Ok(AdaptOutcome { flags, space, constraints, u: v })
}

/// Estimate, mark and adapt in one call.
pub fn adapt_cycle(
    u: &FeFunction,
    dirichlet: &DirichletSpec,
    settings: &MarkSettings,
) -> Result<(CellIndicators, AdaptOutcome), AdaptError> {
    let ind = indicators(u);
    let flags = mark(u.space(), &ind, settings)?;
    let out = apply_flags(u, flags, dirichlet, settings.p_max)?;
    Ok((ind, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::{interpolate, uniform_degrees};
    use crate::mesh::SlitQuadMesh;

    fn space(mesh: SlitQuadMesh, p: usize) -> Arc<HpSpace> {
        let m = Arc::new(mesh);
        Arc::new(HpSpace::distribute_dofs(m.clone(), uniform_degrees(&m, p), 6).unwrap())
    }

    fn refined_tip_mesh() -> SlitQuadMesh {
        let m = SlitQuadMesh::build_initial_mesh(4).unwrap();
        let mut f = RefinementFlags::new(&m);
        for c in m.tip_adjacent_cells() {
            f.set(c, Flag::RefineH);
        }
        m.refine(&f).unwrap()
    }

    #[test]
    fn kelly_vanishes_for_linear_fields() {
        let s = space(refined_tip_mesh(), 2);
        let u = interpolate(&s, |x| [0.2 + x[0] - 3.0 * x[1], 0.5 * x[0] + 0.1 * x[1]]);
        let eta = kelly_indicators(&u);
        assert!(eta.iter().all(|&e| e <= 1e-12), "{:?}", eta.iter().fold(0.0f64, |m, &e| m.max(e)));
    }

    #[test]
    fn kelly_constant_jump_closed_form() {
        // u_x = max(x - 0.5, 0) jumps by 1 in du/dx across x = 0.5
        let m = SlitQuadMesh::unit_square(2).unwrap();
        let s = space(m, 1);
        let u = interpolate(&s, |x| [(x[0] - 0.5).max(0.0), 0.0]);
        let eta = kelly_indicators(&u);
        let h = 0.5f64 * 2f64.sqrt();
        let expect = (h / 24.0 * 0.5).sqrt();
        for &c in s.mesh().leaves() {
            assert!((eta[c] - expect).abs() < 1e-10 * expect, "{c}: {}", eta[c]);
        }
    }

    #[test]
    fn kelly_hanging_face_is_split() {
        // same jump, coarse cell on the left and a refined cell on the right
        let m = SlitQuadMesh::unit_square(2).unwrap();
        let mut f = RefinementFlags::new(&m);
        f.set(1, Flag::RefineH);
        let s = space(m.refine(&f).unwrap(), 1);
        let u = interpolate(&s, |x| [(x[0] - 0.5).max(0.0), 0.0]);
        let eta = kelly_indicators(&u);
        let h0 = 0.5f64 * 2f64.sqrt();
        assert!((eta[0] - (h0 / 24.0 * 0.5).sqrt()).abs() < 1e-12);
        for &c in &s.mesh().cells[1].children.unwrap() {
            let on_face = s.mesh().cell_rect(c).x0 == 0.5;
            let expect = if on_face { (0.5 * h0 / 24.0 * 0.25).sqrt() } else { 0.0 };
            assert!((eta[c] - expect).abs() < 1e-12, "{c}: {}", eta[c]);
        }
    }

    #[test]
    fn global_eta_is_consistent() {
        let s = space(refined_tip_mesh(), 2);
        let u = interpolate(&s, |x| [(x[0] * 7.0).sin() * x[1], (x[1] * 3.0).cos()]);
        let ind = indicators(&u);
        let sum: f64 = ind.eta.iter().map(|e| e * e).sum();
        assert!((ind.global_eta.powi(2) - sum).abs() <= 1e-12 * sum);
        assert!(ind.eta.iter().all(|e| e.is_finite() && *e >= 0.0));
    }

    #[test]
    fn injected_decay_is_recovered() {
        for p in 2..=6 {
            let mut a = vec![vec![0.0; p + 1]; p + 1];
            for k in 1..=p {
                a[k][0] = (k as f64).powi(-2);
                if k >= 2 {
                    a[1][k - 1] = 0.5 * (k as f64).powi(-2);
                }
            }
            assert!((decay_exponent(&a, p) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_decay_through_nodal_values() {
        // build u = sum_k k^-2 P_k(x) on a single p = 5 cell
        let p = 5;
        let nodes = crate::quadrature::gauss_lobatto_nodes(p);
        let mut nodal = vec![0.0; (p + 1) * (p + 1)];
        for j in 0..=p {
            for i in 0..=p {
                nodal[i + (p + 1) * j] = (1..=p).map(|k| (k as f64).powi(-2) * legendre(k, nodes[i]).0).sum();
            }
        }
        let a = legendre_coefficients(&nodal, p);
        assert!((decay_exponent(&a, p) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn low_degree_fields_are_maximally_smooth() {
        let s = space(SlitQuadMesh::unit_square(2).unwrap(), 3);
        let u = interpolate(&s, |x| [1.0 + 2.0 * x[0] - x[1], 0.3 * x[1]]);
        let sigma = legendre_smoothness(&u);
        for &c in s.mesh().leaves() {
            assert_eq!(sigma[c], MAX_SMOOTH);
        }
        let s1 = space(SlitQuadMesh::unit_square(2).unwrap(), 1);
        let u1 = interpolate(&s1, |x| [x[0], x[1]]);
        assert!(legendre_smoothness(&u1).iter().take(4).all(|&v| v == NON_SMOOTH));
    }

    fn synthetic(n: usize, sigma: f64) -> (Arc<HpSpace>, CellIndicators) {
        let s = space(SlitQuadMesh::unit_square(n).unwrap(), 2);
        let m = s.mesh().cells.len();
        let eta = (0..m).map(|c| ((c * 37) % 11) as f64).collect();
        (s, CellIndicators { eta, sigma: vec![sigma; m], global_eta: 0.0 })
    }

    #[test]
    fn marking_counts_and_decisions() {
        let (s, ind) = synthetic(4, MAX_SMOOTH);
        let all = mark(&s, &ind, &MarkSettings { refine_fraction: 1.0, ..Default::default() }).unwrap();
        assert_eq!(all.count(Flag::RaiseP), 16);

        let (s, ind) = synthetic(2, 0.5);
        let f = mark(&s, &ind, &MarkSettings { refine_fraction: 0.5, ..Default::default() }).unwrap();
        assert_eq!(f.count(Flag::RefineH), 2);

        // 12 cells at fraction 0.3: ceil(3.6) = 4
        let m = SlitQuadMesh::unit_square(3).unwrap();
        let mut fl = RefinementFlags::new(&m);
        fl.set(0, Flag::RefineH);
        let s = space(m.refine(&fl).unwrap(), 2);
        assert_eq!(s.mesh().n_active_cells(), 12);
        let n = s.mesh().cells.len();
        let ind = CellIndicators { eta: (0..n).map(|c| c as f64).collect(), sigma: vec![0.0; n], global_eta: 0.0 };
        let f = mark(&s, &ind, &MarkSettings::default()).unwrap();
        assert_eq!(f.count(Flag::RefineH), 4);
    }

    #[test]
    fn marking_three_of_ten() {
        let (s, mut ind) = synthetic(4, 5.0);
        // keep ten candidates by giving the rest zero indicator and a 10-cell count
        let leaves: Vec<CellId> = s.mesh().leaves().to_vec();
        for (k, &c) in leaves.iter().enumerate() {
            ind.eta[c] = if k < 10 { 1.0 + k as f64 } else { 0.0 };
        }
        let f = mark(&s, &ind, &MarkSettings { refine_fraction: 0.3 * 10.0 / 16.0, ..Default::default() }).unwrap();
        assert_eq!(f.count(Flag::RaiseP), 3);
        for &c in &leaves[7..10] {
            assert_eq!(f.get(c), Flag::RaiseP);
        }
    }

    #[test]
    fn ties_go_to_lower_ids_and_p_max_falls_back() {
        let (s, mut ind) = synthetic(2, MAX_SMOOTH);
        ind.eta = vec![1.0; 4];
        let f = mark(&s, &ind, &MarkSettings { refine_fraction: 0.5, p_max: 2, ..Default::default() }).unwrap();
        assert_eq!(f.get(0), Flag::RefineH);
        assert_eq!(f.get(1), Flag::RefineH);
        assert_eq!(f.get(2), Flag::Keep);
        assert!(mark(&s, &ind, &MarkSettings { refine_fraction: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn empty_marking_is_identity() {
        let s = space(SlitQuadMesh::build_initial_mesh(4).unwrap(), 2);
        let u = interpolate(&s, |x| [x[0], x[1]]);
        let settings = MarkSettings { refine_fraction: 1e-12, min_marked: 0, ..Default::default() };
        let (_, out) = adapt_cycle(&u, &DirichletSpec::new(), &settings).unwrap();
        assert!(Arc::ptr_eq(&out.space, &s));
        assert_eq!(out.u.values(), u.values());
    }

    #[test]
    fn uniform_p_raise_gives_q2_count() {
        let s = space(SlitQuadMesh::build_initial_mesh(4).unwrap(), 1);
        let u = interpolate(&s, |x| [x[0], 0.0]);
        let n = s.mesh().cells.len();
        let ind = CellIndicators { eta: vec![1.0; n], sigma: vec![MAX_SMOOTH; n], global_eta: 0.0 };
        let flags = mark(&s, &ind, &MarkSettings { refine_fraction: 1.0, ..Default::default() }).unwrap();
        let out = apply_flags(&u, flags, &DirichletSpec::new(), 6).unwrap();
        let q2 = space(SlitQuadMesh::build_initial_mesh(4).unwrap(), 2);
        assert_eq!(out.space.n_dofs(), q2.n_dofs());
        assert_eq!(q2_slit_dofs(4), q2.n_dofs());
    }

    /// `(2 n0 + 1)^2` lattice nodes plus `n0` duplicated slit nodes, two components.
    fn q2_slit_dofs(n0: usize) -> usize {
        2 * ((2 * n0 + 1).pow(2) + n0)
    }

    #[test]
    fn h_refinement_transfers_exactly() {
        let s = space(refined_tip_mesh(), 2);
        let u = interpolate(&s, |x| [x[0] * x[0], x[0] * x[1]]);
        let n = s.mesh().cells.len();
        let ind = CellIndicators { eta: (0..n).map(|c| c as f64).collect(), sigma: vec![0.0; n], global_eta: 0.0 };
        let flags = mark(&s, &ind, &MarkSettings::default()).unwrap();
        let out = apply_flags(&u, flags, &DirichletSpec::new(), 6).unwrap();
        for x in [[0.1, 0.2], [0.6, 0.7], [0.9, 0.1], [0.51, 0.49]] {
            let a = out.u.evaluate(x, crate::mesh::SlitSide::None).unwrap();
            assert!((a[0] - x[0] * x[0]).abs() < 1e-12 && (a[1] - x[0] * x[1]).abs() < 1e-12);
        }
    }
}
