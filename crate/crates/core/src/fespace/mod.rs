//! Continuous `Q_p` spaces with per-cell degree on a [`SlitQuadMesh`].
//!
//! Each active cell carries the nodal Gauss-Lobatto basis of its degree.
//! Scalar DOFs live on vertices, on edges (one set of `p - 1` nodes per
//! distinct degree touching the edge) and in cell interiors. Continuity is
//! restored by interpolation constraints: every face has a master trace of
//! degree `min` over the touching cells (minimum rule), and node sets of
//! other degrees, hanging vertices and the fine sub-face nodes of a
//! refined neighbour interpolate that trace.
//!
//! The displacement field has two components: vector DOF `2 s + c` is
//! component `c` of scalar DOF `s`.

mod constraints;
mod function;

pub use constraints::{Constraint, ConstraintSet, DirichletSpec};
pub use function::{interpolate, transfer, FeFunction};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{CellId, MeshError, Neighbor, SlitQuadMesh, SlitSide, VertexId, FACE_VERTICES};
use crate::quadrature::LagrangeBasis1d;

pub const DEFAULT_P_MAX: usize = 6;
/// Components of the displacement field.
pub const N_COMPONENTS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("degree {degree} on cell {cell} is outside 1..={p_max}")]
    DegreeOutOfRange { cell: CellId, degree: usize, p_max: usize },
    #[error("coefficient vector has length {got}, space has {expected} dofs")]
    LengthMismatch { expected: usize, got: usize },
    #[error("spaces are not related by at most one adaptation step")]
    GenerationMismatch,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Edge identified by its end vertices in increasing coordinate order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey(pub VertexId, pub VertexId);

/// What a scalar DOF is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofEntity {
    Vertex(VertexId),
    /// `index`-th interior node (0-based) of the degree-`degree` node set on `edge`.
    Edge { edge: EdgeKey, degree: usize, index: usize },
    Interior { cell: CellId, index: usize },
}

/// Local node classification for tensor index `(i, j)` of a degree-`p` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LocalNode {
    Corner(usize),
    /// Local face and 1-based position along it.
    Face(usize, usize),
    Interior(usize),
}

pub(crate) fn classify_node(i: usize, j: usize, p: usize) -> LocalNode {
    let bi = i == 0 || i == p;
    let bj = j == 0 || j == p;
    match (bi, bj) {
        (true, true) => LocalNode::Corner(usize::from(i == p) + 2 * usize::from(j == p)),
        (false, true) => LocalNode::Face(if j == 0 { 2 } else { 3 }, i),
        (true, false) => LocalNode::Face(if i == 0 { 0 } else { 1 }, j),
        (false, false) => LocalNode::Interior((i - 1) + (j - 1) * (p - 1)),
    }
}

/// Scalar interpolation relation `dof = sum w * master` before closure.
pub(crate) type ScalarConstraints = std::collections::BTreeMap<usize, Vec<(usize, f64)>>;

static NEXT_SPACE_ID: AtomicU64 = AtomicU64::new(1);

/// Per-cell degrees plus the global DOF numbering.
#[derive(Debug)]
pub struct HpSpace {
    id: u64,
    mesh: Arc<SlitQuadMesh>,
    degrees: Vec<usize>,
    p_max: usize,
    cell_dofs: Vec<Vec<usize>>,
    entities: Vec<DofEntity>,
    dof_points: Vec<[f64; 2]>,
    dof_owners: Vec<CellId>,
    scalar_constraints: ScalarConstraints,
}

/// Uniform degree assignment for every active cell.
pub fn uniform_degrees(mesh: &SlitQuadMesh, p: usize) -> Vec<usize> {
    let mut d = vec![0; mesh.cells.len()];
    for &c in mesh.leaves() {
        d[c] = p;
    }
    d
}

struct Numbering<'m> {
    mesh: &'m SlitQuadMesh,
    entities: Vec<DofEntity>,
    points: Vec<[f64; 2]>,
    owners: Vec<CellId>,
    vertices: HashMap<VertexId, usize>,
    edges: HashMap<(EdgeKey, usize), usize>,
}

impl Numbering<'_> {
    fn push(&mut self, e: DofEntity, x: [f64; 2], owner: CellId) {
        self.entities.push(e);
        self.points.push(x);
        self.owners.push(owner);
    }

    fn vertex(&mut self, v: VertexId, owner: CellId) -> usize {
        if let Some(&d) = self.vertices.get(&v) {
            return d;
        }
        let d = self.entities.len();
        self.push(DofEntity::Vertex(v), self.mesh.vertex_point(v), owner);
        self.vertices.insert(v, d);
        d
    }

    /// First scalar DOF of the degree-`p` node set on `edge`.
    fn edge_set(&mut self, edge: EdgeKey, p: usize, owner: CellId) -> usize {
        if let Some(&d) = self.edges.get(&(edge, p)) {
            return d;
        }
        let base = self.entities.len();
        let (a, b) = (self.mesh.vertex_point(edge.0), self.mesh.vertex_point(edge.1));
        for (index, t) in edge_node_params(p).into_iter().enumerate() {
            let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            self.push(DofEntity::Edge { edge, degree: p, index }, x, owner);
        }
        self.edges.insert((edge, p), base);
        base
    }
}

impl HpSpace {
    /// Numbers DOFs cell by cell in ascending cell id, local nodes in
    /// lexicographic order, each entity when first met.
    pub fn distribute_dofs(
        mesh: Arc<SlitQuadMesh>,
        degrees: Vec<usize>,
        p_max: usize,
    ) -> Result<Self, SpaceError> {
        let mut degrees = degrees;
        degrees.resize(mesh.cells.len(), 0);
        for &c in mesh.leaves() {
            let degree = degrees[c];
            if degree < 1 || degree > p_max {
                return Err(SpaceError::DegreeOutOfRange { cell: c, degree, p_max });
            }
        }
        let mut num = Numbering {
            mesh: &mesh,
            entities: Vec::new(),
            points: Vec::new(),
            owners: Vec::new(),
            vertices: HashMap::new(),
            edges: HashMap::new(),
        };
        let mut cell_dofs = vec![Vec::new(); mesh.cells.len()];
        for &c in mesh.leaves() {
            let p = degrees[c];
            let cell = &mesh.cells[c];
            let mut local = Vec::with_capacity((p + 1) * (p + 1));
            let mut interior_base = None;
            let node_x = cell_node_points(&mesh, c, p);
            for j in 0..=p {
                for i in 0..=p {
                    let dof = match classify_node(i, j, p) {
                        LocalNode::Corner(k) => num.vertex(cell.vertices[k], c),
                        LocalNode::Face(f, k) => num.edge_set(face_edge(&mesh, c, f), p, c) + k - 1,
                        LocalNode::Interior(k) => {
                            let base = *interior_base.get_or_insert(num.entities.len());
                            if k == 0 {
                                for jj in 1..p {
                                    for ii in 1..p {
                                        let index = (ii - 1) + (jj - 1) * (p - 1);
                                        let x = node_x[ii + (p + 1) * jj];
                                        num.push(DofEntity::Interior { cell: c, index }, x, c);
                                    }
                                }
                            }
                            base + k
                        }
                    };
                    local.push(dof);
                }
            }
            cell_dofs[c] = local;
        }
        let scalar_constraints = build_interface_constraints(&mesh, &degrees, &mut num)?;
        let (entities, dof_points, dof_owners) = (num.entities, num.points, num.owners);
        Ok(Self {
            id: NEXT_SPACE_ID.fetch_add(1, Ordering::Relaxed),
            mesh,
            degrees,
            p_max,
            cell_dofs,
            entities,
            dof_points,
            dof_owners,
            scalar_constraints,
        })
    }

    /// Unique identifier of this space instance.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn mesh(&self) -> &Arc<SlitQuadMesh> {
        &self.mesh
    }

    pub fn degree(&self, c: CellId) -> usize {
        self.degrees[c]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    pub fn max_degree(&self) -> usize {
        self.mesh.leaves().iter().map(|&c| self.degrees[c]).max().unwrap_or(0)
    }

    pub fn n_scalar_dofs(&self) -> usize {
        self.entities.len()
    }

    /// Total vector DOFs, constrained ones included.
    pub fn n_dofs(&self) -> usize {
        N_COMPONENTS * self.entities.len()
    }

    pub fn entity(&self, scalar_dof: usize) -> DofEntity {
        self.entities[scalar_dof]
    }

    /// Scalar DOFs of cell `c` in local tensor order `i + (p + 1) j`.
    pub fn cell_dofs(&self, c: CellId) -> &[usize] {
        &self.cell_dofs[c]
    }

    /// Vector DOF of local node `a`, component `comp`.
    pub fn vector_dof(&self, c: CellId, a: usize, comp: usize) -> usize {
        N_COMPONENTS * self.cell_dofs[c][a] + comp
    }

    /// Physical positions of the local nodes of cell `c`.
    pub fn node_points(&self, c: CellId) -> Vec<[f64; 2]> {
        cell_node_points(&self.mesh, c, self.degrees[c])
    }

    /// Physical position of a scalar DOF's node.
    pub fn dof_point(&self, scalar_dof: usize) -> [f64; 2] {
        self.dof_points[scalar_dof]
    }

    /// A cell whose closure holds the DOF's node; on the slit it fixes the flank.
    pub fn dof_owner(&self, scalar_dof: usize) -> CellId {
        self.dof_owners[scalar_dof]
    }

    pub(crate) fn scalar_constraints(&self) -> &ScalarConstraints {
        &self.scalar_constraints
    }

    /// Scalar DOFs whose nodes lie on the given crack flank, tip excluded.
    pub fn slit_flank_dofs(&self, side: SlitSide) -> Vec<usize> {
        let on_flank = |v: VertexId| self.mesh.vertices[v].side == side;
        (0..self.entities.len())
            .filter(|&s| match self.entities[s] {
                DofEntity::Vertex(v) => on_flank(v),
                DofEntity::Edge { edge, .. } => {
                    (on_flank(edge.0) || Some(edge.0) == self.mesh.tip_vertex()) && on_flank(edge.1)
                }
                DofEntity::Interior { .. } => false,
            })
            .collect()
    }

    /// Whether two spaces share mesh lineage and differ by at most one refinement.
    pub fn is_successor_of(&self, old: &HpSpace) -> bool {
        let (a, b) = (&old.mesh, &self.mesh);
        let gen_ok = b.generation() == a.generation() || b.generation() == a.generation() + 1;
        gen_ok
            && a.n0() == b.n0()
            && a.has_slit() == b.has_slit()
            && b.cells.len() >= a.cells.len()
            && a.cells.iter().zip(&b.cells).all(|(x, y)| x.origin == y.origin && x.size == y.size)
            && old.mesh.leaves().iter().all(|&c| self.degrees.get(c).is_some_and(|&p| {
                // a surviving leaf never loses degree
                !b.cells[c].is_leaf() || p >= old.degrees[c]
            }))
    }
}

fn cell_node_points(mesh: &SlitQuadMesh, c: CellId, p: usize) -> Vec<[f64; 2]> {
    let nodes = crate::quadrature::gauss_lobatto_nodes(p);
    let r = mesh.cell_rect(c);
    let mut pts = Vec::with_capacity((p + 1) * (p + 1));
    for &y in &nodes {
        for &x in &nodes {
            pts.push(r.to_physical([x, y]));
        }
    }
    pts
}

fn face_edge(mesh: &SlitQuadMesh, c: CellId, face: usize) -> EdgeKey {
    let v = mesh.cells[c].vertices;
    EdgeKey(v[FACE_VERTICES[face][0]], v[FACE_VERTICES[face][1]])
}

/// Weights of the degree-`q` Lobatto trace at parameter `t` in `[0, 1]`.
fn trace_weights(q: usize, t: f64) -> Vec<f64> {
    LagrangeBasis1d::lobatto(q).values(2.0 * t - 1.0)
}

/// Parameters in `(0, 1)` of the interior nodes of a degree-`p` node set.
fn edge_node_params(p: usize) -> Vec<f64> {
    let nodes = crate::quadrature::gauss_lobatto_nodes(p);
    nodes[1..p].iter().map(|x| 0.5 * (x + 1.0)).collect()
}

fn build_interface_constraints(
    mesh: &SlitQuadMesh,
    degrees: &[usize],
    num: &mut Numbering,
) -> Result<ScalarConstraints, SpaceError> {
    let mut out = ScalarConstraints::new();
    // interpolate `dofs` at parameters `params` on the master trace
    let constrain = |out: &mut ScalarConstraints, masters: &[usize], q: usize, dofs: &[(usize, f64)]| {
        for &(dof, t) in dofs {
            let w = trace_weights(q, t);
            let entries: Vec<(usize, f64)> = masters
                .iter()
                .zip(&w)
                .filter(|(_, w)| w.abs() > 1e-14)
                .map(|(&m, &w)| (m, w))
                .collect();
            if entries.len() == 1 && entries[0].0 == dof {
                continue;
            }
            out.insert(dof, entries);
        }
    };
    for &c in mesh.leaves() {
        let pc = degrees[c];
        for fnb in mesh.face_neighbors(c)? {
            let f = fnb.face;
            let edge = face_edge(mesh, c, f);
            match fnb.neighbor {
                Neighbor::Same(n) if c < n => {
                    let pn = degrees[n];
                    if pn == pc {
                        continue;
                    }
                    let q = pc.min(pn);
                    let masters = master_list(num, edge, q, c);
                    let base = num.edge_set(edge, pc.max(pn), c);
                    let deps: Vec<(usize, f64)> = edge_node_params(pc.max(pn))
                        .into_iter()
                        .enumerate()
                        .map(|(k, t)| (base + k, t))
                        .collect();
                    constrain(&mut out, &masters, q, &deps);
                }
                Neighbor::Finer([f1, f2]) => {
                    let (p1, p2) = (degrees[f1], degrees[f2]);
                    let q = pc.min(p1).min(p2);
                    let masters = master_list(num, edge, q, c);
                    let mut deps = Vec::new();
                    if pc != q {
                        let base = num.edge_set(edge, pc, c);
                        deps.extend(edge_node_params(pc).into_iter().enumerate().map(|(k, t)| (base + k, t)));
                    }
                    let e1 = face_edge(mesh, f1, f ^ 1);
                    let e2 = face_edge(mesh, f2, f ^ 1);
                    deps.push((num.vertex(e1.1, f1), 0.5));
                    for (sub, pf, t0) in [(e1, p1, 0.0), (e2, p2, 0.5)] {
                        let base = num.edge_set(sub, pf, c);
                        deps.extend(
                            edge_node_params(pf)
                                .into_iter()
                                .enumerate()
                                .map(|(k, s)| (base + k, t0 + 0.5 * s)),
                        );
                    }
                    constrain(&mut out, &masters, q, &deps);
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Master DOFs of a degree-`q` trace on `edge`: start vertex, interior set, end vertex.
fn master_list(num: &mut Numbering, edge: EdgeKey, q: usize, owner: CellId) -> Vec<usize> {
    let mut m = Vec::with_capacity(q + 1);
    m.push(num.vertex(edge.0, owner));
    let base = num.edge_set(edge, q, owner);
    m.extend(base..base + q - 1);
    m.push(num.vertex(edge.1, owner));
    m
}
