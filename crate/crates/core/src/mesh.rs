//! Hierarchical quadrilateral mesh of the unit square with a crack slit
//! along `y = 0.5`, `0.5 < x <= 1`.
//!
//! Coordinates are stored as integers on a dyadic lattice fine enough for
//! [`MAX_LEVEL`] refinements, so geometric identification of vertices and
//! faces is exact. The slit is topological: lattice points on the open slit
//! segment carry an upper and a lower vertex copy, and the tip stays single.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::quadrature::Rect;

pub type CellId = usize;
pub type VertexId = usize;

/// Deepest refinement level below the initial grid.
pub const MAX_LEVEL: u32 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("initial resolution n0 = {0} must be even and at least 2 so the slit follows mesh lines")]
    SlitResolution(usize),
    #[error("initial resolution n0 = {0} must be at least 1")]
    Resolution(usize),
    #[error("cell {0} is not an active leaf cell")]
    NotALeaf(CellId),
    #[error("cell {0} cannot be refined beyond level {MAX_LEVEL}")]
    MaxLevel(CellId),
    #[error("point ({0}, {1}) lies outside the unit square")]
    OutsideDomain(f64, f64),
}

/// Which copy of a duplicated slit vertex, or `None` away from the slit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlitSide {
    None,
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Bottom,
    Top,
    Left,
    Right,
    CrackUpper,
    CrackLower,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 6] = [
        BoundaryTag::Bottom,
        BoundaryTag::Top,
        BoundaryTag::Left,
        BoundaryTag::Right,
        BoundaryTag::CrackUpper,
        BoundaryTag::CrackLower,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BoundaryTag::Bottom => "bottom",
            BoundaryTag::Top => "top",
            BoundaryTag::Left => "left",
            BoundaryTag::Right => "right",
            BoundaryTag::CrackUpper => "crack_upper",
            BoundaryTag::CrackLower => "crack_lower",
        }
    }

    pub fn is_crack(&self) -> bool {
        matches!(self, BoundaryTag::CrackUpper | BoundaryTag::CrackLower)
    }
}

/// Local face numbering: 0 = x-, 1 = x+, 2 = y-, 3 = y+.
pub const FACE_X_MINUS: usize = 0;
pub const FACE_X_PLUS: usize = 1;
pub const FACE_Y_MINUS: usize = 2;
pub const FACE_Y_PLUS: usize = 3;

/// Local vertices of each face in increasing coordinate along the face.
/// Local vertex order is SW, SE, NW, NE.
pub const FACE_VERTICES: [[usize; 2]; 4] = [[0, 2], [1, 3], [0, 1], [2, 3]];

/// Outward unit normal of each local face.
pub const FACE_NORMALS: [[f64; 2]; 4] = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub pos: [i64; 2],
    pub side: SlitSide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub level: u32,
    /// Lower-left corner on the integer lattice.
    pub origin: [i64; 2],
    /// Side length on the integer lattice.
    pub size: i64,
    pub parent: Option<CellId>,
    /// Children in SW, SE, NW, NE order.
    pub children: Option<[CellId; 4]>,
    /// SW, SE, NW, NE.
    pub vertices: [VertexId; 4],
}

impl Cell {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// What lies across a cell face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbor {
    Boundary(BoundaryTag),
    Same(CellId),
    /// Two finer leaves, ordered by increasing coordinate along the face.
    Finer([CellId; 2]),
    Coarser(CellId),
}

impl Neighbor {
    pub fn is_hanging(&self) -> bool {
        matches!(self, Neighbor::Finer(_) | Neighbor::Coarser(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceNeighbor {
    pub face: usize,
    pub neighbor: Neighbor,
}

/// A face of a leaf cell together with its adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceRecord {
    pub cell: CellId,
    pub face: usize,
    pub neighbor: Neighbor,
}

/// Per-cell refinement decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Flag {
    #[default]
    Keep,
    RefineH,
    RaiseP,
}

/// Flags indexed by cell id; only leaf entries are meaningful.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RefinementFlags {
    flags: Vec<Flag>,
}

impl RefinementFlags {
    pub fn new(mesh: &SlitQuadMesh) -> Self {
        Self {
            flags: vec![Flag::Keep; mesh.cells.len()],
        }
    }

    pub fn set(&mut self, cell: CellId, flag: Flag) {
        self.flags[cell] = flag;
    }

    pub fn get(&self, cell: CellId) -> Flag {
        self.flags.get(cell).copied().unwrap_or(Flag::Keep)
    }

    pub fn count(&self, flag: Flag) -> usize {
        self.flags.iter().filter(|&&f| f == flag).count()
    }

    pub fn cells_with(&self, flag: Flag) -> impl Iterator<Item = CellId> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter(move |(_, &f)| f == flag)
            .map(|(c, _)| c)
    }

    /// Checks that every non-`Keep` flag sits on a leaf of `mesh`.
    pub fn validate(&self, mesh: &SlitQuadMesh) -> Result<(), MeshError> {
        for (c, f) in self.flags.iter().enumerate() {
            if *f != Flag::Keep && !mesh.cells.get(c).is_some_and(Cell::is_leaf) {
                return Err(MeshError::NotALeaf(c));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SlitQuadMesh {
    n0: usize,
    slit: bool,
    /// Lattice units per unit length.
    scale: i64,
    root_size: i64,
    pub vertices: Vec<Vertex>,
    vertex_lookup: HashMap<([i64; 2], SlitSide), VertexId>,
    pub cells: Vec<Cell>,
    leaves: Vec<CellId>,
    generation: u32,
    tip_vertex: Option<VertexId>,
}

impl SlitQuadMesh {
    /// `n0 x n0` grid with the crack slit from `(0.5, 0.5)` to `(1, 0.5)`.
    pub fn build_initial_mesh(n0: usize) -> Result<Self, MeshError> {
        if n0 < 2 || n0 % 2 == 1 {
            return Err(MeshError::SlitResolution(n0));
        }
        Ok(Self::build(n0, true))
    }

    /// `n0 x n0` grid without a slit.
    pub fn unit_square(n0: usize) -> Result<Self, MeshError> {
        if n0 == 0 {
            return Err(MeshError::Resolution(n0));
        }
        Ok(Self::build(n0, false))
    }

    fn build(n0: usize, slit: bool) -> Self {
        let root_size = 1i64 << MAX_LEVEL;
        let mut mesh = Self {
            n0,
            slit,
            scale: root_size * n0 as i64,
            root_size,
            vertices: Vec::new(),
            vertex_lookup: HashMap::new(),
            cells: Vec::with_capacity(n0 * n0),
            leaves: Vec::new(),
            generation: 0,
            tip_vertex: None,
        };
        for iy in 0..n0 {
            for ix in 0..n0 {
                let origin = [ix as i64 * root_size, iy as i64 * root_size];
                mesh.push_cell(origin, root_size, 0, None);
            }
        }
        if slit {
            let h = mesh.scale / 2;
            mesh.tip_vertex = mesh.vertex_lookup.get(&([h, h], SlitSide::None)).copied();
        }
        mesh.leaves = (0..mesh.cells.len()).collect();
        mesh
    }

    fn vertex_side(&self, pos: [i64; 2], cell_origin_y: i64) -> SlitSide {
        let h = self.scale / 2;
        if self.slit && pos[1] == h && pos[0] > h {
            if cell_origin_y >= h {
                SlitSide::Upper
            } else {
                SlitSide::Lower
            }
        } else {
            SlitSide::None
        }
    }

    fn vertex_at(&mut self, pos: [i64; 2], cell_origin_y: i64) -> VertexId {
        let side = self.vertex_side(pos, cell_origin_y);
        if let Some(&v) = self.vertex_lookup.get(&(pos, side)) {
            return v;
        }
        let id = self.vertices.len();
        self.vertices.push(Vertex { pos, side });
        self.vertex_lookup.insert((pos, side), id);
        id
    }

    fn push_cell(&mut self, origin: [i64; 2], size: i64, level: u32, parent: Option<CellId>) -> CellId {
        let corners = [
            [origin[0], origin[1]],
            [origin[0] + size, origin[1]],
            [origin[0], origin[1] + size],
            [origin[0] + size, origin[1] + size],
        ];
        let vertices = corners.map(|p| self.vertex_at(p, origin[1]));
        let id = self.cells.len();
        self.cells.push(Cell {
            level,
            origin,
            size,
            parent,
            children: None,
            vertices,
        });
        id
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn has_slit(&self) -> bool {
        self.slit
    }

    /// Number of `refine` calls that produced this mesh.
    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// Lattice units per unit length.
    pub fn lattice_scale(&self) -> i64 {
        self.scale
    }

    /// Active cells in ascending id order.
    pub fn leaves(&self) -> &[CellId] {
        &self.leaves
    }

    pub fn n_active_cells(&self) -> usize {
        self.leaves.len()
    }

    pub fn tip_vertex(&self) -> Option<VertexId> {
        self.tip_vertex
    }

    pub fn vertex_point(&self, v: VertexId) -> [f64; 2] {
        let p = self.vertices[v].pos;
        [p[0] as f64 / self.scale as f64, p[1] as f64 / self.scale as f64]
    }

    pub fn cell_rect(&self, c: CellId) -> Rect {
        let cell = &self.cells[c];
        let s = self.scale as f64;
        Rect {
            x0: cell.origin[0] as f64 / s,
            y0: cell.origin[1] as f64 / s,
            hx: cell.size as f64 / s,
            hy: cell.size as f64 / s,
        }
    }

    pub fn cell_diameter(&self, c: CellId) -> f64 {
        self.cell_rect(c).diameter()
    }

    pub fn min_cell_diameter(&self) -> f64 {
        self.leaves
            .iter()
            .map(|&c| self.cell_diameter(c))
            .fold(f64::INFINITY, f64::min)
    }

    /// Sum of active cell areas.
    pub fn total_area(&self) -> f64 {
        self.leaves.iter().map(|&c| self.cell_rect(c).area()).sum()
    }

    /// Active cells having the crack tip as a corner.
    pub fn tip_adjacent_cells(&self) -> Vec<CellId> {
        match self.tip_vertex {
            Some(t) => self
                .leaves
                .iter()
                .copied()
                .filter(|&c| self.cells[c].vertices.contains(&t))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Chain of ancestors of `c`, starting with `c` and ending at a level-0 cell.
    pub fn ancestry(&self, c: CellId) -> Vec<CellId> {
        let mut chain = vec![c];
        let mut cur = c;
        while let Some(p) = self.cells[cur].parent {
            chain.push(p);
            cur = p;
        }
        chain
    }

    fn root_at(&self, x: i64, y: i64) -> CellId {
        let n0 = self.n0 as i64;
        let ix = (x / self.root_size).clamp(0, n0 - 1);
        let iy = (y / self.root_size).clamp(0, n0 - 1);
        (iy * n0 + ix) as usize
    }

    /// Deepest cell with level `<= level` whose box contains the lattice box
    /// starting at `origin`.
    fn covering_cell(&self, origin: [i64; 2], level: u32) -> CellId {
        let mut cur = self.root_at(origin[0], origin[1]);
        while self.cells[cur].level < level {
            let Some(ch) = self.cells[cur].children else { break };
            let cell = &self.cells[cur];
            let half = cell.size / 2;
            let qx = usize::from(origin[0] >= cell.origin[0] + half);
            let qy = usize::from(origin[1] >= cell.origin[1] + half);
            cur = ch[qx + 2 * qy];
        }
        cur
    }

    fn boundary_tag(&self, c: CellId, face: usize) -> Option<BoundaryTag> {
        let cell = &self.cells[c];
        let [x, y] = cell.origin;
        let s = cell.size;
        let h = self.scale / 2;
        match face {
            FACE_X_MINUS if x == 0 => Some(BoundaryTag::Left),
            FACE_X_PLUS if x + s == self.scale => Some(BoundaryTag::Right),
            FACE_Y_MINUS if y == 0 => Some(BoundaryTag::Bottom),
            FACE_Y_PLUS if y + s == self.scale => Some(BoundaryTag::Top),
            FACE_Y_MINUS if self.slit && y == h && x >= h => Some(BoundaryTag::CrackUpper),
            FACE_Y_PLUS if self.slit && y + s == h && x >= h => Some(BoundaryTag::CrackLower),
            _ => None,
        }
    }

    fn neighbor_of(&self, c: CellId, face: usize) -> Neighbor {
        if let Some(tag) = self.boundary_tag(c, face) {
            return Neighbor::Boundary(tag);
        }
        let cell = &self.cells[c];
        let s = cell.size;
        let [x, y] = cell.origin;
        let origin = match face {
            FACE_X_MINUS => [x - s, y],
            FACE_X_PLUS => [x + s, y],
            FACE_Y_MINUS => [x, y - s],
            _ => [x, y + s],
        };
        let n = self.covering_cell(origin, cell.level);
        let other = &self.cells[n];
        if other.level < cell.level {
            return Neighbor::Coarser(n);
        }
        match other.children {
            None => Neighbor::Same(n),
            Some(ch) => {
                // the children of the neighbour touching the shared face
                let pair = match face {
                    FACE_X_MINUS => [ch[1], ch[3]],
                    FACE_X_PLUS => [ch[0], ch[2]],
                    FACE_Y_MINUS => [ch[2], ch[3]],
                    _ => [ch[0], ch[1]],
                };
                Neighbor::Finer(pair)
            }
        }
    }

    /// Adjacency of the four faces of an active cell.
    pub fn face_neighbors(&self, c: CellId) -> Result<[FaceNeighbor; 4], MeshError> {
        if !self.cells.get(c).is_some_and(Cell::is_leaf) {
            return Err(MeshError::NotALeaf(c));
        }
        Ok([0, 1, 2, 3].map(|face| FaceNeighbor {
            face,
            neighbor: self.neighbor_of(c, face),
        }))
    }

    /// Every face of every active cell.
    pub fn faces(&self) -> Vec<FaceRecord> {
        self.leaves
            .iter()
            .flat_map(|&cell| {
                (0..4).map(move |face| FaceRecord {
                    cell,
                    face,
                    neighbor: self.neighbor_of(cell, face),
                })
            })
            .collect()
    }

    /// Faces lying on either crack flank.
    pub fn slit_faces(&self) -> Vec<FaceRecord> {
        self.faces()
            .into_iter()
            .filter(|f| matches!(f.neighbor, Neighbor::Boundary(t) if t.is_crack()))
            .collect()
    }

    /// Largest refinement-level difference across any interior face.
    pub fn max_level_jump(&self) -> u32 {
        self.faces()
            .iter()
            .map(|f| {
                let l = self.cells[f.cell].level;
                match f.neighbor {
                    Neighbor::Boundary(_) => 0,
                    Neighbor::Same(n) | Neighbor::Coarser(n) => l.abs_diff(self.cells[n].level),
                    Neighbor::Finer(ns) => ns
                        .iter()
                        .map(|&n| {
                            let d = l.abs_diff(self.cells[n].level);
                            if self.cells[n].is_leaf() { d } else { d + 1 }
                        })
                        .max()
                        .unwrap_or(0),
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// Active cell containing `point`. Points on a shared face belong to the
    /// cell on the side of larger coordinate, except that points on the slit
    /// line with `below = true` go to the lower cell.
    pub fn locate(&self, point: [f64; 2], below: bool) -> Result<CellId, MeshError> {
        let [px, py] = point;
        if !(0.0..=1.0).contains(&px) || !(0.0..=1.0).contains(&py) {
            return Err(MeshError::OutsideDomain(px, py));
        }
        let n0 = self.n0 as f64;
        let ix = ((px * n0).floor() as i64).clamp(0, self.n0 as i64 - 1);
        let mut iy = ((py * n0).floor() as i64).clamp(0, self.n0 as i64 - 1);
        if below && py * n0 == (py * n0).floor() && iy > 0 && py < 1.0 {
            iy -= 1;
        }
        let mut cur = (iy * self.n0 as i64 + ix) as usize;
        while let Some(ch) = self.cells[cur].children {
            let r = self.cell_rect(cur);
            let [mx, my] = r.center();
            let qx = usize::from(px >= mx);
            let qy = usize::from(if below { py > my } else { py >= my });
            cur = ch[qx + 2 * qy];
        }
        Ok(cur)
    }

    /// Applies `RefineH` flags, closing the set so that neighbouring levels
    /// differ by at most one. `RaiseP` flags are ignored here.
    pub fn refine(&self, flags: &RefinementFlags) -> Result<SlitQuadMesh, MeshError> {
        flags.validate(self)?;
        let mut marked: BTreeSet<CellId> = flags.cells_with(Flag::RefineH).collect();
        let mut work: Vec<CellId> = marked.iter().copied().collect();
        while let Some(c) = work.pop() {
            for f in 0..4 {
                if let Neighbor::Coarser(n) = self.neighbor_of(c, f) {
                    if marked.insert(n) {
                        work.push(n);
                    }
                }
            }
        }
        let mut next = self.clone();
        for &c in &marked {
            let cell = &next.cells[c];
            if cell.level >= MAX_LEVEL {
                return Err(MeshError::MaxLevel(c));
            }
            let (origin, half, level) = (cell.origin, cell.size / 2, cell.level + 1);
            let mut ch = [0; 4];
            for (q, slot) in ch.iter_mut().enumerate() {
                let o = [
                    origin[0] + half * (q % 2) as i64,
                    origin[1] + half * (q / 2) as i64,
                ];
                *slot = next.push_cell(o, half, level, Some(c));
            }
            next.cells[c].children = Some(ch);
        }
        next.leaves = (0..next.cells.len()).filter(|&c| next.cells[c].is_leaf()).collect();
        next.generation = self.generation + 1;
        Ok(next)
    }

    /// Refines every active cell once.
    pub fn refine_uniform(&self) -> SlitQuadMesh {
        let mut flags = RefinementFlags::new(self);
        for &c in &self.leaves {
            flags.set(c, Flag::RefineH);
        }
        self.refine(&flags).expect("uniform refinement of leaves")
    }

    /// Plain-text listing of vertices, active cells and boundary faces.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        let side = |s: SlitSide| match s {
            SlitSide::None => "-",
            SlitSide::Upper => "upper",
            SlitSide::Lower => "lower",
        };
        let _ = writeln!(out, "mesh n0={} slit={} generation={}", self.n0, self.slit, self.generation);
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for (i, v) in self.vertices.iter().enumerate() {
            let [x, y] = self.vertex_point(i);
            let _ = writeln!(out, "{i} {x} {y} {}", side(v.side));
        }
        let _ = writeln!(out, "cells {}", self.leaves.len());
        for &c in &self.leaves {
            let cell = &self.cells[c];
            let r = self.cell_rect(c);
            let v = cell.vertices;
            let _ = writeln!(
                out,
                "{c} level={} x0={} y0={} h={} vertices={} {} {} {}",
                cell.level, r.x0, r.y0, r.hx, v[0], v[1], v[2], v[3]
            );
        }
        let boundary: Vec<_> = self
            .faces()
            .into_iter()
            .filter_map(|f| match f.neighbor {
                Neighbor::Boundary(t) => Some((f.cell, f.face, t)),
                _ => None,
            })
            .collect();
        let _ = writeln!(out, "boundary_faces {}", boundary.len());
        for (c, f, t) in boundary {
            let _ = writeln!(out, "{c} {f} {}", t.name());
        }
        out
    }
}
