//! Affine constraints on vector DOFs: interface interpolation plus Dirichlet data.

use std::collections::{BTreeMap, HashMap};

use crate::mesh::{BoundaryTag, Neighbor};

use super::{HpSpace, SpaceError, N_COMPONENTS};

/// Prescribed displacement components per boundary tag.
///
/// When a DOF lies on several tagged faces, the value from the tag that
/// comes first in [`BoundaryTag::ALL`] wins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirichletSpec {
    values: BTreeMap<BoundaryTag, [Option<f64>; 2]>,
}

impl DirichletSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, tag: BoundaryTag, values: [Option<f64>; 2]) -> Self {
        self.values.insert(tag, values);
        self
    }

    pub fn set(&mut self, tag: BoundaryTag, comp: usize, value: f64) {
        self.values.entry(tag).or_insert([None, None])[comp] = Some(value);
    }

    pub fn get(&self, tag: BoundaryTag) -> [Option<f64>; 2] {
        self.values.get(&tag).copied().unwrap_or([None, None])
    }

    /// Same spec with every value multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let values = self
            .values
            .iter()
            .map(|(&t, v)| (t, [v[0].map(|x| x * s), v[1].map(|x| x * s)]))
            .collect();
        Self { values }
    }
}

/// `dof = sum(w * u[master]) + inhomogeneity`, masters all free.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub dof: usize,
    pub entries: Vec<(usize, f64)>,
    pub inhomogeneity: f64,
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct ConstraintSet {
    n_dofs: usize,
    lines: Vec<Constraint>,
    line_of: Vec<usize>,
    free: Vec<usize>,
    free_of: Vec<usize>,
    log: Vec<String>,
}

impl ConstraintSet {
    /// Hanging-node and minimum-rule constraints plus Dirichlet data, closed
    /// so that no master is itself constrained.
    pub fn build(space: &HpSpace, dirichlet: &DirichletSpec) -> Result<Self, SpaceError> {
        let n = space.n_dofs();
        let mut raw: BTreeMap<usize, (Vec<(usize, f64)>, f64)> = BTreeMap::new();
        for (&s, entries) in space.scalar_constraints() {
            for comp in 0..N_COMPONENTS {
                let e = entries.iter().map(|&(m, w)| (N_COMPONENTS * m + comp, w)).collect();
                raw.insert(N_COMPONENTS * s + comp, (e, 0.0));
            }
        }

        let mut log = Vec::new();
        let mesh = space.mesh();
        let mut prescribed: BTreeMap<usize, (BoundaryTag, f64)> = BTreeMap::new();
        for &c in mesh.leaves() {
            let p = space.degree(c);
            for fnb in mesh.face_neighbors(c)? {
                let Neighbor::Boundary(tag) = fnb.neighbor else { continue };
                let vals = dirichlet.get(tag);
                if vals.iter().all(Option::is_none) {
                    continue;
                }
                for j in 0..=p {
                    for i in 0..=p {
                        let on_face = match fnb.face {
                            0 => i == 0,
                            1 => i == p,
                            2 => j == 0,
                            _ => j == p,
                        };
                        if !on_face {
                            continue;
                        }
                        let a = i + (p + 1) * j;
                        for (comp, v) in vals.iter().enumerate() {
                            let Some(v) = *v else { continue };
                            let dof = space.vector_dof(c, a, comp);
                            match prescribed.get(&dof) {
                                Some(&(t0, v0)) if t0 <= tag => {
                                    if t0 != tag && v0 != v {
                                        log.push(format!(
                                            "dirichlet_conflict dof={dof} kept={}:{v0} dropped={}:{v}",
                                            t0.name(),
                                            tag.name()
                                        ));
                                    }
                                }
                                Some(&(t0, v0)) => {
                                    if v0 != v {
                                        log.push(format!(
                                            "dirichlet_conflict dof={dof} kept={}:{v} dropped={}:{v0}",
                                            tag.name(),
                                            t0.name()
                                        ));
                                    }
                                    prescribed.insert(dof, (tag, v));
                                }
                                None => {
                                    prescribed.insert(dof, (tag, v));
                                }
                            }
                        }
                    }
                }
            }
        }
        for (&dof, &(_, v)) in &prescribed {
            raw.insert(dof, (Vec::new(), v));
        }
        for msg in &log {
            log::warn!("{msg}");
        }

        let mut closed: HashMap<usize, (Vec<(usize, f64)>, f64)> = HashMap::new();
        let keys: Vec<usize> = raw.keys().copied().collect();
        for dof in keys {
            close(dof, &raw, &mut closed, 0);
        }

        let mut lines: Vec<Constraint> = closed
            .into_iter()
            .map(|(dof, (entries, inhomogeneity))| Constraint { dof, entries, inhomogeneity })
            .collect();
        lines.sort_by_key(|l| l.dof);
        let mut line_of = vec![NONE; n];
        for (k, l) in lines.iter().enumerate() {
            line_of[l.dof] = k;
        }
        let mut free = Vec::with_capacity(n - lines.len());
        let mut free_of = vec![NONE; n];
        for d in 0..n {
            if line_of[d] == NONE {
                free_of[d] = free.len();
                free.push(d);
            }
        }
        Ok(Self { n_dofs: n, lines, line_of, free, free_of, log })
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn lines(&self) -> &[Constraint] {
        &self.lines
    }

    pub fn line(&self, dof: usize) -> Option<&Constraint> {
        self.line_of.get(dof).filter(|&&k| k != NONE).map(|&k| &self.lines[k])
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.line_of[dof] != NONE
    }

    /// Free DOFs in ascending order.
    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    /// Position of `dof` among the free DOFs.
    pub fn free_index(&self, dof: usize) -> Option<usize> {
        let k = self.free_of[dof];
        (k != NONE).then_some(k)
    }

    /// Messages about conflicting Dirichlet data.
    pub fn log(&self) -> &[String] {
        &self.log
    }

    /// Overwrites constrained entries from the free ones.
    pub fn distribute(&self, u: &mut [f64]) {
        for l in &self.lines {
            u[l.dof] = l.inhomogeneity + l.entries.iter().map(|&(m, w)| w * u[m]).sum::<f64>();
        }
    }

    /// As [`distribute`](Self::distribute) with all inhomogeneities set to zero.
    pub fn distribute_homogeneous(&self, u: &mut [f64]) {
        for l in &self.lines {
            u[l.dof] = l.entries.iter().map(|&(m, w)| w * u[m]).sum::<f64>();
        }
    }

    /// Expands a free-DOF vector into a full one.
    pub fn expand(&self, free_values: &[f64], homogeneous: bool) -> Vec<f64> {
        let mut u = vec![0.0; self.n_dofs];
        for (k, &d) in self.free.iter().enumerate() {
            u[d] = free_values[k];
        }
        if homogeneous {
            self.distribute_homogeneous(&mut u);
        } else {
            self.distribute(&mut u);
        }
        u
    }

    /// Free-DOF entries of a full vector.
    pub fn restrict(&self, u: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&d| u[d]).collect()
    }

    /// Largest violation of any constraint line by `u`.
    pub fn max_violation(&self, u: &[f64]) -> f64 {
        self.lines
            .iter()
            .map(|l| {
                let v = l.inhomogeneity + l.entries.iter().map(|&(m, w)| w * u[m]).sum::<f64>();
                (u[l.dof] - v).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn close(
    dof: usize,
    raw: &BTreeMap<usize, (Vec<(usize, f64)>, f64)>,
    closed: &mut HashMap<usize, (Vec<(usize, f64)>, f64)>,
    depth: usize,
) {
    if closed.contains_key(&dof) {
        return;
    }
    assert!(depth < 64, "cyclic constraint chain at dof {dof}");
    let (entries, inh) = &raw[&dof];
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total_inh = *inh;
    for &(m, w) in entries {
        if raw.contains_key(&m) {
            close(m, raw, closed, depth + 1);
            let (sub, sub_inh) = &closed[&m];
            total_inh += w * sub_inh;
            for &(mm, ww) in sub {
                *acc.entry(mm).or_insert(0.0) += w * ww;
            }
        } else {
            *acc.entry(m).or_insert(0.0) += w;
        }
    }
    let entries = acc.into_iter().filter(|(_, w)| w.abs() > 1e-14).collect();
    closed.insert(dof, (entries, total_inh));
}
