//! ASCII VTK unstructured-grid output.
//!
//! Each cell of degree `p` is split into `p x p` linear sub-quads on an
//! equispaced grid, so points are duplicated along cell faces and the
//! displacement jump across the slit stays visible.

use std::io::{self, Write};

use crate::fespace::FeFunction;

const VTK_QUAD: u8 = 9;

pub fn write_vtu<W: Write>(w: &mut W, u: &FeFunction, eta: &[f64]) -> io::Result<()> {
    let space = u.space();
    let mesh = space.mesh();
    let leaves = mesh.leaves();
    let mut points = Vec::new();
    let mut disp = Vec::new();
    let mut conn = Vec::new();
    let mut cell_deg = Vec::new();
    let mut cell_eta = Vec::new();
    for &c in leaves {
        let p = space.degree(c);
        let rect = mesh.cell_rect(c);
        let base = points.len();
        for j in 0..=p {
            for i in 0..=p {
                let r = [-1.0 + 2.0 * i as f64 / p as f64, -1.0 + 2.0 * j as f64 / p as f64];
                points.push(rect.to_physical(r));
                disp.push(u.evaluate_in_cell(c, r));
            }
        }
        let id = |i: usize, j: usize| base + i + (p + 1) * j;
        for j in 0..p {
            for i in 0..p {
                conn.push([id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
                cell_deg.push(p);
                cell_eta.push(eta.get(c).copied().unwrap_or(0.0));
            }
        }
    }
    writeln!(w, "<?xml version=\"1.0\"?>")?;
    writeln!(w, "<VTKFile type=\"UnstructuredGrid\" version=\"0.1\" byte_order=\"LittleEndian\">")?;
    writeln!(w, "<UnstructuredGrid>")?;
    writeln!(w, "<Piece NumberOfPoints=\"{}\" NumberOfCells=\"{}\">", points.len(), conn.len())?;
    writeln!(w, "<Points>")?;
    writeln!(w, "<DataArray type=\"Float64\" NumberOfComponents=\"3\" format=\"ascii\">")?;
    for x in &points {
        writeln!(w, "{:e} {:e} 0", x[0], x[1])?;
    }
    writeln!(w, "</DataArray>\n</Points>")?;
    writeln!(w, "<Cells>")?;
    writeln!(w, "<DataArray type=\"Int64\" Name=\"connectivity\" format=\"ascii\">")?;
    for q in &conn {
        writeln!(w, "{} {} {} {}", q[0], q[1], q[2], q[3])?;
    }
    writeln!(w, "</DataArray>")?;
    writeln!(w, "<DataArray type=\"Int64\" Name=\"offsets\" format=\"ascii\">")?;
    for k in 1..=conn.len() {
        writeln!(w, "{}", 4 * k)?;
    }
    writeln!(w, "</DataArray>")?;
    writeln!(w, "<DataArray type=\"UInt8\" Name=\"types\" format=\"ascii\">")?;
    for _ in &conn {
        writeln!(w, "{VTK_QUAD}")?;
    }
    writeln!(w, "</DataArray>\n</Cells>")?;
    writeln!(w, "<PointData Vectors=\"displacement\">")?;
    writeln!(w, "<DataArray type=\"Float64\" Name=\"displacement\" NumberOfComponents=\"3\" format=\"ascii\">")?;
    for d in &disp {
        writeln!(w, "{:e} {:e} 0", d[0], d[1])?;
    }
    writeln!(w, "</DataArray>\n</PointData>")?;
    writeln!(w, "<CellData Scalars=\"degree\">")?;
    writeln!(w, "<DataArray type=\"Int32\" Name=\"degree\" format=\"ascii\">")?;
    for p in &cell_deg {
        writeln!(w, "{p}")?;
    }
    writeln!(w, "</DataArray>")?;
    writeln!(w, "<DataArray type=\"Float64\" Name=\"eta\" format=\"ascii\">")?;
    for e in &cell_eta {
        writeln!(w, "{e:e}")?;
    }
    writeln!(w, "</DataArray>\n</CellData>")?;
    writeln!(w, "</Piece>\n</UnstructuredGrid>\n</VTKFile>")?;
    Ok(())
}
