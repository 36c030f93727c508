//! Pressure snapshots as legacy VTK structured points (ASCII).

use std::fmt::Write as _;

use super::mesh::Mesh;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub nx: usize,
    pub ny: usize,
    /// Centre of the first cell.
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    /// Row-major over x then y (x fastest), zero for inactive cells.
    pub pressure: Vec<f64>,
    pub active: Vec<bool>,
}

impl Snapshot {
    pub fn from_cells(mesh: &Mesh, p: &[f64], t: f64) -> Self {
        let mut pressure = vec![0.0; mesh.nx * mesh.ny];
        let mut active = vec![false; mesh.nx * mesh.ny];
        for (c, v) in mesh.cells.iter().zip(p) {
            pressure[c.j * mesh.nx + c.i] = *v;
            active[c.j * mesh.nx + c.i] = true;
        }
        Self {
            t,
            nx: mesh.nx,
            ny: mesh.ny,
            origin: [mesh.x0 + 0.5 * mesh.dx, mesh.y0 + 0.5 * mesh.dy],
            spacing: [mesh.dx, mesh.dy],
            pressure,
            active,
        }
    }

    pub fn value_at(&self, i: usize, j: usize) -> Option<f64> {
        let k = j * self.nx + i;
        (i < self.nx && j < self.ny && self.active[k]).then(|| self.pressure[k])
    }
}

pub fn write_vtk(s: &Snapshot) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "pore pressure t={:?}", s.t);
    let _ = writeln!(out, "ASCII\nDATASET STRUCTURED_POINTS");
    let _ = writeln!(out, "DIMENSIONS {} {} 1", s.nx, s.ny);
    let _ = writeln!(out, "ORIGIN {:?} {:?} 0", s.origin[0], s.origin[1]);
    let _ = writeln!(out, "SPACING {:?} {:?} 1", s.spacing[0], s.spacing[1]);
    let _ = writeln!(out, "POINT_DATA {}", s.nx * s.ny);
    let _ = writeln!(out, "SCALARS pressure double 1\nLOOKUP_TABLE default");
    for v in &s.pressure {
        let _ = writeln!(out, "{v:?}");
    }
    let _ = writeln!(out, "SCALARS active int 1\nLOOKUP_TABLE default");
    for a in &s.active {
        let _ = writeln!(out, "{}", u8::from(*a));
    }
    out
}

pub fn read_vtk(text: &str) -> Result<Snapshot, String> {
    let mut lines = text.lines();
    let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
    if !next("header")?.starts_with("# vtk") {
        return Err("not a legacy VTK file".into());
    }
    let title = next("title")?;
    let t = title
        .rsplit_once("t=")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or("title has no time")?;
    next("format")?;
    next("dataset")?;
    let nums = |line: &str, key: &str| -> Result<Vec<f64>, String> {
        let rest = line.strip_prefix(key).ok_or_else(|| format!("expected {key}"))?;
        rest.split_whitespace().map(|w| w.parse::<f64>().map_err(|e| e.to_string())).collect()
    };
    let dims = nums(next("dimensions")?, "DIMENSIONS")?;
    let origin = nums(next("origin")?, "ORIGIN")?;
    let spacing = nums(next("spacing")?, "SPACING")?;
    if dims.len() < 2 || origin.len() < 2 || spacing.len() < 2 {
        return Err("bad grid header".into());
    }
    let (nx, ny) = (dims[0] as usize, dims[1] as usize);
    let n = nx * ny;
    next("point data")?;
    next("pressure scalars")?;
    next("lookup table")?;
    let mut pressure = Vec::with_capacity(n);
    for _ in 0..n {
        pressure.push(next("pressure value")?.trim().parse::<f64>().map_err(|e| e.to_string())?);
    }
    next("active scalars")?;
    next("lookup table")?;
    let mut active = Vec::with_capacity(n);
    for _ in 0..n {
        active.push(next("active flag")?.trim() == "1");
    }
    Ok(Snapshot { t, nx, ny, origin: [origin[0], origin[1]], spacing: [spacing[0], spacing[1]], pressure, active })
}
