//! Structured cell-centred grid clipped to the cross-section.

use crate::model::{BoundaryKind, DikeModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dx: f64,
    pub dy: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { dx: 1.0, dy: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceDir {
    X,
    Y,
}

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub zone: usize,
    /// Area of the cell inside the outline, up to a cell and a half per axis
    /// beside wall faces.
    pub vol: f64,
}

/// Part of a face: a share `w` of its length whose flow path runs through
/// zone `za` for the fraction `t` and through `zb` for the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub w: f64,
    pub za: usize,
    pub zb: usize,
    pub t: f64,
}

impl Piece {
    fn uniform(z: usize) -> Self {
        Self { w: 1.0, za: z, zb: z, t: 1.0 }
    }

    /// Series mobility along the path.
    pub fn mobility(&self, la: f64, lb: f64) -> f64 {
        if self.za == self.zb {
            return la;
        }
        if la > 0.0 && lb > 0.0 {
            1.0 / (self.t / la + (1.0 - self.t) / lb)
        } else {
            0.0
        }
    }
}

/// Face between cells `a` (left or below) and `b`.
#[derive(Debug, Clone, Copy)]
pub struct InteriorFace {
    pub a: usize,
    pub b: usize,
    pub dir: FaceDir,
    /// Face length over centre distance.
    pub trans: f64,
    /// Range into [`Mesh::pieces`].
    pub pieces: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryFace {
    pub cell: usize,
    pub x: f64,
    pub y: f64,
    pub dir: FaceDir,
    pub kind: BoundaryKind,
    /// Polygon edge the face was tagged from.
    pub edge: usize,
    /// Face length over the centre-to-face distance.
    pub trans: f64,
    pub pieces: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub x0: f64,
    pub y0: f64,
    /// Active-cell index for grid position `i * ny + j`.
    pub grid: Vec<Option<usize>>,
    pub cells: Vec<Cell>,
    pub interior: Vec<InteriorFace>,
    pub boundary: Vec<BoundaryFace>,
    pub pieces: Vec<Piece>,
    /// Largest index distance between coupled cells.
    pub bandwidth: usize,
    pub warnings: Vec<String>,
}

impl Mesh {
    /// Cells whose centre lies inside the polygon, on a grid anchored at the
    /// lower-left corner of the bounding box with the requested spacing.
    /// Zone interfaces and Dirichlet distances use the actual crossing point
    /// between centres, so results vary continuously with the geometry.
    pub fn build(model: &DikeModel, spec: GridSpec) -> Result<Self, String> {
        if !(spec.dx > 0.0 && spec.dy > 0.0) {
            return Err("grid spacing must be positive".into());
        }
        let (lo, hi) = model.polygon.bounding_box();
        let (dx, dy) = (spec.dx, spec.dy);
        let nx = (((hi[0] - lo[0]) / dx - 1e-9).ceil() as usize).max(1);
        let ny = (((hi[1] - lo[1]) / dy - 1e-9).ceil() as usize).max(1);
        let mut grid = vec![None; nx * ny];
        let mut cells = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                let x = lo[0] + (i as f64 + 0.5) * dx;
                let y = lo[1] + (j as f64 + 0.5) * dy;
                if model.polygon.contains([x, y]) {
                    grid[i * ny + j] = Some(cells.len());
                    cells.push(Cell { i, j, x, y, zone: model.zone_at([x, y]), vol: dx * dy });
                }
            }
        }
        if cells.is_empty() {
            return Err("no grid cell centre lies inside the cross-section".into());
        }
        let at = |i: isize, j: isize| -> Option<usize> {
            if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                None
            } else {
                grid[i as usize * ny + j as usize]
            }
        };
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut bandwidth = 0;
        let mut pieces = Vec::new();
        // extent towards -x, +x, -y, +y in cell widths
        let mut reach = vec![[0.5; 4]; cells.len()];
        for (k, c) in cells.iter().enumerate() {
            let (i, j) = (c.i as isize, c.j as isize);
            for (di, dj, dir) in [(1, 0, FaceDir::X), (0, 1, FaceDir::Y), (-1, 0, FaceDir::X), (0, -1, FaceDir::Y)] {
                let trans = match dir {
                    FaceDir::X => dy / dx,
                    FaceDir::Y => dx / dy,
                };
                let step = [di as f64 * dx, dj as f64 * dy];
                let face_len = if di != 0 { dy } else { dx };
                let towards = |t: f64| [c.x + t * step[0], c.y + t * step[1]];
                match at(i + di, j + dj) {
                    Some(nb) => {
                        if di + dj > 0 {
                            let start = pieces.len();
                            if cells[nb].zone == c.zone && zone_uniform(model, [c.x, c.y], step, dx, dy, c.zone) {
                                pieces.push(Piece::uniform(c.zone));
                            } else {
                                face_pieces(model, [c.x, c.y], step, face_len, &mut pieces);
                            }
                            interior.push(InteriorFace { a: k, b: nb, dir, trans, pieces: (start, pieces.len()) });
                            bandwidth = bandwidth.max(nb.abs_diff(k));
                        }
                    }
                    None => {
                        // the face sits where the line to the missing neighbour
                        // leaves the outline
                        let h = crossing(|t| model.polygon.contains(towards(t))).clamp(1e-3, 1.0);
                        let [fx, fy] = towards(h);

                        let start = pieces.len();
                        let to_face = [h * step[0], h * step[1]];
                        if zone_uniform(model, [c.x, c.y], to_face, dx, dy, c.zone) {
                            pieces.push(Piece::uniform(c.zone));
                        } else {
                            face_pieces(model, [c.x, c.y], to_face, face_len, &mut pieces);
                        }
                        let edge = model.polygon.distance_to_boundary([fx, fy]).1;
                        // material past half a cell beside a sea or land face
                        // sits near the boundary pressure, so it is not counted
                        let side = ((di + dj + 1) / 2 + if dj != 0 { 2 } else { 0 }) as usize;
                        reach[k][side] = if model.boundaries[edge] == BoundaryKind::Wall { h } else { h.min(0.5) };
                        boundary.push(BoundaryFace {
                            cell: k,
                            x: fx,
                            y: fy,
                            dir,
                            kind: model.boundaries[edge],
                            edge,
                            trans: trans / h,
                            pieces: (start, pieces.len()),
                        });
                    }
                }
            }
        }
        for (c, r) in cells.iter_mut().zip(&reach) {
            c.vol = dx * dy * (r[0] + r[1]) * (r[2] + r[3]);
        }
        // faces of cut cells are as wide as the material beside them
        let width = |k: usize, dir: FaceDir| match dir {
            FaceDir::X => reach[k][2] + reach[k][3],
            FaceDir::Y => reach[k][0] + reach[k][1],
        };
        for f in &mut interior {
            f.trans *= 0.5 * (width(f.a, f.dir) + width(f.b, f.dir));
        }
        for f in &mut boundary {
            f.trans *= width(f.cell, f.dir);
        }
        let mut warnings = Vec::new();
        for z in 0..model.zones.len() {
            let mut is = std::collections::BTreeSet::new();
            let mut js = std::collections::BTreeSet::new();
            for c in cells.iter().filter(|c| c.zone == z) {
                is.insert(c.i);
                js.insert(c.j);
            }
            if is.len() < 3 || js.len() < 3 {
                warnings.push(format!("mesh too coarse: zone {z} spans {}x{} cells", is.len(), js.len()));
            }
        }
        Ok(Self { nx, ny, dx, dy, x0: lo[0], y0: lo[1], grid, cells, interior, boundary, pieces, bandwidth, warnings })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_at(&self, i: usize, j: usize) -> Option<usize> {
        if i < self.nx && j < self.ny {
            self.grid[i * self.ny + j]
        } else {
            None
        }
    }

    /// Bilinear weights over the surrounding cell centres; inactive corners
    /// are dropped and the rest renormalized, with the nearest active cell as
    /// the last resort.
    pub fn probe_weights(&self, x: f64, y: f64) -> Vec<(usize, f64)> {
        let fx = (x - self.x0) / self.dx - 0.5;
        let fy = (y - self.y0) / self.dy - 0.5;
        let (i0, j0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - i0, fy - j0);
        let mut out = Vec::with_capacity(4);
        let mut total = 0.0;
        for (di, dj, w) in [
            (0, 0, (1.0 - tx) * (1.0 - ty)),
            (1, 0, tx * (1.0 - ty)),
            (0, 1, (1.0 - tx) * ty),
            (1, 1, tx * ty),
        ] {
            let (i, j) = (i0 as isize + di, j0 as isize + dj);
            if i < 0 || j < 0 || w <= 0.0 {
                continue;
            }
            if let Some(k) = self.cell_at(i as usize, j as usize) {
                out.push((k, w));
                total += w;
            }
        }
        if total > 1e-12 {
            out.iter_mut().for_each(|(_, w)| *w /= total);
            return out;
        }
        let nearest = self
            .cells
            .iter()
            .enumerate()
            .map(|(k, c)| ((c.x - x).powi(2) + (c.y - y).powi(2), k))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
            .1;
        vec![(nearest, 1.0)]
    }
}

/// True when the face swept by the path `from -> from + path` lies in one
/// zone, judged at its corners and centre.
fn zone_uniform(model: &DikeModel, from: [f64; 2], path: [f64; 2], dx: f64, dy: f64, zone: usize) -> bool {
    let half = if path[0] != 0.0 { [0.0, 0.5 * dy] } else { [0.5 * dx, 0.0] };
    [-1.0, 0.0, 1.0].iter().all(|&s| {
        [0.0, 1.0].iter().all(|&t| {
            let p = [from[0] + t * path[0] + s * half[0], from[1] + t * path[1] + s * half[1]];
            model.zone_at(p) == zone
        })
    })
}

/// Splits a face into pieces with a fixed zone pattern along the flow path,
/// using the lateral positions where the zone at either path end changes,
/// and two Gauss points per piece.
fn face_pieces(model: &DikeModel, from: [f64; 2], path: [f64; 2], len: f64, out: &mut Vec<Piece>) {
    let lateral = if path[0] != 0.0 { [0.0, 1.0] } else { [1.0, 0.0] };
    let half = 0.5 * len;
    let at = |s: f64, t: f64| [from[0] + t * path[0] + s * lateral[0], from[1] + t * path[1] + s * lateral[1]];
    let pattern = |s: f64| (model.zone_at(at(s, 0.0)), model.zone_at(at(s, 1.0)));
    const N: usize = 8;
    let mut cuts = vec![-half];
    for k in 0..N {
        let (s0, s1) = (-half + 2.0 * half * k as f64 / N as f64, -half + 2.0 * half * (k + 1) as f64 / N as f64);
        let p0 = pattern(s0);
        if pattern(s1) != p0 {
            let f = crossing(|u| pattern(s0 + u * (s1 - s0)) == p0);
            cuts.push(s0 + f * (s1 - s0));
        }
    }
    cuts.push(half);
    let g = 0.5 / 3f64.sqrt();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 0.0 {
            continue;
        }
        for u in [0.5 - g, 0.5 + g] {
            let s = a + u * (b - a);
            let za = model.zone_at(at(s, 0.0));
            let zb = model.zone_at(at(s, 1.0));
            let t = if za == zb { 1.0 } else { crossing(|t| model.zone_at(at(s, t)) == za) };
            out.push(Piece { w: 0.5 * (b - a) / (2.0 * half), za, zb, t });
        }
    }
}

/// Where `inside` turns false along [0, 1], given it holds at 0.
fn crossing(inside: impl Fn(f64) -> bool) -> f64 {
    if inside(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if inside(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
