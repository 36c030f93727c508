//! Planar polygons for cross-sections and soil zones.

use serde::{Deserialize, Serialize};

/// Simple polygon given by its vertices in order (either orientation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edge `i` runs from vertex `i` to vertex `i + 1` (wrapping).
    pub fn edge(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let (a, b) = self.edge(i);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Even-odd point test; points on the boundary count as inside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let scale = {
            let (lo, hi) = self.bounding_box();
            (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0)
        };
        if self.distance_to_boundary(p).0 <= 1e-12 * scale {
            return true;
        }
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (self.vertices[i][0], self.vertices[i][1]);
            let (xj, yj) = (self.vertices[j][0], self.vertices[j][1]);
            if (yi > p[1]) != (yj > p[1]) {
                let x_cross = xj + (p[1] - yj) * (xi - xj) / (yi - yj);
                if p[0] < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Distance from `p` to the closest edge, and that edge's index.
    pub fn distance_to_boundary(&self, p: [f64; 2]) -> (f64, usize) {
        (0..self.vertices.len())
            .map(|i| {
                let (a, b) = self.edge(i);
                (segment_distance(p, a, b), i)
            })
            .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
    }

    /// True when no two non-adjacent edges touch and the area is positive.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 || self.area() <= 0.0 {
            return false;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a, b) = self.edge(i);
                let (c, d) = self.edge(j);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Clips against the half-plane `n·p <= offset` (Sutherland-Hodgman).
    pub fn clip_half_plane(&self, normal: [f64; 2], offset: f64) -> Polygon {
        let inside = |p: [f64; 2]| normal[0] * p[0] + normal[1] * p[1] <= offset + 1e-12;
        let n = self.vertices.len();
        let mut out = Vec::with_capacity(n + 2);
        for i in 0..n {
            let cur = self.vertices[i];
            let prev = self.vertices[(i + n - 1) % n];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let fp = normal[0] * prev[0] + normal[1] * prev[1] - offset;
                let fc = normal[0] * cur[0] + normal[1] * cur[1] - offset;
                let t = fp / (fp - fc);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if ci {
                out.push(cur);
            }
        }
        out.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        if out.len() > 1 {
            let (f, l) = (out[0], out[out.len() - 1]);
            if (f[0] - l[0]).abs() < 1e-12 && (f[1] - l[1]).abs() < 1e-12 {
                out.pop();
            }
        }
        Polygon::new(out)
    }

    /// Intersection with the axis-aligned box `[x0, x1] × [y0, y1]`.
    pub fn clip_box(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> Polygon {
        self.clip_half_plane([1.0, 0.0], x1)
            .clip_half_plane([-1.0, 0.0], -x0)
            .clip_half_plane([0.0, 1.0], y1)
            .clip_half_plane([0.0, -1.0], -y0)
    }

    /// Highest boundary crossing of the vertical line at `x`, if any.
    pub fn top_at(&self, x: f64) -> Option<f64> {
        let mut top: Option<f64> = None;
        for i in 0..self.vertices.len() {
            let (a, b) = self.edge(i);
            let (lo, hi) = if a[0] <= b[0] { (a, b) } else { (b, a) };
            if x < lo[0] || x > hi[0] {
                continue;
            }
            let y = if (hi[0] - lo[0]).abs() < 1e-15 {
                lo[1].max(hi[1])
            } else {
                lo[1] + (x - lo[0]) * (hi[1] - lo[1]) / (hi[0] - lo[0])
            };
            top = Some(top.map_or(y, |t: f64| t.max(y)));
        }
        top
    }
}

pub fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    (dx * dx + dy * dy).sqrt()
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    };
    (d1 == 0.0 && on(c, d, a))
        || (d2 == 0.0 && on(c, d, b))
        || (d3 == 0.0 && on(a, b, c))
        || (d4 == 0.0 && on(a, b, d))
}
