//! Triangle meshes: OBJ parsing, unit normalization and ray-parity
//! inside/outside classification.

use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Offset applied to ray origins when a cast hits an edge, a vertex or a
/// grazing triangle.
pub const PARITY_PERTURBATION: f64 = 1e-7;
pub const PARITY_RETRIES: usize = 3;
/// Barycentric and parallelism tolerance below which a hit counts as
/// degenerate.
const DEGENERATE_EPS: f64 = 1e-9;

/// Fixed, mutually non-aligned ray directions for the parity vote.
const PARITY_DIRECTIONS: [Vec3; 3] = [
    [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
    [-0.267_261_241_912_424_4, 0.534_522_483_824_848_8, 0.801_783_725_737_273_2],
    [0.872_871_560_943_969_6, -0.218_217_890_235_992_4, 0.436_435_780_471_984_8],
];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Maps raw coordinates into the normalized frame: `p' = (p − offset)·scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub offset: Vec3,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normalization: Normalization,
}

/// Parses `v` and `f` records; other records are ignored. Faces with more
/// than three corners are fan-triangulated. Indices may be negative
/// (relative) and carry `/vt/vn` suffixes.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let err = |line: usize, msg: String| Error::parse("OBJ", format!("line {}: {msg}", line + 1));
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    let tok = parts.next().ok_or_else(|| err(ln, "vertex needs three coordinates".into()))?;
                    *c = tok.parse::<f64>().map_err(|e| err(ln, format!("bad coordinate `{tok}`: {e}")))?;
                    if !c.is_finite() {
                        return Err(err(ln, "non-finite coordinate".into()));
                    }
                }
                vertices.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in parts {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|e| err(ln, format!("bad index `{tok}`: {e}")))?;
                    let n = vertices.len() as i64;
                    let resolved = if i > 0 { i - 1 } else { n + i };
                    if i == 0 || resolved < 0 || resolved >= n {
                        return Err(err(ln, format!("vertex index {i} out of range ({n} vertices)")));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(err(ln, "face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if triangles.is_empty() {
        return Err(Error::parse("OBJ", "no faces"));
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        normalization: Normalization {
            offset: [0.0; 3],
            scale: 1.0,
        },
    })
}

impl TriangleMesh {
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// Translates the minimum corner to the origin and scales the longest
    /// axis to length 1.
    pub fn normalized(mut self) -> Result<Self> {
        let (lo, hi) = self.bounds();
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::parse("OBJ", "mesh has zero extent"));
        }
        let scale = 1.0 / extent;
        for v in &mut self.vertices {
            for a in 0..3 {
                v[a] = ((v[a] - lo[a]) * scale).clamp(0.0, 1.0);
            }
        }
        self.normalization = Normalization { offset: lo, scale };
        Ok(self)
    }

    /// Edges shared by an odd number of triangles; zero for closed surfaces.
    pub fn boundary_edge_count(&self) -> usize {
        let mut edges = std::collections::HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        edges.values().filter(|&&c| c % 2 == 1).count()
    }

    fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Counts forward crossings of the ray `origin + t·dir`, `t > 0`;
    /// `None` when a hit is degenerate.
    fn crossings(&self, origin: Vec3, dir: Vec3) -> Option<usize> {
        let mut count = 0;
        for t in 0..self.triangles.len() {
            let [v0, v1, v2] = self.triangle(t);
            let e1 = sub(v1, v0);
            let e2 = sub(v2, v0);
            let p = cross(dir, e2);
            let det = dot(e1, p);
            let scale = dot(e1, e1).max(dot(e2, e2));
            let s = sub(origin, v0);
            if det.abs() <= DEGENERATE_EPS * scale {
                // Parallel to the plane: only coplanar rays can touch it.
                let n = cross(e1, e2);
                if dot(s, n).abs() <= DEGENERATE_EPS * scale {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / det;
            let u = dot(s, p) * inv;
            if u < -DEGENERATE_EPS || u > 1.0 + DEGENERATE_EPS {
                continue;
            }
            let q = cross(s, e1);
            let v = dot(dir, q) * inv;
            if v < -DEGENERATE_EPS || u + v > 1.0 + DEGENERATE_EPS {
                continue;
            }
            let dist = dot(e2, q) * inv;
            if dist < -DEGENERATE_EPS {
                continue;
            }
            let w = 1.0 - u - v;
            if u.abs() <= DEGENERATE_EPS || v.abs() <= DEGENERATE_EPS || w.abs() <= DEGENERATE_EPS || dist.abs() <= DEGENERATE_EPS {
                return None;
            }
            count += 1;
        }
        Some(count)
    }

    /// Parity of crossings along one direction, recast from perturbed
    /// origins on degenerate hits.
    fn parity_vote(&self, p: Vec3, dir_index: usize) -> bool {
        let dir = PARITY_DIRECTIONS[dir_index];
        let mut origin = p;
        for attempt in 0..=PARITY_RETRIES {
            if let Some(c) = self.crossings(origin, dir) {
                return c % 2 == 1;
            }
            let jitter = PARITY_DIRECTIONS[(dir_index + attempt + 1) % 3];
            for a in 0..3 {
                origin[a] += PARITY_PERTURBATION * jitter[(a + attempt) % 3];
            }
        }
        self.crossings(origin, dir).unwrap_or(0) % 2 == 1
    }

    /// Majority over three ray directions of the odd-crossings rule.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).filter(|&d| self.parity_vote(p, d)).count() >= 2
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)?.normalized()
}
