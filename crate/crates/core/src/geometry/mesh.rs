use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Triangle mesh with per-vertex texture coordinates. Faces wind
/// counter-clockwise when seen from outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
}

impl Mesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_edges(&self) -> usize {
        let mut edges = HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.num_edges() as i64 + self.num_faces() as i64
    }

    /// Checks index bounds and face degeneracy.
    pub fn validate(&self) -> Result<()> {
        if self.uv.len() != self.vertices.len() {
            return Err(Error::Invalid(format!(
                "{} uv coordinates for {} vertices",
                self.uv.len(),
                self.vertices.len()
            )));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::Invalid(format!("face {i} indexes past {} vertices", self.vertices.len())));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Invalid(format!("face {i} repeats a vertex")));
            }
        }
        Ok(())
    }

    /// Vertex positions offset by `delta` (`V x 3`, row-major).
    pub fn displaced(&self, delta: &[f64]) -> Vec<[f64; 3]> {
        self.vertices
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + delta[3 * i], p[1] + delta[3 * i + 1], p[2] + delta[3 * i + 2]])
            .collect()
    }

    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Unit sphere built by repeated 4-way subdivision of an icosahedron.
///
/// Texture coordinates: `u` is the longitude `atan2(x, z) / 2pi` wrapped to
/// `[0, 1)`, `v = acos(y) / pi`. Vertices on the `u = 0` meridian take
/// `u = 1` when most of their incident faces lie on the `u > 0.5` side.
pub fn icosphere(subdivisions: u32) -> Result<Mesh> {
    if subdivisions > 3 {
        return Err(Error::Invalid(format!("icosphere subdivisions must be in 0..=3, got {subdivisions}")));
    }
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoints.entry(key).or_insert_with(|| {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    vertices.push(normalize([
                        (pa[0] + pb[0]) * 0.5,
                        (pa[1] + pb[1]) * 0.5,
                        (pa[2] + pb[2]) * 0.5,
                    ]));
                    vertices.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    let uv = sphere_uv(&vertices, &faces);
    Ok(Mesh { vertices, faces, uv })
}

fn sphere_uv(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<[f64; 2]> {
    let tau = std::f64::consts::TAU;
    let mut uv: Vec<[f64; 2]> = vertices
        .iter()
        .map(|p| {
            let u = (p[0].atan2(p[2]) / tau).rem_euclid(1.0);
            let v = p[1].clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            [u, v]
        })
        .collect();
    let on_seam: Vec<bool> = uv.iter().map(|t| t[0] < 1e-9).collect();
    for (k, _) in on_seam.iter().enumerate().filter(|(_, &s)| s) {
        let mut high = 0i32;
        for f in faces.iter().filter(|f| f.contains(&k)) {
            let others: Vec<f64> = f.iter().filter(|&&j| j != k && !on_seam[j]).map(|&j| uv[j][0]).collect();
            if others.is_empty() {
                continue;
            }
            let mean = others.iter().sum::<f64>() / others.len() as f64;
            high += if mean > 0.5 { 1 } else { -1 };
        }
        if high > 0 {
            uv[k][0] = 1.0;
        }
    }
    uv
}

/// Outward unit normal of every face.
pub fn face_normals(mesh: &Mesh) -> Result<Vec<[f64; 3]>> {
    mesh.faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            let n = cross(sub(b, a), sub(c, a));
            let len = dot(n, n).sqrt();
            if len < 1e-12 {
                return Err(Error::DegenerateFace(i));
            }
            Ok([n[0] / len, n[1] / len, n[2] / len])
        })
        .collect()
}
