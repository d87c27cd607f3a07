use std::fmt::Write as _;
use std::path::Path;

use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Serializes `v`, `vt` and `f v/vt` records; texture index equals vertex
/// index.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for p in &mesh.vertices {
        writeln!(s, "v {} {} {}", p[0], p[1], p[2]).unwrap();
    }
    for t in &mesh.uv {
        writeln!(s, "vt {} {}", t[0], t[1]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

pub fn read_obj(text: &str) -> Result<Mesh> {
    let mut mesh = Mesh { vertices: Vec::new(), faces: Vec::new(), uv: Vec::new() };
    let bad = |line: usize, msg: &str| Error::Invalid(format!("obj line {}: {msg}", line + 1));
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        match tag {
            "v" | "vt" => {
                let nums: Vec<f64> = rest
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| bad(i, "bad number")))
                    .collect::<Result<_>>()?;
                match (tag, nums.len()) {
                    ("v", 3) => mesh.vertices.push([nums[0], nums[1], nums[2]]),
                    ("vt", 2) => mesh.uv.push([nums[0], nums[1]]),
                    _ => return Err(bad(i, "wrong arity")),
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(bad(i, "only triangles are supported"));
                }
                let mut face = [0usize; 3];
                for (k, tok) in rest.iter().enumerate() {
                    let mut it = tok.split('/');
                    let v: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(i, "bad face index"))?;
                    if let Some(t) = it.next() {
                        let t: usize = t.parse().map_err(|_| bad(i, "bad texture index"))?;
                        if t != v {
                            return Err(bad(i, "texture index must equal vertex index"));
                        }
                    }
                    if v == 0 {
                        return Err(bad(i, "indices are 1-based"));
                    }
                    face[k] = v - 1;
                }
                mesh.faces.push(face);
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, write_obj(mesh)).map_err(|e| Error::io(path, e))
}
