use super::camera::{project_points, CameraMatrices};
use super::mesh::{face_normals, Mesh};
use crate::error::Result;

/// Per-vertex visibility by hard depth test.
///
/// A vertex is visible when it belongs to a front-facing face and no face
/// covering its projected position is nearer than the vertex by more than
/// `1e-3 * d`. Depth at the projected position is interpolated
/// perspective-correctly (`1/z` linear in screen space).
pub fn visibility(mesh: &Mesh, cam: &CameraMatrices) -> Result<Vec<bool>> {
    let proj = project_points(&mesh.vertices, cam)?;
    let normals = face_normals(mesh)?;
    let distance = (cam.eye[0].powi(2) + cam.eye[1].powi(2) + cam.eye[2].powi(2)).sqrt();
    let tol = 1e-3 * distance;

    let mut has_front_face = vec![false; mesh.num_vertices()];
    for (f, n) in mesh.faces.iter().zip(&normals) {
        let p = mesh.vertices[f[0]];
        let to_eye = [cam.eye[0] - p[0], cam.eye[1] - p[1], cam.eye[2] - p[2]];
        if n[0] * to_eye[0] + n[1] * to_eye[1] + n[2] * to_eye[2] > 0.0 {
            for &k in f {
                has_front_face[k] = true;
            }
        }
    }

    Ok((0..mesh.num_vertices())
        .map(|k| {
            if !has_front_face[k] {
                return false;
            }
            let (px, py, zk) = (proj[k].x, proj[k].y, proj[k].depth);
            let nearest = mesh
                .faces
                .iter()
                .filter_map(|f| {
                    let (a, b, c) = (proj[f[0]], proj[f[1]], proj[f[2]]);
                    let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                    if area.abs() < 1e-12 {
                        return None;
                    }
                    let w0 = ((b.x - px) * (c.y - py) - (b.y - py) * (c.x - px)) / area;
                    let w1 = ((c.x - px) * (a.y - py) - (c.y - py) * (a.x - px)) / area;
                    let w2 = 1.0 - w0 - w1;
                    if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                        return None;
                    }
                    Some(1.0 / (w0 / a.depth + w1 / b.depth + w2 / c.depth))
                })
                .fold(f64::INFINITY, f64::min);
            zk <= nearest + tol
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_matrices, icosphere, CameraRaw};

    #[test]
    fn lone_front_triangle_fully_visible() {
        let mesh = Mesh {
            vertices: vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.5, 0.0]],
            faces: vec![[0, 1, 2]],
            uv: vec![[0.0; 2]; 3],
        };
        let cam = camera_matrices(&CameraRaw::from_angles(0.0, 0.0, 3.0), 32, 32, 60.0).unwrap();
        assert_eq!(visibility(&mesh, &cam).unwrap(), vec![true; 3]);
        let back = camera_matrices(&CameraRaw::from_angles(180.0, 0.0, 3.0), 32, 32, 60.0).unwrap();
        assert_eq!(visibility(&mesh, &back).unwrap(), vec![false; 3]);
    }

    #[test]
    fn sphere_front_hemisphere_visible() {
        let mesh = icosphere(2).unwrap();
        let cam = camera_matrices(&CameraRaw::from_angles(0.0, 0.0, 50.0), 64, 64, 10.0).unwrap();
        let vis = visibility(&mesh, &cam).unwrap();
        for (p, v) in mesh.vertices.iter().zip(&vis) {
            if p[2] > 0.0 {
                assert!(v, "{p:?} should be visible");
            }
            if p[2] < -0.1 {
                assert!(!v, "{p:?} should be hidden");
            }
        }
    }
}
