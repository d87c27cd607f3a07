//! Z-buffered hard rasterizer. Shares conventions with the soft renderer
//! (pixel centers, device coordinates, flat SH shading, bilinear texture)
//! and serves as its zero-temperature reference.

use super::{sh::shade_sh, RenderedFrame, Renderer, Scene};
use crate::error::{Error, Result};
use crate::geometry::CameraBasis;

fn bilinear(tex: &crate::tensor::Tensor<f64>, u: f64, v: f64) -> [f64; 3] {
    let (th, tw) = (tex.shape[0], tex.shape[1]);
    let x = (u * (tw - 1) as f64).clamp(0.0, (tw - 1) as f64);
    let y = (v * (th - 1) as f64).clamp(0.0, (th - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(tw - 1), (y0 + 1).min(th - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize, c: usize| tex.data[(yy * tw + xx) * 3 + c];
    std::array::from_fn(|c| {
        let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
        let bot = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Renders `scene` with binary coverage: each pixel center takes the
/// nearest face containing it.
pub fn hard_render(r: &Renderer, scene: &Scene) -> Result<RenderedFrame> {
    let cfg = &r.cfg;
    let (h, w) = (cfg.height, cfg.width);
    let basis = CameraBasis::new(&scene.camera);
    let k = 1.0 / (cfg.fov_deg.to_radians() * 0.5).tan();
    let ky = k * w as f64 / h as f64;
    let near = scene.camera[3] * 0.01;
    let mut cam = Vec::with_capacity(scene.vertices.len());
    for (i, &p) in scene.vertices.iter().enumerate() {
        let (x, y, z) = basis.to_camera(p);
        if z <= near {
            return Err(Error::NearPlane { index: i, depth: z, near });
        }
        cam.push([k * x / z, ky * y / z, z]);
    }
    let n = h * w;
    let mut zbuf = vec![f64::INFINITY; n];
    let mut image = vec![0.0; 3 * n];
    let mut mask = vec![0.0; n];
    for f in r.faces() {
        let q = f.map(|i| cam[i]);
        let area = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[1][1] - q[0][1]) * (q[2][0] - q[0][0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let p = f.map(|i| scene.vertices[i]);
        let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
        let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
        let m = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        let nw = if len > 1e-12 { m.map(|c| c / len) } else { [0.0; 3] };
        let d3 = |a: [f64; 3]| a[0] * nw[0] + a[1] * nw[1] + a[2] * nw[2];
        let shade = shade_sh([d3(basis.u), d3(basis.v), d3(basis.w)], &scene.light);
        for j in 0..h {
            let py = 1.0 - 2.0 * (j as f64 + 0.5) / h as f64;
            for i in 0..w {
                let px = 2.0 * (i as f64 + 0.5) / w as f64 - 1.0;
                let ef = |a: [f64; 3], b: [f64; 3]| (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
                let b = [ef(q[1], q[2]) / area, ef(q[2], q[0]) / area, ef(q[0], q[1]) / area];
                if b.iter().any(|&x| x < 0.0) {
                    continue;
                }
                let z = b[0] * q[0][2] + b[1] * q[1][2] + b[2] * q[2][2];
                let pix = j * w + i;
                if z >= zbuf[pix] {
                    continue;
                }
                zbuf[pix] = z;
                mask[pix] = 1.0;
                let uv = r.uv();
                let u = b[0] * uv[f[0]][0] + b[1] * uv[f[1]][0] + b[2] * uv[f[2]][0];
                let v = b[0] * uv[f[0]][1] + b[1] * uv[f[1]][1] + b[2] * uv[f[2]][1];
                let tex = bilinear(&scene.texture, u, v);
                for c in 0..3 {
                    image[c * n + pix] = (tex[c] * shade).min(1.0);
                }
            }
        }
    }
    Ok(RenderedFrame { height: h, width: w, image, mask })
}
