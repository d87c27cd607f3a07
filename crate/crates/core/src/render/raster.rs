//! Soft rasterization with a hand-written adjoint.
//!
//! Coverage of pixel `p` by face `f` is `sigmoid(-D(p, f) / sigma)` where
//! `D` is the squared distance from `p` to the projected triangle in
//! normalized device coordinates, negated inside. The silhouette is the
//! probabilistic union `1 - prod_f (1 - coverage)`. Colors are blended by a
//! softmax over `-depth / gamma` weighted by coverage, then multiplied by the
//! silhouette so the background stays black.

use std::sync::Arc;

use super::sh::{sh_basis, sh_basis_grad};
use crate::error::{Error, Result};
use crate::geometry::CameraBasis;
use crate::tensor::{CustomOp, Real, Tensor};

/// Faces whose coverage logit exceeds this many `sigma` are skipped.
const CULL: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub fov_deg: f64,
    /// Camera depths mapped to `[0, 1]` for the color softmax.
    pub depth_near: f64,
    pub depth_far: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 64,
            width: 64,
            sigma: 1e-4,
            gamma: 1e-4,
            fov_deg: crate::geometry::DEFAULT_FOV_DEG,
            depth_near: 0.1,
            depth_far: 100.0,
        }
    }
}

impl RenderConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        RenderConfig { height, width, ..Default::default() }
    }

    pub fn soft(mut self, sigma: f64, gamma: f64) -> Self {
        self.sigma = sigma;
        self.gamma = gamma;
        self
    }
}

struct FaceGeom<T> {
    q: [[T; 2]; 3],
    z: [T; 3],
    area: T,
    // shading
    m: [T; 3],
    len: T,
    n: [T; 3],
    nc: [T; 3],
    raw: T,
    shade: T,
}

struct Prepared<T> {
    basis: CameraBasis<T>,
    cam: Vec<[T; 3]>,
    faces: Vec<FaceGeom<T>>,
    starts: Vec<usize>,
    list: Vec<u32>,
    kx: T,
    ky: T,
}

#[derive(Clone, Copy, Default)]
struct TexTap<T> {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: T,
    fy: T,
    dxdu: T,
    dydv: T,
}

#[derive(Clone, Copy)]
struct Sample<T> {
    face: usize,
    s: T,
    inside: bool,
    edge: usize,
    t: T,
    diff: [T; 2],
    b: [T; 3],
    bc: [T; 3],
    bsum: T,
    zhat: T,
    tex: [T; 3],
    tap: TexTap<T>,
    color: [T; 3],
    clamped: [bool; 3],
}

struct Pixel<T> {
    p_prod: T,
    mask: T,
    color: [T; 3],
    wsum: T,
    zmin: T,
}

/// The renderer as a tape op. Inputs: `camera [4]` (`[ax, ay, e_deg, d]`),
/// `light [9]`, `vertices [V, 3]`, `texture [Ht, Wt, 3]`. Output
/// `[4, H, W]`: RGB planes followed by the silhouette.
pub struct SoftRasterizer {
    pub cfg: RenderConfig,
    faces: Arc<Vec<[usize; 3]>>,
    uv: Arc<Vec<[f64; 2]>>,
}

#[inline]
fn edge_fn<T: Real>(a: [T; 2], b: [T; 2], p: [T; 2]) -> T {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(sigmoid(x))`
#[inline]
fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl SoftRasterizer {
    pub fn new(cfg: RenderConfig, faces: Arc<Vec<[usize; 3]>>, uv: Arc<Vec<[f64; 2]>>) -> Self {
        SoftRasterizer { cfg, faces, uv }
    }

    pub fn num_vertices(&self) -> usize {
        self.uv.len()
    }

    fn prepare<T: Real>(&self, camera: &[T], light: &[T], verts: &[T]) -> Result<Prepared<T>> {
        let cfg = &self.cfg;
        let basis = CameraBasis::new(camera);
        let near = basis.d * T::c(0.01);
        let k = T::c(1.0 / (cfg.fov_deg.to_radians() * 0.5).tan());
        let kx = k;
        let ky = k * T::c(cfg.width as f64 / cfg.height as f64);
        let mut cam = Vec::with_capacity(verts.len() / 3);
        for (i, p) in verts.chunks_exact(3).enumerate() {
            let (x, y, z) = basis.to_camera([p[0], p[1], p[2]]);
            if !(z > near) {
                return Err(Error::NearPlane { index: i, depth: z.f64(), near: near.f64() });
            }
            cam.push([x, y, z]);
        }
        let vert = |i: usize| [verts[3 * i], verts[3 * i + 1], verts[3 * i + 2]];
        let faces: Vec<FaceGeom<T>> = self
            .faces
            .iter()
            .map(|f| {
                let q = f.map(|i| [kx * cam[i][0] / cam[i][2], ky * cam[i][1] / cam[i][2]]);
                let z = f.map(|i| cam[i][2]);
                let area = edge_fn(q[0], q[1], q[2]);
                let (p0, p1, p2) = (vert(f[0]), vert(f[1]), vert(f[2]));
                let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
                let m = cross(e1, e2);
                let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                let n = if len > T::c(1e-12) { [m[0] / len, m[1] / len, m[2] / len] } else { [T::zero(); 3] };
                let nc = [dot(basis.u, n), dot(basis.v, n), dot(basis.w, n)];
                let y = sh_basis(nc);
                let mut raw = T::zero();
                for j in 0..9 {
                    raw += light[j] * y[j];
                }
                let shade = raw.max(T::zero());
                FaceGeom { q, z, area, m, len, n, nc, raw, shade }
            })
            .collect();

        // bin faces into pixels by their expanded bounding boxes
        let (h, w) = (cfg.height, cfg.width);
        let r = T::c((CULL * cfg.sigma).sqrt());
        let mut ranges = Vec::with_capacity(faces.len());
        let mut counts = vec![0usize; h * w];
        for fg in &faces {
            let xs = fg.q.map(|q| q[0].f64());
            let ys = fg.q.map(|q| q[1].f64());
            let (xmin, xmax) = (min3(xs) - r.f64(), max3(xs) + r.f64());
            let (ymin, ymax) = (min3(ys) - r.f64(), max3(ys) + r.f64());
            let i0 = ((xmin + 1.0) * w as f64 * 0.5 - 0.5).ceil().max(0.0);
            let i1 = ((xmax + 1.0) * w as f64 * 0.5 - 0.5).floor().min(w as f64 - 1.0);
            let j0 = ((1.0 - ymax) * h as f64 * 0.5 - 0.5).ceil().max(0.0);
            let j1 = ((1.0 - ymin) * h as f64 * 0.5 - 0.5).floor().min(h as f64 - 1.0);
            if i0 > i1 || j0 > j1 || !(i0.is_finite() && i1.is_finite() && j0.is_finite() && j1.is_finite()) {
                ranges.push(None);
                continue;
            }
            let rg = (i0 as usize, i1 as usize, j0 as usize, j1 as usize);
            for j in rg.2..=rg.3 {
                for i in rg.0..=rg.1 {
                    counts[j * w + i] += 1;
                }
            }
            ranges.push(Some(rg));
        }
        let mut starts = vec![0usize; h * w + 1];
        for p in 0..h * w {
            starts[p + 1] = starts[p] + counts[p];
        }
        let mut fill = starts.clone();
        let mut list = vec![0u32; starts[h * w]];
        for (fi, rg) in ranges.iter().enumerate() {
            if let Some((i0, i1, j0, j1)) = *rg {
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        list[fill[j * w + i]] = fi as u32;
                        fill[j * w + i] += 1;
                    }
                }
            }
        }
        Ok(Prepared { basis, cam, faces, starts, list, kx, ky })
    }

    fn sample_texture<T: Real>(&self, tex: &Tensor<T>, uv: [T; 2]) -> ([T; 3], TexTap<T>) {
        let (th, tw) = (tex.shape[0], tex.shape[1]);
        let axis = |t: T, size: usize| -> (T, T) {
            let hi = T::c((size.max(1) - 1) as f64);
            let x = t * hi;
            if x < T::zero() {
                (T::zero(), T::zero())
            } else if x > hi {
                (hi, T::zero())
            } else {
                (x, hi)
            }
        };
        let (x, dxdu) = axis(uv[0], tw);
        let (y, dydv) = axis(uv[1], th);
        let cellx = |v: T, size: usize| if size < 2 { 0 } else { v.floor().to_usize().unwrap().min(size - 2) };
        let (x0, y0) = (cellx(x, tw), cellx(y, th));
        let (x1, y1) = ((x0 + 1).min(tw - 1), (y0 + 1).min(th - 1));
        let fx = x - T::c(x0 as f64);
        let fy = y - T::c(y0 as f64);
        let d = &tex.data;
        let mut out = [T::zero(); 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v00 = d[(y0 * tw + x0) * 3 + c];
            let v01 = d[(y0 * tw + x1) * 3 + c];
            let v10 = d[(y1 * tw + x0) * 3 + c];
            let v11 = d[(y1 * tw + x1) * 3 + c];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            *o = top + (bot - top) * fy;
        }
        (out, TexTap { x0, y0, x1, y1, fx, fy, dxdu, dydv })
    }

    fn eval_pixel<T: Real>(
        &self,
        prep: &Prepared<T>,
        tex: &Tensor<T>,
        pix: usize,
        samples: &mut Vec<Sample<T>>,
    ) -> Pixel<T> {
        let cfg = &self.cfg;
        let (h, w) = (cfg.height, cfg.width);
        let (i, j) = (pix % w, pix / w);
        let p = [
            T::c(2.0 * (i as f64 + 0.5) / w as f64 - 1.0),
            T::c(1.0 - 2.0 * (j as f64 + 0.5) / h as f64),
        ];
        let sigma = T::c(cfg.sigma);
        let zscale = T::c(1.0 / (cfg.depth_far - cfg.depth_near));
        let znear = T::c(cfg.depth_near);
        samples.clear();
        let mut log_p = T::zero();
        for &fi in &prep.list[prep.starts[pix]..prep.starts[pix + 1]] {
            let fi = fi as usize;
            let fg = &prep.faces[fi];
            if fg.area.abs() < T::c(1e-12) {
                continue;
            }
            // closest edge
            let mut best = (T::infinity(), 0usize, T::zero(), [T::zero(); 2]);
            for e in 0..3 {
                let (a, b) = (fg.q[e], fg.q[(e + 1) % 3]);
                let dir = [b[0] - a[0], b[1] - a[1]];
                let len2 = dir[0] * dir[0] + dir[1] * dir[1];
                let t = if len2 > T::zero() {
                    (((p[0] - a[0]) * dir[0] + (p[1] - a[1]) * dir[1]) / len2).max(T::zero()).min(T::one())
                } else {
                    T::zero()
                };
                let diff = [p[0] - a[0] - t * dir[0], p[1] - a[1] - t * dir[1]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                if d2 < best.0 {
                    best = (d2, e, t, diff);
                }
            }
            let b = [
                edge_fn(fg.q[1], fg.q[2], p) / fg.area,
                edge_fn(fg.q[2], fg.q[0], p) / fg.area,
                edge_fn(fg.q[0], fg.q[1], p) / fg.area,
            ];
            let inside = b.iter().all(|&x| x >= T::zero());
            let dsigned = if inside { -best.0 } else { best.0 };
            if dsigned / sigma > T::c(CULL) {
                continue;
            }
            let s = sigmoid(-dsigned / sigma);
            log_p += log_sigmoid(dsigned / sigma);

            let bp = b.map(|x| x.max(T::zero()));
            let bsum = bp[0] + bp[1] + bp[2];
            let bc = bp.map(|x| x / bsum);
            let f = self.faces[fi];
            let mut uv = [T::zero(); 2];
            let mut zc = T::zero();
            for k in 0..3 {
                let t = self.uv[f[k]];
                uv[0] += bc[k] * T::c(t[0]);
                uv[1] += bc[k] * T::c(t[1]);
                zc += bc[k] * fg.z[k];
            }
            let zhat = (zc - znear) * zscale;
            let (texc, tap) = self.sample_texture(tex, uv);
            let mut color = [T::zero(); 3];
            let mut clamped = [false; 3];
            for c in 0..3 {
                let v = texc[c] * fg.shade;
                if v > T::one() {
                    color[c] = T::one();
                    clamped[c] = true;
                } else {
                    color[c] = v;
                }
            }
            samples.push(Sample {
                face: fi,
                s,
                inside,
                edge: best.1,
                t: best.2,
                diff: best.3,
                b,
                bc,
                bsum,
                zhat,
                tex: texc,
                tap,
                color,
                clamped,
            });
        }
        let p_prod = log_p.exp();
        let mask = T::one() - p_prod;
        let zmin = samples.iter().fold(T::infinity(), |m, s| m.min(s.zhat));
        let gamma = T::c(cfg.gamma);
        let mut wsum = T::zero();
        let mut acc = [T::zero(); 3];
        for s in samples.iter() {
            let wgt = s.s * ((zmin - s.zhat) / gamma).exp();
            wsum += wgt;
            for c in 0..3 {
                acc[c] += wgt * s.color[c];
            }
        }
        let color = if wsum > T::zero() { acc.map(|a| a / wsum) } else { [T::zero(); 3] };
        Pixel { p_prod, mask, color, wsum, zmin }
    }

    pub fn forward<T: Real>(&self, camera: &[T], light: &[T], verts: &[T], tex: &Tensor<T>) -> Result<Vec<T>> {
        let prep = self.prepare(camera, light, verts)?;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let plane = h * w;
        let mut out = vec![T::zero(); 4 * plane];
        let mut samples = Vec::new();
        for pix in 0..plane {
            if prep.starts[pix] == prep.starts[pix + 1] {
                continue;
            }
            let px = self.eval_pixel(&prep, tex, pix, &mut samples);
            for c in 0..3 {
                out[c * plane + pix] = px.mask * px.color[c];
            }
            out[3 * plane + pix] = px.mask;
        }
        Ok(out)
    }

    #[allow(clippy::needless_range_loop)]
    fn backward_impl<T: Real>(
        &self,
        camera: &[T],
        light: &[T],
        verts: &[T],
        tex: &Tensor<T>,
        g_out: &[T],
    ) -> ([T; 4], [T; 9], Vec<T>, Vec<T>) {
        let prep = self.prepare(camera, light, verts).expect("forward succeeded on these inputs");
        let cfg = &self.cfg;
        let (h, w) = (cfg.height, cfg.width);
        let plane = h * w;
        let sigma = T::c(cfg.sigma);
        let gamma = T::c(cfg.gamma);
        let zscale = T::c(1.0 / (cfg.depth_far - cfg.depth_near));
        let nv = verts.len() / 3;
        let (th, tw) = (tex.shape[0], tex.shape[1]);
        let _ = th;

        let mut g_q = vec![[T::zero(); 2]; nv];
        let mut g_z = vec![T::zero(); nv];
        let mut g_shade = vec![T::zero(); prep.faces.len()];
        let mut g_tex = vec![T::zero(); tex.data.len()];
        let mut samples = Vec::new();

        for pix in 0..plane {
            if prep.starts[pix] == prep.starts[pix + 1] {
                continue;
            }
            let g_i = [g_out[pix], g_out[plane + pix], g_out[2 * plane + pix]];
            let g_m = g_out[3 * plane + pix];
            if g_i.iter().all(|&x| x == T::zero()) && g_m == T::zero() {
                continue;
            }
            let px = self.eval_pixel(&prep, tex, pix, &mut samples);
            let mut g_mask = g_m;
            let mut g_c = [T::zero(); 3];
            for c in 0..3 {
                g_mask += g_i[c] * px.color[c];
                g_c[c] = g_i[c] * px.mask;
            }
            for s in samples.iter() {
                let f = s.face;
                let fg = &prep.faces[f];
                let wgt = s.s * ((px.zmin - s.zhat) / gamma).exp();
                let mut g_s = T::zero();
                let mut g_zhat = T::zero();
                let mut g_color = [T::zero(); 3];
                if px.wsum > T::zero() {
                    let mut g_w = T::zero();
                    for c in 0..3 {
                        g_w += g_c[c] * (s.color[c] - px.color[c]);
                        g_color[c] = g_c[c] * wgt / px.wsum;
                    }
                    g_w = g_w / px.wsum;
                    if s.s > T::zero() {
                        g_s += g_w * wgt / s.s;
                    }
                    g_zhat = -g_w * wgt / gamma;
                }
                // color = min(1, tex * shade)
                let mut g_texc = [T::zero(); 3];
                for c in 0..3 {
                    if !s.clamped[c] {
                        g_texc[c] = g_color[c] * fg.shade;
                        g_shade[f] += g_color[c] * s.tex[c];
                    }
                }
                // bilinear texture tap
                let tap = s.tap;
                let (mut g_x, mut g_y) = (T::zero(), T::zero());
                for c in 0..3 {
                    let g = g_texc[c];
                    if g == T::zero() {
                        continue;
                    }
                    let i00 = (tap.y0 * tw + tap.x0) * 3 + c;
                    let i01 = (tap.y0 * tw + tap.x1) * 3 + c;
                    let i10 = (tap.y1 * tw + tap.x0) * 3 + c;
                    let i11 = (tap.y1 * tw + tap.x1) * 3 + c;
                    let one = T::one();
                    g_tex[i00] += g * (one - tap.fx) * (one - tap.fy);
                    g_tex[i01] += g * tap.fx * (one - tap.fy);
                    g_tex[i10] += g * (one - tap.fx) * tap.fy;
                    g_tex[i11] += g * tap.fx * tap.fy;
                    let d = &tex.data;
                    g_x += g * ((d[i01] - d[i00]) * (one - tap.fy) + (d[i11] - d[i10]) * tap.fy);
                    g_y += g * ((d[i10] - d[i00]) * (one - tap.fx) + (d[i11] - d[i01]) * tap.fx);
                }
                let g_uv = [g_x * tap.dxdu, g_y * tap.dydv];

                // uv and depth from clamped barycentrics
                let fidx = self.faces[f];
                let mut g_bc = [T::zero(); 3];
                for k in 0..3 {
                    let t = self.uv[fidx[k]];
                    g_bc[k] = g_uv[0] * T::c(t[0]) + g_uv[1] * T::c(t[1]) + g_zhat * zscale * fg.z[k];
                    g_z[fidx[k]] += g_zhat * zscale * s.bc[k];
                }
                let dotbc = g_bc[0] * s.bc[0] + g_bc[1] * s.bc[1] + g_bc[2] * s.bc[2];
                let g_b: [T; 3] =
                    std::array::from_fn(|k| if s.b[k] > T::zero() { (g_bc[k] - dotbc) / s.bsum } else { T::zero() });

                // coverage and silhouette
                let one = T::one();
                let g_d = g_mask * (-px.p_prod * s.s / sigma) + g_s * (-s.s * (one - s.s) / sigma);

                let q = fg.q;
                let mut gq = [[T::zero(); 2]; 3];
                // signed squared distance to the closest edge
                let sign = if s.inside { -one } else { one };
                let (ea, eb) = (s.edge, (s.edge + 1) % 3);
                let two = T::c(2.0);
                for ax in 0..2 {
                    gq[ea][ax] -= g_d * sign * two * s.diff[ax] * (one - s.t);
                    gq[eb][ax] -= g_d * sign * two * s.diff[ax] * s.t;
                }
                // barycentrics b_k = E_k / A
                let a = fg.area;
                let p = [
                    T::c(2.0 * ((pix % w) as f64 + 0.5) / w as f64 - 1.0),
                    T::c(1.0 - 2.0 * ((pix / w) as f64 + 0.5) / h as f64),
                ];
                let mut g_area = T::zero();
                for k in 0..3 {
                    if g_b[k] == T::zero() {
                        continue;
                    }
                    let g_e = g_b[k] / a;
                    g_area -= g_b[k] * s.b[k] / a;
                    let (ia, ib) = ((k + 1) % 3, (k + 2) % 3);
                    let (pa, pb) = (q[ia], q[ib]);
                    gq[ia][0] += g_e * (pb[1] - p[1]);
                    gq[ia][1] += g_e * (p[0] - pb[0]);
                    gq[ib][0] += g_e * (p[1] - pa[1]);
                    gq[ib][1] += g_e * (pa[0] - p[0]);
                }
                if g_area != T::zero() {
                    gq[0][0] += g_area * (q[1][1] - q[2][1]);
                    gq[0][1] += g_area * (q[2][0] - q[1][0]);
                    gq[1][0] += g_area * (q[2][1] - q[0][1]);
                    gq[1][1] += g_area * (q[0][0] - q[2][0]);
                    gq[2][0] += g_area * (q[0][1] - q[1][1]);
                    gq[2][1] += g_area * (q[1][0] - q[0][0]);
                }
                for k in 0..3 {
                    g_q[fidx[k]][0] += gq[k][0];
                    g_q[fidx[k]][1] += gq[k][1];
                }
            }
        }

        // shading -> light, normals, camera frame
        let basis = &prep.basis;
        let mut g_light = [T::zero(); 9];
        let mut gu = [T::zero(); 3];
        let mut gv = [T::zero(); 3];
        let mut gw = [T::zero(); 3];
        let mut gd = T::zero();
        let mut g_verts = vec![T::zero(); verts.len()];
        for (f, fg) in prep.faces.iter().enumerate() {
            if g_shade[f] == T::zero() || fg.raw <= T::zero() {
                continue;
            }
            let y = sh_basis(fg.nc);
            let dy = sh_basis_grad(fg.nc);
            let mut g_nc = [T::zero(); 3];
            for k in 0..9 {
                g_light[k] += g_shade[f] * y[k];
                for ax in 0..3 {
                    g_nc[ax] += g_shade[f] * light[k] * dy[k][ax];
                }
            }
            if fg.len <= T::c(1e-12) {
                continue;
            }
            let mut g_n = [T::zero(); 3];
            for ax in 0..3 {
                g_n[ax] = g_nc[0] * basis.u[ax] + g_nc[1] * basis.v[ax] + g_nc[2] * basis.w[ax];
                gu[ax] += g_nc[0] * fg.n[ax];
                gv[ax] += g_nc[1] * fg.n[ax];
                gw[ax] += g_nc[2] * fg.n[ax];
            }
            let ndg = dot(fg.n, g_n);
            let g_m = [0, 1, 2].map(|ax| (g_n[ax] - fg.n[ax] * ndg) / fg.len);
            let idx = self.faces[f];
            let p = idx.map(|i| [verts[3 * i], verts[3 * i + 1], verts[3 * i + 2]]);
            let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
            let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
            let g_e1 = cross(e2, g_m);
            let g_e2 = cross(g_m, e1);
            let _ = fg.m;
            for ax in 0..3 {
                g_verts[3 * idx[1] + ax] += g_e1[ax];
                g_verts[3 * idx[2] + ax] += g_e2[ax];
                g_verts[3 * idx[0] + ax] -= g_e1[ax] + g_e2[ax];
            }
        }

        // projection
        for i in 0..nv {
            let [x, y, z] = prep.cam[i];
            let g_x = g_q[i][0] * prep.kx / z;
            let g_y = g_q[i][1] * prep.ky / z;
            let g_zt = g_z[i] - g_q[i][0] * prep.kx * x / (z * z) - g_q[i][1] * prep.ky * y / (z * z);
            let p = [verts[3 * i], verts[3 * i + 1], verts[3 * i + 2]];
            for ax in 0..3 {
                g_verts[3 * i + ax] += g_x * basis.u[ax] + g_y * basis.v[ax] - g_zt * basis.w[ax];
                gu[ax] += g_x * p[ax];
                gv[ax] += g_y * p[ax];
                gw[ax] -= g_zt * p[ax];
            }
            gd += g_zt;
        }
        let g_cam = basis.backward(gu, gv, gw, gd);
        (g_cam, g_light, g_verts, g_tex)
    }
}

impl<T: Real> CustomOp<T> for SoftRasterizer {
    fn name(&self) -> &'static str {
        "soft_rasterize"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (g_cam, g_light, g_verts, g_tex) =
            self.backward_impl(&inputs[0].data, &inputs[1].data, &inputs[2].data, inputs[3], g);
        vec![
            needs[0].then(|| g_cam.to_vec()),
            needs[1].then(|| g_light.to_vec()),
            needs[2].then_some(g_verts),
            needs[3].then_some(g_tex),
        ]
    }
}

#[inline]
fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn min3(v: [f64; 3]) -> f64 {
    v[0].min(v[1]).min(v[2])
}

fn max3(v: [f64; 3]) -> f64 {
    v[0].max(v[1]).max(v[2])
}
