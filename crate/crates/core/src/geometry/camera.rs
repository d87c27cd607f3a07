use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Real, Tape, Tensor, Var};

pub const DEFAULT_FOV_DEG: f64 = 60.0;

/// Camera with azimuth kept as its Cartesian pair.
///
/// The realized azimuth is `atan2(ax, ay)`; the eye sits at
/// `distance * (cos e sin a, sin e, cos e cos a)` looking at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRaw {
    pub ax: f64,
    pub ay: f64,
    pub elevation_deg: f64,
    pub distance: f64,
}

impl CameraRaw {
    pub fn from_angles(azimuth_deg: f64, elevation_deg: f64, distance: f64) -> Self {
        let a = azimuth_deg.to_radians();
        CameraRaw { ax: a.sin(), ay: a.cos(), elevation_deg, distance }
    }

    /// Realized azimuth in `[0, 360)`.
    pub fn azimuth_deg(&self) -> f64 {
        let (ax, ay) = if self.ax == 0.0 && self.ay == 0.0 { (0.0, 1.0) } else { (self.ax, self.ay) };
        ax.atan2(ay).to_degrees().rem_euclid(360.0)
    }

    pub fn eye(&self) -> [f64; 3] {
        let a = self.azimuth_deg().to_radians();
        let e = self.elevation_deg.to_radians();
        let d = self.distance;
        [d * e.cos() * a.sin(), d * e.sin(), d * e.cos() * a.cos()]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.ax, self.ay, self.elevation_deg, self.distance]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        CameraRaw { ax: v[0], ay: v[1], elevation_deg: v[2], distance: v[3] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraMatrices {
    /// World to camera; the camera looks down its local `-z`.
    pub view: [[f64; 4]; 4],
    pub proj: [[f64; 4]; 4],
    pub eye: [f64; 3],
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// View and projection matrices for `c`. Up is `+Y`; when the eye sits on
/// the Y axis (`|e| = 90`) the up vector falls back to `+Z`.
pub fn camera_matrices(c: &CameraRaw, height: usize, width: usize, fov_deg: f64) -> Result<CameraMatrices> {
    if !(c.distance > 0.0) {
        return Err(Error::Invalid(format!("camera distance must be positive, got {}", c.distance)));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::Invalid(format!("fov must be in (0, 180) degrees, got {fov_deg}")));
    }
    let eye = c.eye();
    let w = unit(eye);
    let mut side = cross([0.0, 1.0, 0.0], w);
    if dot(side, side) < 1e-18 {
        side = cross([0.0, 0.0, 1.0], w);
    }
    let u = unit(side);
    let v = cross(w, u);
    let view = [
        [u[0], u[1], u[2], -dot(u, eye)],
        [v[0], v[1], v[2], -dot(v, eye)],
        [w[0], w[1], w[2], -dot(w, eye)],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let near = 0.01 * c.distance;
    let far = 100.0 * c.distance;
    let f = 1.0 / (fov_deg.to_radians() * 0.5).tan();
    let aspect = width as f64 / height as f64;
    let proj = [
        [f / aspect, 0.0, 0.0, 0.0],
        [0.0, f, 0.0, 0.0],
        [0.0, 0.0, (far + near) / (near - far), 2.0 * far * near / (near - far)],
        [0.0, 0.0, -1.0, 0.0],
    ];
    Ok(CameraMatrices { view, proj, eye, height, width, fov_deg, near, far })
}

/// A projected point: pixel coordinates (origin top-left, `y` down) and
/// positive camera-space depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Projects world points; errors on the first point at or behind the near
/// plane.
pub fn project_points(points: &[[f64; 3]], cam: &CameraMatrices) -> Result<Vec<Projected>> {
    let focal = cam.width as f64 * 0.5 / (cam.fov_deg.to_radians() * 0.5).tan();
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let m = &cam.view;
            let xc = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3];
            let yc = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3];
            let zc = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3];
            let depth = -zc;
            if depth <= cam.near {
                return Err(Error::NearPlane { index: i, depth, near: cam.near });
            }
            Ok(Projected {
                x: cam.width as f64 * 0.5 + focal * xc / depth,
                y: cam.height as f64 * 0.5 - focal * yc / depth,
                depth,
            })
        })
        .collect()
}

/// Orthonormal camera frame in closed form, with its adjoint.
///
/// Input is `[ax, ay, elevation_deg, distance]`. For `|e| < 90` this agrees
/// with [`camera_matrices`]: `u` = right, `v` = up, `w` = towards the eye.
#[derive(Clone, Debug)]
pub struct CameraBasis<T> {
    pub u: [T; 3],
    pub v: [T; 3],
    pub w: [T; 3],
    pub d: T,
    ax: T,
    ay: T,
    r2: T,
    sa: T,
    ca: T,
    se: T,
    ce: T,
}

impl<T: Real> CameraBasis<T> {
    pub fn new(cam: &[T]) -> Self {
        let (mut ax, mut ay) = (cam[0], cam[1]);
        let mut r2 = ax * ax + ay * ay;
        if r2 < T::c(1e-24) {
            ax = T::zero();
            ay = T::one();
            r2 = T::one();
        }
        let r = r2.sqrt();
        let (sa, ca) = (ax / r, ay / r);
        let e = cam[2] * T::c(std::f64::consts::PI / 180.0);
        let (se, ce) = (e.sin(), e.cos());
        let z = T::zero();
        CameraBasis {
            u: [ca, z, -sa],
            v: [-se * sa, ce, -se * ca],
            w: [ce * sa, se, ce * ca],
            d: cam[3],
            ax,
            ay,
            r2,
            sa,
            ca,
            se,
            ce,
        }
    }

    /// `(u.p, v.p, d - w.p)`: camera-space right, up, and depth.
    #[inline]
    pub fn to_camera(&self, p: [T; 3]) -> (T, T, T) {
        let x = self.u[0] * p[0] + self.u[1] * p[1] + self.u[2] * p[2];
        let y = self.v[0] * p[0] + self.v[1] * p[1] + self.v[2] * p[2];
        let z = self.d - (self.w[0] * p[0] + self.w[1] * p[1] + self.w[2] * p[2]);
        (x, y, z)
    }

    /// Gradient with respect to `[ax, ay, elevation_deg, distance]` given
    /// gradients on the frame vectors and the distance.
    pub fn backward(&self, gu: [T; 3], gv: [T; 3], gw: [T; 3], gd: T) -> [T; 4] {
        let (sa, ca, se, ce) = (self.sa, self.ca, self.se, self.ce);
        let z = T::zero();
        let du_da = [-sa, z, -ca];
        let dv_da = [-se * ca, z, se * sa];
        let dv_de = [-ce * sa, -se, -ce * ca];
        let dw_da = [ce * ca, z, -ce * sa];
        let dw_de = [-se * sa, ce, -se * ca];
        let d3 = |a: [T; 3], b: [T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let ga = d3(gu, du_da) + d3(gv, dv_da) + d3(gw, dw_da);
        let ge = d3(gv, dv_de) + d3(gw, dw_de);
        [
            ga * self.ay / self.r2,
            -ga * self.ax / self.r2,
            ge * T::c(std::f64::consts::PI / 180.0),
            gd,
        ]
    }
}

/// Differentiable projection: inputs `camera = [4]` (see [`CameraBasis`])
/// and `vertices = [V, 3]`; output `[V, 3]` of `(x_px, y_px, depth)`.
pub struct ProjectOp {
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
}

impl ProjectOp {
    fn focal(&self) -> f64 {
        self.width as f64 * 0.5 / (self.fov_deg.to_radians() * 0.5).tan()
    }

    pub fn forward<T: Real>(&self, camera: &[T], vertices: &[T]) -> Result<Vec<T>> {
        let basis = CameraBasis::new(camera);
        let f = T::c(self.focal());
        let near = basis.d * T::c(0.01);
        let (hw, hh) = (T::c(self.width as f64 * 0.5), T::c(self.height as f64 * 0.5));
        let mut out = Vec::with_capacity(vertices.len());
        for (i, p) in vertices.chunks_exact(3).enumerate() {
            let (x, y, z) = basis.to_camera([p[0], p[1], p[2]]);
            if !(z > near) {
                return Err(Error::NearPlane { index: i, depth: z.f64(), near: near.f64() });
            }
            out.extend_from_slice(&[hw + f * x / z, hh - f * y / z, z]);
        }
        Ok(out)
    }
}

impl<T: Real> CustomOp<T> for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let basis = CameraBasis::new(&inputs[0].data);
        let verts = &inputs[1].data;
        let f = T::c(self.focal());
        let mut gverts = vec![T::zero(); verts.len()];
        let (mut gu, mut gv, mut gw, mut gd) = ([T::zero(); 3], [T::zero(); 3], [T::zero(); 3], T::zero());
        for (i, p) in verts.chunks_exact(3).enumerate() {
            let (x, y, z) = basis.to_camera([p[0], p[1], p[2]]);
            let (gx, gy, gz) = (g[3 * i], g[3 * i + 1], g[3 * i + 2]);
            let g_x = gx * f / z;
            let g_y = -gy * f / z;
            let g_z = gz - gx * f * x / (z * z) + gy * f * y / (z * z);
            for k in 0..3 {
                gverts[3 * i + k] = g_x * basis.u[k] + g_y * basis.v[k] - g_z * basis.w[k];
                gu[k] += g_x * p[k];
                gv[k] += g_y * p[k];
                gw[k] -= g_z * p[k];
            }
            gd += g_z;
        }
        let gcam = basis.backward(gu, gv, gw, gd);
        vec![needs[0].then(|| gcam.to_vec()), needs[1].then_some(gverts)]
    }
}

/// Records a projection of `vertices` (`[V, 3]`) through `camera`
/// (`[ax, ay, elevation_deg, distance]`).
pub fn project<T: Real>(tape: &Tape<T>, camera: Var, vertices: Var, op: ProjectOp) -> Result<Var> {
    let (vc, vv) = (tape.value(camera), tape.value(vertices));
    if vc.shape != [4] || vv.shape.len() != 2 || vv.shape[1] != 3 {
        return Err(Error::shape("project", format!("camera {:?}, vertices {:?}", vc.shape, vv.shape)));
    }
    let out = op.forward(&vc.data, &vv.data)?;
    let n = vv.shape[0];
    Ok(tape.custom(Box::new(op), &[camera, vertices], Tensor::new(&[n, 3], out)))
}

/// Maps a raw camera head output `[ax, ay, e_raw, d_raw]` to
/// `[ax, ay, 90 tanh(e_raw), d_min + softplus(d_raw)]`.
pub fn realize_camera<T: Real>(tape: &Tape<T>, raw: Var, d_min: f64) -> Result<Var> {
    let az = tape.slice(raw, 0, 0, 2)?;
    let e = tape.slice(raw, 0, 2, 1)?;
    let d = tape.slice(raw, 0, 3, 1)?;
    let e = tape.tanh(e);
    let e = tape.scale(e, 90.0);
    let d = tape.softplus(d);
    let d = tape.affine(d, 1.0, d_min);
    tape.concat(&[az, e, d], 0)
}
