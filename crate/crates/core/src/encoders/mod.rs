//! The reconstruction encoder and the landmark classifier.
//!
//! The encoder is a shared stride-2 convolutional backbone feeding four
//! two-layer heads (camera, light, shape offset, texture flow). Each head's
//! last layer starts at 1% scale and is offset by a fixed bias so that a
//! fresh model predicts the template sphere, a frontal camera, ambient
//! light and the identity flow.

mod params;

pub use params::ParamStore;

use params::Init;

use crate::error::{Error, Result};
use crate::geometry::{realize_camera, Mesh};
use crate::render::{ambient_light, Attributes};
use crate::tensor::{Real, Tape, Tensor, Var};

const BACKBONE: [usize; 4] = [16, 32, 64, 128];
const HEAD_HIDDEN: usize = 128;
const HEADS: [&str; 4] = ["camera", "light", "shape", "flow"];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub tex_height: usize,
    pub tex_width: usize,
    pub num_vertices: usize,
    /// Smallest camera distance a realized camera can take.
    pub d_min: f64,
    /// Per-coordinate bound on the shape offset.
    pub shape_bound: f64,
}

impl EncoderConfig {
    fn feature_dim(&self) -> usize {
        let (mut h, mut w) = (self.height, self.width);
        for _ in BACKBONE {
            h = (h + 1) / 2;
            w = (w + 1) / 2;
        }
        BACKBONE[3] * h * w
    }

    fn head_dim(&self, head: usize) -> usize {
        match head {
            0 => 4,
            1 => 9,
            2 => self.num_vertices * 3,
            _ => self.tex_height * self.tex_width * 2,
        }
    }

    /// Identity sampling grid for the texture flow, `[Ht * Wt * 2]` in
    /// `(x, y)` order. Texel centers map to input pixel positions.
    pub fn identity_flow(&self) -> Vec<f64> {
        let axis = |i: usize, n: usize, m: usize| {
            let px = (i as f64 + 0.5) / n as f64 * m as f64 - 0.5;
            if m < 2 {
                0.0
            } else {
                2.0 * px / (m - 1) as f64 - 1.0
            }
        };
        let mut out = Vec::with_capacity(self.tex_height * self.tex_width * 2);
        for y in 0..self.tex_height {
            for x in 0..self.tex_width {
                out.push(axis(x, self.tex_width, self.width));
                out.push(axis(y, self.tex_height, self.height));
            }
        }
        out
    }
}

/// Raw head outputs for a batch, each `[N, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub camera: Var,
    pub light: Var,
    pub shape: Var,
    pub flow: Var,
}

impl EncodedVars {
    pub fn parts(&self) -> [Var; 4] {
        [self.camera, self.light, self.shape, self.flow]
    }

    pub fn from_parts(p: [Var; 4]) -> Self {
        EncodedVars { camera: p[0], light: p[1], shape: p[2], flow: p[3] }
    }

    /// Row `i` of every component, each as `[1, dim]`.
    pub fn row<T: Real>(&self, tape: &Tape<T>, i: usize) -> Result<EncodedVars> {
        let p = self.parts();
        let mut out = [p[0]; 4];
        for k in 0..4 {
            out[k] = tape.slice(p[k], 0, i, 1)?;
        }
        Ok(EncodedVars::from_parts(out))
    }
}

/// Realized render inputs for one sample, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct RealizedVars {
    pub camera: Var,
    pub light: Var,
    pub vertices: Var,
    pub texture: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    fixed_bias: [Vec<f64>; 4],
    flow_atanh: Vec<f64>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        let identity = cfg.identity_flow();
        let flow_atanh = identity.iter().map(|v| v.atanh()).collect();
        let fixed_bias = [vec![0.0, 1.0, 0.0, 0.0], ambient_light(1.0).to_vec(), vec![], vec![]];
        Encoder { cfg, fixed_bias, flow_atanh }
    }

    /// Fresh parameters from `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut init = Init::new(seed);
        let mut p = ParamStore::default();
        let mut c_in = 4;
        for (i, &c) in BACKBONE.iter().enumerate() {
            p.push(format!("backbone.conv{i}.w"), init.he(&[c, c_in, 3, 3], c_in * 9, 1.0));
            p.push(format!("backbone.conv{i}.b"), Tensor::zeros(&[c]));
            c_in = c;
        }
        let feat = self.cfg.feature_dim();
        for (h, name) in HEADS.iter().enumerate() {
            let out = self.cfg.head_dim(h);
            p.push(format!("{name}.fc1.w"), init.he(&[feat, HEAD_HIDDEN], feat, 1.0));
            p.push(format!("{name}.fc1.b"), Tensor::zeros(&[HEAD_HIDDEN]));
            p.push(format!("{name}.fc2.w"), init.he(&[HEAD_HIDDEN, out], HEAD_HIDDEN, 0.01));
            p.push(format!("{name}.fc2.b"), Tensor::zeros(&[out]));
        }
        p
    }

    /// Encodes `x = [N, 4, H, W]` (RGB and mask planes) with bound params
    /// `p` (as returned by [`ParamStore::bind`]).
    pub fn encode<T: Real>(&self, tape: &Tape<T>, p: &[Var], x: Var) -> Result<EncodedVars> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 4 || shape[2] != self.cfg.height || shape[3] != self.cfg.width {
            return Err(Error::shape(
                "encode",
                format!("input {shape:?}, expected [N, 4, {}, {}]", self.cfg.height, self.cfg.width),
            ));
        }
        let n = shape[0];
        let mut h = x;
        for i in 0..BACKBONE.len() {
            h = tape.conv2d(h, p[2 * i], Some(p[2 * i + 1]), 2, 1)?;
            h = tape.relu(h);
            check(tape, h, || format!("backbone.conv{i}"))?;
        }
        let feat = tape.reshape(h, &[n, self.cfg.feature_dim()])?;
        let mut outs = Vec::with_capacity(4);
        for (hi, name) in HEADS.iter().enumerate() {
            let base = 2 * BACKBONE.len() + 4 * hi;
            let z = dense(tape, feat, p[base], p[base + 1])?;
            let z = tape.relu(z);
            let z = dense(tape, z, p[base + 2], p[base + 3])?;
            let dim = self.cfg.head_dim(hi);
            let z = match hi {
                0 | 1 => add_row(tape, z, &self.fixed_bias[hi], n)?,
                2 => {
                    let t = tape.tanh(z);
                    tape.scale(t, self.cfg.shape_bound)
                }
                _ => {
                    let z = add_row(tape, z, &self.flow_atanh, n)?;
                    tape.tanh(z)
                }
            };
            debug_assert_eq!(tape.shape(z), [n, dim]);
            check(tape, z, || format!("{name} head"))?;
            outs.push(z);
        }
        Ok(EncodedVars::from_parts([outs[0], outs[1], outs[2], outs[3]]))
    }

    /// Turns one row of raw outputs into render inputs. `image` is the
    /// `[3, H, W]` picture the texture flow samples from.
    pub fn realize<T: Real>(&self, tape: &Tape<T>, row: &EncodedVars, image: Var, template: &Mesh) -> Result<RealizedVars> {
        let cfg = &self.cfg;
        let cam = tape.reshape(row.camera, &[4])?;
        let camera = realize_camera(tape, cam, cfg.d_min)?;
        let light = tape.reshape(row.light, &[9])?;
        let delta = tape.reshape(row.shape, &[cfg.num_vertices, 3])?;
        let base = tape.constant(Tensor::from_f64(&[cfg.num_vertices, 3], &template.flat_vertices()));
        let vertices = tape.add(delta, base)?;
        let coords = tape.reshape(row.flow, &[cfg.tex_height * cfg.tex_width, 2])?;
        let tex = tape.grid_sample(image, coords)?;
        let texture = tape.reshape(tex, &[cfg.tex_height, cfg.tex_width, 3])?;
        Ok(RealizedVars { camera, light, vertices, texture })
    }

    /// Value-level encode of a batch `[N, 4, H, W]` into raw attributes.
    pub fn encode_values<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Attributes>> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let e = self.encode(&tape, &p, xv)?;
        let n = x.shape[0];
        let vals = e.parts().map(|v| tape.value(v).to_f64());
        let (v, k) = (self.cfg.num_vertices, self.cfg.tex_height * self.cfg.tex_width * 2);
        Ok((0..n)
            .map(|i| Attributes {
                camera: std::array::from_fn(|j| vals[0][4 * i + j]),
                light: std::array::from_fn(|j| vals[1][9 * i + j]),
                shape_delta: (0..v)
                    .map(|j| std::array::from_fn(|a| vals[2][i * 3 * v + 3 * j + a]))
                    .collect(),
                texture_flow: Tensor::new(
                    &[self.cfg.tex_height, self.cfg.tex_width, 2],
                    vals[3][i * k..(i + 1) * k].to_vec(),
                ),
            })
            .collect())
    }
}

/// Puts an [`Attributes`] value on the tape as a single raw row.
pub fn attributes_row<T: Real>(tape: &Tape<T>, a: &Attributes) -> EncodedVars {
    let shape: Vec<f64> = a.shape_delta.iter().flatten().copied().collect();
    let c = |v: &[f64]| tape.constant(Tensor::from_f64(&[1, v.len()], v));
    EncodedVars { camera: c(&a.camera), light: c(&a.light), shape: c(&shape), flow: c(&a.texture_flow.to_f64()) }
}

/// Value-level realization: squashed camera, light, `S = S0 + dS`, and the
/// texture sampled from `image = [3, H, W]`.
pub fn realize_attributes(enc: &Encoder, a: &Attributes, image: &Tensor<f64>, template: &Mesh) -> Result<crate::render::Scene> {
    let tape = Tape::<f64>::new();
    let row = attributes_row(&tape, a);
    let img = tape.constant(image.clone());
    let r = enc.realize(&tape, &row, img, template)?;
    let cam = tape.value(r.camera);
    let verts = tape.value(r.vertices);
    Ok(crate::render::Scene {
        camera: std::array::from_fn(|i| cam.data[i]),
        light: a.light,
        vertices: verts.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        texture: (*tape.value(r.texture)).clone(),
    })
}

fn dense<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let shape = tape.shape(y);
    let bb = tape.broadcast(b, &shape)?;
    tape.add(y, bb)
}

fn add_row<T: Real>(tape: &Tape<T>, z: Var, row: &[f64], n: usize) -> Result<Var> {
    let c = tape.constant(Tensor::from_f64(&[row.len()], row));
    let c = tape.broadcast(c, &[n, row.len()])?;
    tape.add(z, c)
}

fn check<T: Real>(tape: &Tape<T>, v: Var, name: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name()))
    }
}

const LANDMARK_CHANNELS: [usize; 3] = [16, 16, 32];
const LANDMARK_HIDDEN: usize = 64;

/// Feature extractor over paired frames and the per-vertex classifier.
#[derive(Clone, Debug)]
pub struct LandmarkClassifier {
    pub num_vertices: usize,
}

impl LandmarkClassifier {
    pub fn new(num_vertices: usize) -> Self {
        LandmarkClassifier { num_vertices }
    }

    pub fn feature_channels(&self) -> usize {
        LANDMARK_CHANNELS[2]
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut init = Init::new(seed);
        let mut p = ParamStore::default();
        let mut c_in = 8;
        for (i, &c) in LANDMARK_CHANNELS.iter().enumerate() {
            p.push(format!("landmark.conv{i}.w"), init.he(&[c, c_in, 3, 3], c_in * 9, 1.0));
            p.push(format!("landmark.conv{i}.b"), Tensor::zeros(&[c]));
            c_in = c;
        }
        p.push("landmark.fc1.w", init.he(&[c_in, LANDMARK_HIDDEN], c_in, 1.0));
        p.push("landmark.fc1.b", Tensor::zeros(&[LANDMARK_HIDDEN]));
        p.push("landmark.fc2.w", init.he(&[LANDMARK_HIDDEN, self.num_vertices], LANDMARK_HIDDEN, 1.0));
        p.push("landmark.fc2.b", Tensor::zeros(&[self.num_vertices]));
        p
    }

    /// Dense features `[N, C_f, H, W]` of paired frames `a`, `b`, each
    /// `[N, 4, H, W]`.
    pub fn feature_map<T: Real>(&self, tape: &Tape<T>, p: &[Var], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (tape.shape(a), tape.shape(b));
        if sa.len() != 4 || sa != sb || sa[1] != 4 {
            return Err(Error::shape("landmark_feature_map", format!("{sa:?} vs {sb:?}")));
        }
        let mut h = tape.concat(&[a, b], 1)?;
        for i in 0..LANDMARK_CHANNELS.len() {
            h = tape.conv2d(h, p[2 * i], Some(p[2 * i + 1]), 1, 1)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Samples `features = [C_f, H, W]` at pixel positions `landmarks =
    /// [V, 2]` and classifies each sample, giving `[V, V]` logits.
    pub fn pool_and_classify<T: Real>(&self, tape: &Tape<T>, p: &[Var], features: Var, landmarks: Var) -> Result<Var> {
        let fs = tape.shape(features);
        if fs.len() != 3 || tape.shape(landmarks) != [self.num_vertices, 2] {
            return Err(Error::shape("pool_and_classify", format!("features {fs:?}, landmarks {:?}", tape.shape(landmarks))));
        }
        let (h, w) = (fs[1], fs[2]);
        // pixel position (center of pixel i at i + 0.5) -> sampling coordinates
        let sx = 2.0 / (w.max(2) - 1) as f64;
        let sy = 2.0 / (h.max(2) - 1) as f64;
        let lx = tape.slice(landmarks, 1, 0, 1)?;
        let ly = tape.slice(landmarks, 1, 1, 1)?;
        let gx = tape.affine(lx, sx, -0.5 * sx - 1.0);
        let gy = tape.affine(ly, sy, -0.5 * sy - 1.0);
        let coords = tape.concat(&[gx, gy], 1)?;
        let f = tape.grid_sample(features, coords)?;
        let base = 2 * LANDMARK_CHANNELS.len();
        let z = dense(tape, f, p[base], p[base + 1])?;
        let z = tape.relu(z);
        dense(tape, z, p[base + 2], p[base + 3])
    }
}
