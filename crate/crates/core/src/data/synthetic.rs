use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{read_arrays, write_arrays, Sample};
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::geometry::{icosphere, Mesh, DEFAULT_FOV_DEG};
use crate::render::{ambient_light, hard_render, RenderConfig, Renderer, Scene};
use crate::tensor::Tensor;

/// Shaft half-length and end radii of the synthetic instrument.
const HALF_LENGTH: f64 = 1.0;
const RADIUS_BOTTOM: f64 = 0.2;
const RADIUS_TOP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub tex_height: usize,
    pub tex_width: usize,
    pub icosphere_level: u32,
    pub fov_deg: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 64,
            tex_height: 32,
            tex_width: 32,
            icosphere_level: 1,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

/// The attributes that generated a synthetic sample. The camera is stored
/// realized (`[ax, ay, elevation_deg, distance]`); the flow is the identity
/// grid and `texture` holds the UV map itself.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub camera: [f64; 4],
    pub light: [f64; 9],
    pub shape_delta: Vec<[f64; 3]>,
    pub texture_flow: Tensor<f64>,
    pub texture: Tensor<f64>,
}

impl GroundTruth {
    pub fn scene(&self, template: &Mesh) -> Scene {
        Scene {
            camera: self.camera,
            light: self.light,
            vertices: template
                .vertices
                .iter()
                .zip(&self.shape_delta)
                .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
                .collect(),
            texture: self.texture.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let shape: Vec<f64> = self.shape_delta.iter().flatten().copied().collect();
        write_arrays(&[
            ("camera", &[4], &self.camera),
            ("light", &[9], &self.light),
            ("shape_delta", &[self.shape_delta.len(), 3], &shape),
            ("texture_flow", &self.texture_flow.shape, &self.texture_flow.data),
            ("texture", &self.texture.shape, &self.texture.data),
        ])
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut m = read_arrays(text)?;
        let mut take = |k: &str| m.remove(k).ok_or_else(|| format!("missing `{k}`"));
        let camera = take("camera")?;
        let light = take("light")?;
        let shape = take("shape_delta")?;
        let flow = take("texture_flow")?;
        let tex = take("texture")?;
        if camera.1.len() != 4 || light.1.len() != 9 || shape.0.len() != 2 || shape.0[1] != 3 {
            return Err("malformed camera, light or shape_delta".into());
        }
        Ok(GroundTruth {
            camera: std::array::from_fn(|i| camera.1[i]),
            light: std::array::from_fn(|i| light.1[i]),
            shape_delta: shape.1.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            texture_flow: Tensor::new(&flow.0, flow.1),
            texture: Tensor::new(&tex.0, tex.1),
        })
    }
}

/// The sphere template squeezed into a tapered shaft along `+Y`.
pub fn tool_mesh(template: &Mesh) -> Vec<[f64; 3]> {
    template
        .vertices
        .iter()
        .map(|p| {
            let t = 0.5 * (p[1] + 1.0);
            let r = RADIUS_BOTTOM + (RADIUS_TOP - RADIUS_BOTTOM) * t;
            [p[0] * r, p[1] * HALF_LENGTH, p[2] * r]
        })
        .collect()
}

fn band_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let bands = rng.gen_range(2..=4);
    let mut cuts: Vec<f64> = (0..bands - 1).map(|_| rng.gen_range(0.15..0.85)).collect();
    cuts.sort_by(f64::total_cmp);
    let colors: Vec<[f64; 3]> = (0..bands)
        .map(|b| {
            // alternate bright and dark so neighboring bands stay distinct
            let base = if b % 2 == 0 { 0.55 } else { 0.15 };
            std::array::from_fn(|_| base + rng.gen_range(0.0..0.4))
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let v = y as f64 / (h.max(2) - 1) as f64;
        let band = cuts.iter().filter(|&&c| c < v).count();
        for _ in 0..w {
            data.extend_from_slice(&colors[band]);
        }
    }
    Tensor::new(&[h, w, 3], data)
}

/// Samples `first .. first + n` of the stream defined by `seed`. Sample `k`
/// depends only on `(seed, k)`, so a longer run extends a shorter one.
pub fn gen_synthetic(first: usize, n: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    let template = icosphere(cfg.icosphere_level)?;
    let rcfg = RenderConfig { fov_deg: cfg.fov_deg, ..RenderConfig::with_size(cfg.height, cfg.width) };
    let renderer = Renderer::new(&template, rcfg);
    let shaft = tool_mesh(&template);
    let enc_cfg = EncoderConfig {
        height: cfg.height,
        width: cfg.width,
        tex_height: cfg.tex_height,
        tex_width: cfg.tex_width,
        num_vertices: template.num_vertices(),
        d_min: 0.0,
        shape_bound: 1.0,
    };
    let flow = Tensor::new(&[cfg.tex_height, cfg.tex_width, 2], enc_cfg.identity_flow());
    let (h, w) = (cfg.height, cfg.width);
    (first..first + n)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let az: f64 = rng.gen_range(0.0..360.0f64).to_radians();
            let el = rng.gen_range(-30.0..30.0);
            let d = rng.gen_range(2.0..3.0);
            let mut light = ambient_light(rng.gen_range(0.8..1.0));
            for l in &mut light[1..4] {
                *l = rng.gen_range(-0.3..0.3);
            }
            let texture = band_texture(&mut rng, cfg.tex_height, cfg.tex_width);
            let gt = GroundTruth {
                camera: [az.sin(), az.cos(), el, d],
                light,
                shape_delta: shaft
                    .iter()
                    .zip(&template.vertices)
                    .map(|(s, p)| [s[0] - p[0], s[1] - p[1], s[2] - p[2]])
                    .collect(),
                texture_flow: flow.clone(),
                texture,
            };
            let frame = hard_render(&renderer, &gt.scene(&template))?;
            Ok(Sample { image: Tensor::new(&[3, h, w], frame.image), mask: frame.mask, ground_truth: Some(gt) })
        })
        .collect()
}
