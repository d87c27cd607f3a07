//! Differentiable rendering of a textured, SH-lit triangle mesh.

mod hard;
mod raster;
mod sh;

use std::path::Path;
use std::sync::Arc;

pub use hard::hard_render;
pub use raster::{RenderConfig, SoftRasterizer};
pub use sh::{ambient_light, sh_basis, sh_basis_grad, sh_irradiance_raw, shade_sh};

use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Reconstruction attributes in raw encoder-output space.
///
/// `camera` is `[ax, ay, e_raw, d_raw]` before squashing; `shape_delta` is
/// the per-vertex offset `[V, 3]`; `texture_flow` is `[Ht, Wt, 2]` sampling
/// coordinates into the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct Attributes {
    pub camera: [f64; 4],
    pub light: [f64; 9],
    pub shape_delta: Vec<[f64; 3]>,
    pub texture_flow: Tensor<f64>,
}

/// Fully realized render inputs: camera `[ax, ay, e_deg, d]`, light,
/// vertex positions and the texture image `[Ht, Wt, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: [f64; 4],
    pub light: [f64; 9],
    pub vertices: Vec<[f64; 3]>,
    pub texture: Tensor<f64>,
}

/// RGB planes `[3, H, W]` and silhouette `[H, W]`, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
}

impl RenderedFrame {
    /// Splits a `[4, H, W]` renderer output.
    pub fn from_planes(height: usize, width: usize, planes: &[f64]) -> Self {
        let n = height * width;
        RenderedFrame { height, width, image: planes[..3 * n].to_vec(), mask: planes[3 * n..4 * n].to_vec() }
    }

    pub fn mask_sum(&self) -> f64 {
        self.mask.iter().sum()
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let n = self.height * self.width;
        let p = y * self.width + x;
        [self.image[p], self.image[n + p], self.image[2 * n + p]]
    }

    pub fn save_png(&self, image_path: &Path, mask_path: Option<&Path>) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb(self.rgb(x as usize, y as usize).map(to_u8))
        });
        img.save(image_path).map_err(|source| Error::Image { path: image_path.into(), source })?;
        if let Some(mp) = mask_path {
            let m = image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([to_u8(self.mask[y as usize * self.width + x as usize])])
            });
            m.save(mp).map_err(|source| Error::Image { path: mp.into(), source })?;
        }
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A renderer bound to a mesh topology. Holds no trainable state.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub cfg: RenderConfig,
    faces: Arc<Vec<[usize; 3]>>,
    uv: Arc<Vec<[f64; 2]>>,
}

impl Renderer {
    pub fn new(mesh: &Mesh, cfg: RenderConfig) -> Self {
        Renderer { cfg, faces: Arc::new(mesh.faces.clone()), uv: Arc::new(mesh.uv.clone()) }
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uv(&self) -> &[[f64; 2]] {
        &self.uv
    }

    fn op(&self) -> SoftRasterizer {
        SoftRasterizer::new(self.cfg.clone(), self.faces.clone(), self.uv.clone())
    }

    /// Records a render on `tape`. Inputs are a realized camera `[4]`,
    /// light `[9]`, vertices `[V, 3]` and texture `[Ht, Wt, 3]`; the output
    /// is `[4, H, W]` with RGB planes first and the silhouette last.
    pub fn render_var<T: Real>(&self, tape: &Tape<T>, camera: Var, light: Var, vertices: Var, texture: Var) -> Result<Var> {
        let (c, l, v, t) = (tape.value(camera), tape.value(light), tape.value(vertices), tape.value(texture));
        let nv = self.uv.len();
        if c.shape != [4] || l.shape != [9] || v.shape != [nv, 3] || t.shape.len() != 3 || t.shape[2] != 3 || t.len() == 0 {
            return Err(Error::shape(
                "render",
                format!("camera {:?}, light {:?}, vertices {:?} (V={nv}), texture {:?}", c.shape, l.shape, v.shape, t.shape),
            ));
        }
        let op = self.op();
        let out = op.forward(&c.data, &l.data, &v.data, &t)?;
        let (h, w) = (self.cfg.height, self.cfg.width);
        Ok(tape.custom(Box::new(op), &[camera, light, vertices, texture], Tensor::new(&[4, h, w], out)))
    }

    pub fn render(&self, scene: &Scene) -> Result<RenderedFrame> {
        let verts: Vec<f64> = scene.vertices.iter().flatten().copied().collect();
        if verts.len() != 3 * self.uv.len() {
            return Err(Error::shape("render", format!("{} vertices for V={}", scene.vertices.len(), self.uv.len())));
        }
        let out = self.op().forward(&scene.camera, &scene.light, &verts, &scene.texture)?;
        Ok(RenderedFrame::from_planes(self.cfg.height, self.cfg.width, &out))
    }
}

/// A constant-color texture `[h, w, 3]`.
pub fn uniform_texture(h: usize, w: usize, rgb: [f64; 3]) -> Tensor<f64> {
    let data = (0..h * w).flat_map(|_| rgb).collect();
    Tensor::new(&[h, w, 3], data)
}
