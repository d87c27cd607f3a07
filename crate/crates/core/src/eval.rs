//! Reconstruction quality and novel-view evaluation of a trained model.

use std::io::Write;
use std::path::Path;

use crate::data::{iou_metric, rf_frechet, Sample, RF_SEED};
use crate::encoders::realize_attributes;
use crate::encoders::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::render::{Attributes, RenderedFrame, Scene};
use crate::tensor::Tensor;
use crate::train::{load_checkpoint, Model, TrainConfig};

/// Number of views in a rotation sweep, spaced evenly over a full turn.
pub const SWEEP_VIEWS: usize = 12;

/// Azimuths of a rotation sweep in degrees: 0, 30, ..., 330.
pub fn sweep_azimuths() -> Vec<f64> {
    (0..SWEEP_VIEWS).map(|k| k as f64 * 360.0 / SWEEP_VIEWS as f64).collect()
}

pub const REPORT_HEADER: &str = "sample,iou,rf_frechet_recon,rf_frechet_rotation";

/// Model 1 of a trained pair, ready for inference.
pub struct Evaluator {
    pub cfg: TrainConfig,
    pub model: Model,
    params: ParamStore<f32>,
}

impl Evaluator {
    pub fn new(cfg: TrainConfig, params: ParamStore<f32>) -> Result<Self> {
        let model = Model::new(&cfg)?;
        Ok(Evaluator { cfg, model, params })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, None)?;
        let [first, _] = ck.state.models;
        Self::new(ck.config, first)
    }

    fn check(&self, s: &Sample) -> Result<()> {
        if s.height() != self.cfg.height || s.width() != self.cfg.width {
            return Err(Error::Dataset(format!(
                "sample is {}x{}, model expects {}x{}",
                s.height(),
                s.width(),
                self.cfg.height,
                self.cfg.width
            )));
        }
        Ok(())
    }

    pub fn encode(&self, s: &Sample) -> Result<Attributes> {
        self.check(s)?;
        let x = crate::data::batch(&[s]).cast::<f32>();
        let mut out = self.model.encoder.encode_values(&self.params, &x)?;
        Ok(out.remove(0))
    }

    /// Realized render inputs for `s`, optionally with the azimuth replaced.
    pub fn scene(&self, s: &Sample, azimuth_deg: Option<f64>) -> Result<Scene> {
        let mut a = self.encode(s)?;
        if let Some(az) = azimuth_deg {
            let r = az.to_radians();
            a.camera[0] = r.sin();
            a.camera[1] = r.cos();
        }
        realize_attributes(&self.model.encoder, &a, &s.image, &self.model.template)
    }

    pub fn render_at(&self, s: &Sample, azimuth_deg: Option<f64>) -> Result<RenderedFrame> {
        self.model.renderer.render(&self.scene(s, azimuth_deg)?)
    }

    /// The reconstructed surface of `s` on the template topology.
    pub fn mesh(&self, s: &Sample) -> Result<Mesh> {
        let scene = self.scene(s, None)?;
        Ok(Mesh { vertices: scene.vertices, ..self.model.template.clone() })
    }

    pub fn reconstruct(&self, s: &Sample) -> Result<RenderedFrame> {
        self.render_at(s, None)
    }

    /// Views at each of [`sweep_azimuths`] with everything else held.
    pub fn rotation_sweep(&self, s: &Sample) -> Result<Vec<RenderedFrame>> {
        sweep_azimuths().into_iter().map(|az| self.render_at(s, Some(az))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sample: usize,
    pub iou: f64,
    pub rf_frechet_recon: f64,
    pub rf_frechet_rotation: f64,
}

/// Everything an evaluation run produces.
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub reconstructions: Vec<RenderedFrame>,
    pub sweeps: Vec<Vec<RenderedFrame>>,
}

impl EvalOutput {
    pub fn mean_iou(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.iou))
    }

    pub fn mean_rotation_frechet(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.rf_frechet_rotation))
    }

    pub fn write_report(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.sample, r.iou, r.rf_frechet_recon, r.rf_frechet_rotation)?;
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn frame_image(f: &RenderedFrame) -> Tensor<f64> {
    Tensor::new(&[3, f.height, f.width], f.image.clone())
}

/// Scores every sample of `data`.
///
/// `iou` compares the reconstruction's silhouette with the sample mask.
/// `rf_frechet_recon` is one dataset-level value (all reconstructions
/// against all inputs) repeated on each row, since a single image has no
/// covariance. `rf_frechet_rotation` compares the sample's 12 sweep views
/// with `reference`, the training images.
pub fn evaluate(ev: &Evaluator, data: &[Sample], reference: &[Tensor<f64>]) -> Result<EvalOutput> {
    let mut reconstructions = Vec::with_capacity(data.len());
    let mut sweeps = Vec::with_capacity(data.len());
    let mut ious = Vec::with_capacity(data.len());
    for s in data {
        let r = ev.reconstruct(s)?;
        ious.push(iou_metric(&r.mask, &s.mask)?);
        reconstructions.push(r);
        sweeps.push(ev.rotation_sweep(s)?);
    }
    let recon_images: Vec<Tensor<f64>> = reconstructions.iter().map(frame_image).collect();
    let inputs: Vec<Tensor<f64>> = data.iter().map(|s| s.image.clone()).collect();
    let recon_fd = rf_frechet(&recon_images, &inputs, RF_SEED)?;
    let mut rows = Vec::with_capacity(data.len());
    for (i, sweep) in sweeps.iter().enumerate() {
        let views: Vec<Tensor<f64>> = sweep.iter().map(frame_image).collect();
        rows.push(EvalRow {
            sample: i,
            iou: ious[i],
            rf_frechet_recon: recon_fd,
            rf_frechet_rotation: rf_frechet(&views, reference, RF_SEED)?,
        });
    }
    Ok(EvalOutput { rows, reconstructions, sweeps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn setup() -> (Evaluator, Vec<Sample>) {
        let cfg = TrainConfig { height: 16, width: 16, tex_height: 8, tex_width: 8, ..Default::default() };
        let model = Model::new(&cfg).unwrap();
        let state = model.init_state(&cfg);
        let [first, _] = state.models;
        let scfg = SyntheticConfig { height: 16, width: 16, tex_height: 8, tex_width: 8, ..Default::default() };
        (Evaluator::new(cfg, first).unwrap(), gen_synthetic(0, 3, 2, &scfg).unwrap())
    }

    #[test]
    fn sweep_has_twelve_ordered_views() {
        let (ev, data) = setup();
        let views = ev.rotation_sweep(&data[0]).unwrap();
        assert_eq!(views.len(), 12);
        // the untrained model sits at the centre of the view; every view
        // still shows the sphere
        assert!(views.iter().all(|v| v.mask_sum() > 0.0));
        // a sphere seen from opposite sides has the same outline
        let a = &views[0].mask;
        let b = &views[6].mask;
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(diff < 0.05, "{diff}");
    }

    #[test]
    fn override_to_own_azimuth_is_identity() {
        let (ev, data) = setup();
        let a = ev.encode(&data[1]).unwrap();
        let own = crate::geometry::CameraRaw::from_slice(&a.camera).azimuth_deg();
        let base = ev.reconstruct(&data[1]).unwrap();
        let over = ev.render_at(&data[1], Some(own)).unwrap();
        for (x, y) in base.image.iter().chain(&base.mask).zip(over.image.iter().chain(&over.mask)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn report_shape() {
        let (ev, data) = setup();
        let refs: Vec<Tensor<f64>> = data.iter().map(|s| s.image.clone()).collect();
        let out = evaluate(&ev, &data, &refs).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows.iter().all(|r| (0.0..=1.0).contains(&r.iou) && r.rf_frechet_rotation >= 0.0));
        assert!(out.rows.iter().all(|r| r.rf_frechet_recon == out.rows[0].rf_frechet_recon));
        let mut buf = Vec::new();
        out.write_report(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
    }

    #[test]
    fn rejects_wrong_resolution() {
        let (ev, _) = setup();
        let big = gen_synthetic(0, 1, 1, &SyntheticConfig::default()).unwrap();
        assert!(matches!(ev.encode(&big[0]), Err(Error::Dataset(_))));
    }
}
