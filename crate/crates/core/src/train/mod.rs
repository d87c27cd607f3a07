//! Dual-model training: paired batches, novel-view synthesis, Adam.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainConfig;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{iou_metric, Sample};
use crate::encoders::{EncodedVars, Encoder, LandmarkClassifier, ParamStore, RealizedVars};
use crate::error::{Error, Result};
use crate::geometry::{camera_matrices, icosphere, project, visibility, CameraRaw, Mesh, ProjectOp};
use crate::losses::{cycle_3d, interpolate_vars, landmark_consistency, loss_2d, total_loss, ModelTerms};
use crate::render::Renderer;
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

pub const METRICS_HEADER: &str =
    "iter,loss_total,loss_img_1,loss_sil_1,loss_3d_1,loss_lc_1,loss_img_2,loss_sil_2,loss_3d_2,loss_lc_2,train_iou";

/// Adam moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let z: Vec<Tensor<f32>> = store.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Adam { m: z.clone(), v: z, step: 0 }
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<&Tensor<f32>>], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - (cfg.beta1).powi(self.step as i32);
        let c2 = 1.0 - (cfg.beta2).powi(self.step as i32);
        let lr = (cfg.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (cfg.epsilon * c2.sqrt()) as f32;
        for (k, p) in store.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let g = grads[k];
            for i in 0..p.data.len() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Parameters and optimizer state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub iteration: usize,
    pub models: [ParamStore<f32>; 2],
    pub classifier: ParamStore<f32>,
    /// Moments for model 1, model 2 and the classifier.
    pub adam: [Adam; 3],
}

/// Raw loss terms of one step, per model.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub total: f64,
    pub img: [f64; 2],
    pub sil: [f64; 2],
    pub cycle: [f64; 2],
    pub landmark: [f64; 2],
    pub train_iou: f64,
}

impl StepReport {
    /// The six weighted-sum inputs: 2D, 3D and landmark terms per model.
    pub fn named_terms(&self, cfg: &TrainConfig) -> [(&'static str, f64); 6] {
        let l2d = |m: usize| cfg.weights.img * self.img[m] + cfg.weights.sil * self.sil[m];
        [
            ("loss_2d_1", l2d(0)),
            ("loss_3d_1", self.cycle[0]),
            ("loss_lc_1", self.landmark[0]),
            ("loss_2d_2", l2d(1)),
            ("loss_3d_2", self.cycle[1]),
            ("loss_lc_2", self.landmark[1]),
        ]
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.total,
            self.img[0],
            self.sil[0],
            self.cycle[0],
            self.landmark[0],
            self.img[1],
            self.sil[1],
            self.cycle[1],
            self.landmark[1],
            self.train_iou
        )
    }
}

/// Model topology shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct Model {
    pub template: Mesh,
    pub encoder: Encoder,
    pub classifier: LandmarkClassifier,
    pub renderer: Renderer,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let template = icosphere(cfg.icosphere_level)?;
        let v = template.num_vertices();
        Ok(Model {
            encoder: Encoder::new(cfg.encoder_config(v)),
            classifier: LandmarkClassifier::new(v),
            renderer: Renderer::new(&template, cfg.render_config()),
            template,
        })
    }

    /// Fresh state. The two models draw from distinct seeds.
    pub fn init_state(&self, cfg: &TrainConfig) -> TrainState {
        let s = cfg.seed.wrapping_mul(3);
        let models = [self.encoder.init(s.wrapping_add(1)), self.encoder.init(s.wrapping_add(2))];
        let classifier = self.classifier.init(s.wrapping_add(3));
        let adam = [Adam::new(&models[0]), Adam::new(&models[1]), Adam::new(&classifier)];
        TrainState { iteration: 0, models, classifier, adam }
    }

    /// Renders realized inputs on the tape as `[1, 4, H, W]`.
    fn render_row<T: Real>(&self, tape: &Tape<T>, r: &RealizedVars) -> Result<Var> {
        let out = self.renderer.render_var(tape, r.camera, r.light, r.vertices, r.texture)?;
        let c = &self.renderer.cfg;
        tape.reshape(out, &[1, 4, c.height, c.width])
    }

    /// Visibility of every vertex of realized inputs.
    fn visible<T: Real>(&self, tape: &Tape<T>, r: &RealizedVars) -> Vec<bool> {
        let cam = tape.value(r.camera).to_f64();
        let verts = tape.value(r.vertices).to_f64();
        let mesh = Mesh {
            vertices: verts.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            faces: self.template.faces.clone(),
            uv: self.template.uv.clone(),
        };
        let c = &self.renderer.cfg;
        camera_matrices(&CameraRaw::from_slice(&cam), c.height, c.width, c.fov_deg)
            .and_then(|m| visibility(&mesh, &m))
            // a collapsed face has no normal; treat the view as fully occluded
            .unwrap_or_else(|_| vec![false; mesh.num_vertices()])
    }
}

fn rows<T: Real>(tape: &Tape<T>, e: &EncodedVars, start: usize, len: usize) -> Result<EncodedVars> {
    let p = e.parts();
    let mut out = [p[0]; 4];
    for k in 0..4 {
        out[k] = tape.slice(p[k], 0, start, len)?;
    }
    Ok(EncodedVars::from_parts(out))
}

fn image_of<T: Real>(s: &Sample) -> Tensor<T> {
    s.image.cast()
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    /// Models whose parameters are held fixed.
    pub frozen: [bool; 2],
    data: Vec<Sample>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        let model = Model::new(&cfg)?;
        let state = model.init_state(&cfg);
        Self::with_state(cfg, data, model, state)
    }

    pub fn resume(cfg: TrainConfig, data: Vec<Sample>, state: TrainState) -> Result<Self> {
        let model = Model::new(&cfg)?;
        Self::with_state(cfg, data, model, state)
    }

    fn with_state(cfg: TrainConfig, data: Vec<Sample>, model: Model, state: TrainState) -> Result<Self> {
        let need = 2 * cfg.batch_size;
        if data.len() < need {
            return Err(Error::DatasetTooSmall { have: data.len(), need });
        }
        for (i, s) in data.iter().enumerate() {
            if s.height() != cfg.height || s.width() != cfg.width {
                return Err(Error::Dataset(format!(
                    "sample {i} is {}x{}, config expects {}x{}",
                    s.height(),
                    s.width(),
                    cfg.height,
                    cfg.width
                )));
            }
        }
        Ok(Trainer { cfg, model, state, frozen: [false; 2], data })
    }

    pub fn data(&self) -> &[Sample] {
        &self.data
    }

    /// Index sets `(i, j)` of step `t`: consecutive batches of an epoch's
    /// seeded shuffle, wrapping at the end of the epoch.
    pub fn batches(&self, t: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.cfg.batch_size;
        let per_epoch = self.data.len() / n;
        let (epoch, b) = (t / per_epoch, t % per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 << 40 | epoch as u64);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let next = (b + 1) % per_epoch;
        (order[b * n..(b + 1) * n].to_vec(), order[next * n..(next + 1) * n].to_vec())
    }

    /// Mixing weights `(alpha1, alpha2)` per sample of step `t`.
    pub fn alphas(&self, t: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(t as u64);
        (0..self.cfg.batch_size).map(|_| (rng.gen(), rng.gen())).collect()
    }

    /// Binds the current parameters and records step `t`.
    fn build(&self, tape: &Tape<f32>, t: usize) -> Result<(Var, [Vec<Var>; 3], StepReport)> {
        let st = &self.state;
        let p = [
            st.models[0].bind(tape, !self.frozen[0]),
            st.models[1].bind(tape, !self.frozen[1]),
            st.classifier.bind(tape, true),
        ];
        let (total, report) = self.objective(tape, t, &p)?;
        Ok((total, p, report))
    }

    /// Records the full objective of step `t` on `tape` given bound
    /// parameters of model 1, model 2 and the classifier.
    pub fn objective<T: Real>(&self, tape: &Tape<T>, t: usize, p: &[Vec<Var>; 3]) -> Result<(Var, StepReport)> {
        let cfg = &self.cfg;
        let model = &self.model;
        let n = cfg.batch_size;
        let (h, w) = (cfg.height, cfg.width);
        let (bi, bj) = self.batches(t);
        let alphas = self.alphas(t);

        let samples: Vec<&Sample> = bi.iter().chain(&bj).map(|&k| &self.data[k]).collect();
        let x = tape.constant(crate::data::batch(&samples).cast());
        let x_i = tape.slice(x, 0, 0, n)?;
        let images: Vec<Var> = samples[..n].iter().map(|s| tape.constant(image_of(s))).collect();
        let blends: Vec<Var> = (0..n)
            .map(|s| {
                let (a, b) = (image_of::<T>(samples[s]), image_of(samples[n + s]));
                let d = a.data.iter().zip(&b.data).map(|(&x, &y)| T::c(0.5) * (x + y)).collect();
                tape.constant(Tensor::new(&a.shape, d))
            })
            .collect();

        // both models on both batches
        let mut enc_i = Vec::with_capacity(2);
        let mut enc_j = Vec::with_capacity(2);
        for pm in &p[..2] {
            let e = model.encoder.encode(tape, pm, x)?;
            enc_i.push(rows(tape, &e, 0, n)?);
            enc_j.push(rows(tape, &e, n, n)?);
        }

        // reconstructions of the i batch
        let mut recon = Vec::with_capacity(2);
        let mut realized = Vec::with_capacity(2);
        let mut l2d = Vec::with_capacity(2);
        let mut parts2d = Vec::with_capacity(2);
        for m in 0..2 {
            let mut frames = Vec::with_capacity(n);
            let mut reals = Vec::with_capacity(n);
            for s in 0..n {
                let r = model.encoder.realize(tape, &enc_i[m].row(tape, s)?, images[s], &model.template)?;
                frames.push(model.render_row(tape, &r)?);
                reals.push(r);
            }
            let frames = tape.concat(&frames, 0)?;
            let (l, img, sil) = loss_2d(tape, x_i, frames, &cfg.weights)?;
            l2d.push(l);
            parts2d.push((img, sil));
            recon.push(frames);
            realized.push(reals);
        }

        // synthesized views
        let a_ij = interpolate_vars(tape, [&enc_i[0], &enc_i[1], &enc_j[0], &enc_j[1]], &alphas)?;
        let mut novel = Vec::with_capacity(n);
        for s in 0..n {
            let r = model.encoder.realize(tape, &a_ij.row(tape, s)?, blends[s], &model.template)?;
            novel.push(model.render_row(tape, &r)?);
        }
        let novel = tape.concat(&novel, 0)?;

        let mut terms = Vec::with_capacity(2);
        let mut report = StepReport {
            iter: t,
            total: 0.0,
            img: [0.0; 2],
            sil: [0.0; 2],
            cycle: [0.0; 2],
            landmark: [0.0; 2],
            train_iou: 0.0,
        };
        let vn = model.template.num_vertices();
        for m in 0..2 {
            let coder = if cfg.cross_model_cycle { 1 - m } else { m };
            let re = model.encoder.encode(tape, &p[coder], novel)?;
            let l3d = cycle_3d(tape, &re, &a_ij)?;

            let feats = model.classifier.feature_map(tape, &p[2], recon[m], novel)?;
            let cf = model.classifier.feature_channels();
            let mut lc: Option<Var> = None;
            for s in 0..n {
                let r = &realized[m][s];
                let f = tape.slice(feats, 0, s, 1)?;
                let f = tape.reshape(f, &[cf, h, w])?;
                let op = ProjectOp { height: h, width: w, fov_deg: cfg.fov_deg };
                let proj = project(tape, r.camera, r.vertices, op)?;
                let marks = tape.slice(proj, 1, 0, 2)?;
                let logits = model.classifier.pool_and_classify(tape, &p[2], f, marks)?;
                let vis = model.visible(tape, r);
                debug_assert_eq!(vis.len(), vn);
                let l = landmark_consistency(tape, logits, &vis, n)?;
                lc = Some(match lc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            let lc = lc.unwrap();
            report.img[m] = tape.item(parts2d[m].0).f64();
            report.sil[m] = tape.item(parts2d[m].1).f64();
            report.cycle[m] = tape.item(l3d).f64();
            report.landmark[m] = tape.item(lc).f64();
            terms.push(ModelTerms { l2d: l2d[m], l3d, lc });
        }
        let total = total_loss(tape, &terms[0], &terms[1], &cfg.weights)?;
        report.total = tape.item(total).f64();

        let mut iou = 0.0;
        for frames in &recon {
            let v = tape.value(*frames);
            for s in 0..n {
                let plane = &v.data[(s * 4 + 3) * h * w..(s * 4 + 4) * h * w];
                let rendered: Vec<f64> = plane.iter().map(|&x| x.f64()).collect();
                iou += iou_metric(&rendered, &samples[s].mask)?;
            }
        }
        report.train_iou = iou / (2 * n) as f64;
        Ok((total, report))
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepReport> {
        let t = self.state.iteration;
        let tape = Tape::new();
        let (total, p, report) = self.build(&tape, t)?;
        if !report.total.is_finite() {
            let breakdown = report
                .named_terms(&self.cfg)
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::Diverged { iter: t, breakdown });
        }
        let grads = tape.backward(total)?;
        let cfg = &self.cfg;
        let st = &mut self.state;
        for m in 0..2 {
            if !self.frozen[m] {
                st.adam[m].update(&mut st.models[m], &collect(&grads, &p[m]), cfg);
            }
        }
        st.adam[2].update(&mut st.classifier, &collect(&grads, &p[2]), cfg);
        st.iteration += 1;
        Ok(report)
    }

    /// Runs until `until` steps are complete. A metrics row is written
    /// before every step whose index is a multiple of the metrics interval;
    /// checkpoints go to `ckpt_dir` every checkpoint interval.
    pub fn run(&mut self, until: usize, metrics: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while self.state.iteration < until {
            let r = self.step()?;
            if r.iter % self.cfg.metrics_interval == 0 {
                writeln!(metrics, "{}", r.csv_row()).map_err(|e| Error::io("metrics", e))?;
                out.push(r);
            }
            let done = self.state.iteration;
            if let Some(dir) = ckpt_dir {
                let ci = self.cfg.checkpoint_interval;
                if (ci > 0 && done % ci == 0) || done == until {
                    save_checkpoint(&dir.join(format!("ckpt_{done:06}.bin")), &self.cfg, &self.state)?;
                }
            }
        }
        Ok(out)
    }
}

fn collect<'a>(g: &'a Gradients<f32>, vars: &[Var]) -> Vec<Option<&'a Tensor<f32>>> {
    vars.iter().map(|&v| g.get(v)).collect()
}

/// Trains from scratch for `cfg.iterations` steps, writing the metrics
/// CSV (with header) and checkpoints.
pub fn fit(data: Vec<Sample>, cfg: &TrainConfig, metrics: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<Trainer> {
    let mut tr = Trainer::new(cfg.clone(), data)?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    tr.run(cfg.iterations, metrics, ckpt_dir)?;
    Ok(tr)
}
