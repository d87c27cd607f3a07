//! Finite-difference verification of the hand-written gradients, as run by
//! the `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_synthetic, SyntheticConfig};
use crate::error::Result;
use crate::geometry::icosphere;
use crate::losses::{image_l1, silhouette_iou_loss};
use crate::render::{ambient_light, RenderConfig, Renderer};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::train::{TrainConfig, Trainer};

/// Relative error every check must stay under.
pub const TOLERANCE: f64 = 1e-2;

const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, max_rel_error: f64, failures: usize) -> Self {
        Check { name: name.into(), max_rel_error, passed: failures == 0 && max_rel_error < TOLERANCE }
    }
}

/// Render output against camera, light, vertices and texels of a perturbed
/// level-0 icosphere at 16x16, for three random points.
pub fn renderer_checks() -> Result<Vec<Check>> {
    let mesh = icosphere(0)?;
    let r = Renderer::new(&mesh, RenderConfig::with_size(16, 16).soft(1e-2, 1e-2));
    let names = ["renderer/camera", "renderer/light", "renderer/vertices", "renderer/texture"];
    let mut worst = [0.0f64; 4];
    let mut failures = [0usize; 4];
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut light = ambient_light(0.7).to_vec();
        light.iter_mut().skip(1).for_each(|l| *l = 0.2 * (rng.gen::<f64>() - 0.5));
        let verts: Vec<f64> =
            mesh.vertices.iter().flat_map(|v| v.map(|c| c * (1.0 + 0.1 * rng.gen::<f64>()))).collect();
        let tex: Vec<f64> = (0..4 * 4 * 3).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect();
        let weights: Vec<f64> = (0..4 * 16 * 16).map(|_| rng.gen()).collect();
        let point = [
            Tensor::new(&[4], vec![0.4, 0.9, 12.0, 3.0]),
            Tensor::new(&[9], light),
            Tensor::new(&[mesh.num_vertices(), 3], verts),
            Tensor::new(&[4, 4, 3], tex),
        ];
        let report = grad_check(
            |t, v| {
                let out = r.render_var(t, v[0], v[1], v[2], v[3])?;
                let w = t.constant(Tensor::new(&[4, 16, 16], weights.clone()));
                let prod = t.mul(out, w)?;
                Ok(t.sum(prod))
            },
            &point,
            EPS,
            None,
        )?;
        for (k, p) in report.params.iter().enumerate() {
            worst[k] = worst[k].max(p.max_rel_error);
        }
        for &(p, _) in &report.non_finite {
            failures[p] += 1;
        }
    }
    Ok((0..4).map(|k| Check::new(names[k], worst[k], failures[k])).collect())
}

/// The 2D losses against a rendered frame, and the full dual-model
/// objective against 50 random encoder parameters on a 16x16 setup.
pub fn loss_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, h, w) = (2, 6, 5);
    let mut input: Vec<f64> = (0..n * 4 * h * w).map(|_| rng.gen()).collect();
    for s in 0..n {
        for p in 0..h * w {
            input[(s * 4 + 3) * h * w + p] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
    let input = Tensor::new(&[n, 4, h, w], input);
    let rendered = Tensor::new(&[n, 4, h, w], (0..n * 4 * h * w).map(|_| 0.05 + 0.9 * rng.gen::<f64>()).collect());
    type LossFn = fn(&Tape<f64>, Var, Var) -> Result<Var>;
    let losses: [(&str, LossFn); 2] = [("losses/image_l1", image_l1), ("losses/silhouette_iou", silhouette_iou_loss)];
    for (name, f) in losses {
        let report = grad_check(
            |t, v| {
                let x = t.constant(input.clone());
                f(t, x, v[0])
            },
            std::slice::from_ref(&rendered),
            EPS,
            None,
        )?;
        out.push(Check::new(name, report.max_rel_error(), report.non_finite.len()));
    }
    out.push(total_loss_check()?);
    Ok(out)
}

fn total_loss_check() -> Result<Check> {
    let cfg = TrainConfig {
        height: 16,
        width: 16,
        tex_height: 8,
        tex_width: 8,
        batch_size: 2,
        sigma: 1e-2,
        gamma: 1e-2,
        ..Default::default()
    };
    let scfg = SyntheticConfig { height: 16, width: 16, tex_height: 8, tex_width: 8, ..Default::default() };
    let tr = Trainer::new(cfg, gen_synthetic(0, 4, 5, &scfg)?)?;
    let stores = [&tr.state.models[0], &tr.state.models[1], &tr.state.classifier];
    let mut point: Vec<Tensor<f64>> = stores.iter().flat_map(|s| s.tensors.iter().map(|t| t.cast())).collect();
    let counts = stores.map(|s| s.len());
    let enc = counts[0] + counts[1];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Zero biases over a black background put many ReLU inputs exactly on
    // the kink, where central differences are meaningless. Move off it.
    for t in point.iter_mut().filter(|t| t.shape.len() == 1) {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    let mut subset = vec![Vec::new(); point.len()];
    for _ in 0..50 {
        let p = rng.gen_range(0..enc);
        subset[p].push(rng.gen_range(0..point[p].len()));
    }
    let report = grad_check(
        |tape, vars| {
            let p = [vars[..counts[0]].to_vec(), vars[counts[0]..enc].to_vec(), vars[enc..].to_vec()];
            Ok(tr.objective(tape, 0, &p)?.0)
        },
        &point,
        EPS,
        Some(&subset),
    )?;
    Ok(Check::new("losses/total", report.max_rel_error(), report.non_finite.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_suite_passes() {
        let checks = loss_checks().unwrap();
        assert_eq!(checks.len(), 3);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
