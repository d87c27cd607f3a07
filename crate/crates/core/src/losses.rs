//! Training objectives over tape values.
//!
//! Frames are `[N, 4, H, W]`: three color planes followed by the mask.

use crate::encoders::EncodedVars;
use crate::error::{Error, Result};
use crate::render::Attributes;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Guard added to both sides of the IoU ratio.
pub const IOU_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub img: f64,
    pub sil: f64,
    pub d2: f64,
    pub d3: f64,
    pub lc: f64,
}

/// The image term is a per-sample sum over `3 * H * W` values and runs to
/// hundreds at 64x64, while the IoU term lies in `[0, 1]`. The default
/// `img` weight brings the two to the same scale; at 1.0 the optimizer
/// trades the silhouette away for texture.
impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { img: 1e-3, sil: 1.0, d2: 1.0, d3: 0.1, lc: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("img", self.img), ("sil", self.sil), ("2d", self.d2), ("3d", self.d3), ("lc", self.lc)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn frame_dims<T: Real>(tape: &Tape<T>, x: Var, r: Var, op: &'static str) -> Result<[usize; 4]> {
    let (sx, sr) = (tape.shape(x), tape.shape(r));
    if sx.len() != 4 || sx != sr || sx[1] != 4 {
        return Err(Error::shape(op, format!("input {sx:?}, rendered {sr:?}")));
    }
    Ok([sx[0], sx[1], sx[2], sx[3]])
}

fn premultiplied<T: Real>(tape: &Tape<T>, x: Var, dims: [usize; 4]) -> Result<Var> {
    let [n, _, h, w] = dims;
    let rgb = tape.slice(x, 1, 0, 3)?;
    let m = tape.slice(x, 1, 3, 1)?;
    let m = tape.broadcast(m, &[n, 3, h, w])?;
    tape.mul(rgb, m)
}

/// `(1/N) sum |I*M - Ir*Mr|` over pixels and channels.
pub fn image_l1<T: Real>(tape: &Tape<T>, input: Var, rendered: Var) -> Result<Var> {
    let dims = frame_dims(tape, input, rendered, "image_l1")?;
    let a = premultiplied(tape, input, dims)?;
    let b = premultiplied(tape, rendered, dims)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, 1.0 / dims[0] as f64))
}

/// Per-sample row sums of `[N, K]`, as `[N, 1]`.
fn row_sums<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let k = tape.shape(x)[1];
    let ones = tape.constant(Tensor::full(&[k, 1], T::one()));
    tape.matmul(x, ones)
}

/// `mean_n (1 - |M*Mr| / |M + Mr - M*Mr|)`, with [`IOU_EPS`] added to both
/// norms so two empty masks score 0.
pub fn silhouette_iou_loss<T: Real>(tape: &Tape<T>, input: Var, rendered: Var) -> Result<Var> {
    let [n, _, h, w] = frame_dims(tape, input, rendered, "silhouette_iou_loss")?;
    let m = tape.slice(input, 1, 3, 1)?;
    let m = tape.reshape(m, &[n, h * w])?;
    let mr = tape.slice(rendered, 1, 3, 1)?;
    let mr = tape.reshape(mr, &[n, h * w])?;
    let prod = tape.mul(m, mr)?;
    let sum = tape.add(m, mr)?;
    let uni = tape.sub(sum, prod)?;
    let inter = row_sums(tape, prod)?;
    let inter = tape.affine(inter, 1.0, IOU_EPS);
    let uni = row_sums(tape, uni)?;
    let uni = tape.affine(uni, 1.0, IOU_EPS);
    let ratio = tape.div(inter, uni)?;
    let l = tape.affine(ratio, -1.0, 1.0);
    Ok(tape.mean(l))
}

/// `w.img * image_l1 + w.sil * silhouette_iou_loss`, with both parts.
pub fn loss_2d<T: Real>(tape: &Tape<T>, input: Var, rendered: Var, w: &LossWeights) -> Result<(Var, Var, Var)> {
    let img = image_l1(tape, input, rendered)?;
    let sil = silhouette_iou_loss(tape, input, rendered)?;
    let a = tape.scale(img, w.img);
    let b = tape.scale(sil, w.sil);
    Ok((tape.add(a, b)?, img, sil))
}

/// Mixing coefficients of the four attribute sets `(a_i1, a_i2, a_j1, a_j2)`.
pub fn mix_coefficients(alpha1: f64, alpha2: f64) -> [f64; 4] {
    [0.5 * (1.0 - alpha1), 0.5 * (1.0 - alpha2), 0.5 * alpha1, 0.5 * alpha2]
}

/// Novel-view attributes from two models' predictions on images `i` and
/// `j`, mixing componentwise in raw space.
pub fn interpolate(a_i1: &Attributes, a_i2: &Attributes, a_j1: &Attributes, a_j2: &Attributes, alpha1: f64, alpha2: f64) -> Result<Attributes> {
    let all = [a_i1, a_i2, a_j1, a_j2];
    for a in &all[1..] {
        if a.shape_delta.len() != a_i1.shape_delta.len() || a.texture_flow.shape != a_i1.texture_flow.shape {
            return Err(Error::Invalid("interpolate: attribute configurations differ".into()));
        }
    }
    let c = mix_coefficients(alpha1, alpha2);
    let mix = |get: &dyn Fn(&Attributes) -> Vec<f64>| -> Vec<f64> {
        let parts: Vec<Vec<f64>> = all.iter().map(|a| get(a)).collect();
        (0..parts[0].len()).map(|k| (0..4).map(|s| c[s] * parts[s][k]).sum()).collect()
    };
    let camera = mix(&|a| a.camera.to_vec());
    let light = mix(&|a| a.light.to_vec());
    let shape = mix(&|a| a.shape_delta.iter().flatten().copied().collect());
    let flow = mix(&|a| a.texture_flow.data.clone());
    Ok(Attributes {
        camera: std::array::from_fn(|i| camera[i]),
        light: std::array::from_fn(|i| light[i]),
        shape_delta: shape.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        texture_flow: Tensor::new(&a_i1.texture_flow.shape, flow),
    })
}

/// Tape version of [`interpolate`] over batched raw outputs. `alphas`
/// holds one `(alpha1, alpha2)` pair per row.
pub fn interpolate_vars<T: Real>(
    tape: &Tape<T>,
    sets: [&EncodedVars; 4],
    alphas: &[(f64, f64)],
) -> Result<EncodedVars> {
    let n = alphas.len();
    let mut out = Vec::with_capacity(4);
    for comp in 0..4 {
        let parts = sets.map(|s| s.parts()[comp]);
        let dim = tape.shape(parts[0])[1];
        let mut acc: Option<Var> = None;
        for (s, &p) in parts.iter().enumerate() {
            let coef: Vec<f64> = alphas.iter().map(|&(a1, a2)| mix_coefficients(a1, a2)[s]).collect();
            let c = tape.constant(Tensor::from_f64(&[n, 1], &coef));
            let c = tape.broadcast(c, &[n, dim])?;
            let term = tape.mul(p, c)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        out.push(acc.unwrap());
    }
    Ok(EncodedVars::from_parts([out[0], out[1], out[2], out[3]]))
}

/// `sum_c mean |a_hat_c - a_c|` over camera, light, shape and flow, i.e.
/// per-sample L1 normalized by component size, averaged over the batch.
pub fn cycle_3d<T: Real>(tape: &Tape<T>, reencoded: &EncodedVars, target: &EncodedVars) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (a, b) in reencoded.parts().into_iter().zip(target.parts()) {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        let m = tape.mean(d);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.unwrap())
}

/// Cross-entropy of landmark `k` against class `k` over visible rows,
/// scaled by `1 / batch`.
pub fn landmark_consistency<T: Real>(tape: &Tape<T>, logits: Var, visible: &[bool], batch: usize) -> Result<Var> {
    let v = visible.len();
    let targets: Vec<usize> = (0..v).collect();
    let w: Vec<f64> = visible.iter().map(|&b| if b { 1.0 / batch as f64 } else { 0.0 }).collect();
    tape.softmax_cross_entropy(logits, &targets, &w)
}

/// One model's share of the objective.
#[derive(Clone, Copy, Debug)]
pub struct ModelTerms {
    pub l2d: Var,
    pub l3d: Var,
    pub lc: Var,
}

/// `0.5 (w2d L2d + w3d L3d + wlc Llc)` summed over both models.
pub fn total_loss<T: Real>(tape: &Tape<T>, m1: &ModelTerms, m2: &ModelTerms, w: &LossWeights) -> Result<Var> {
    let one = |m: &ModelTerms| -> Result<Var> {
        let a = tape.scale(m.l2d, w.d2);
        let b = tape.scale(m.l3d, w.d3);
        let c = tape.scale(m.lc, w.lc);
        let s = tape.add(a, b)?;
        tape.add(s, c)
    };
    let s = tape.add(one(m1)?, one(m2)?)?;
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(n: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::new(&[n, 4, h, w], (0..n * 4 * h * w).map(f).collect())
    }

    fn eval2(f: impl Fn(&Tape<f64>, Var, Var) -> Result<Var>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        t.item(f(&t, va, vb).unwrap())
    }

    fn masks(a: &[f64], b: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        let n = a.len();
        let mk = |m: &[f64]| {
            let mut d = vec![0.5; 3 * n];
            d.extend_from_slice(m);
            Tensor::new(&[1, 4, 1, n], d)
        };
        (mk(a), mk(b))
    }

    #[test]
    fn image_l1_cases() {
        let x = frame(2, 3, 3, |i| (i % 7) as f64 / 7.0);
        assert_eq!(eval2(image_l1, &x, &x), 0.0);
        let ones = frame(2, 3, 3, |_| 1.0);
        let zero_img = frame(2, 3, 3, |i| if (i / 9) % 4 == 3 { 0.4 } else { 0.0 });
        assert!((eval2(image_l1, &ones, &zero_img) - 27.0).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_cases() {
        let (a, b) = masks(&[1., 1., 0., 1.], &[1., 1., 0., 1.]);
        assert_eq!(eval2(silhouette_iou_loss, &a, &b), 0.0);
        let (a, b) = masks(&[1., 1., 0., 0.], &[0., 0., 1., 1.]);
        assert!((eval2(silhouette_iou_loss, &a, &b) - 1.0).abs() < 1e-6);
        let (a, b) = masks(&[1., 1., 1., 1., 0., 0.], &[0., 0., 1., 1., 1., 1.]);
        assert!((eval2(silhouette_iou_loss, &a, &b) - 2.0 / 3.0).abs() < 1e-6);
        let (a, b) = masks(&[0.; 4], &[0.; 4]);
        assert_eq!(eval2(silhouette_iou_loss, &a, &b), 0.0);
    }

    #[test]
    fn loss_2d_weights() {
        let a = frame(1, 4, 4, |i| ((i * 37) % 11) as f64 / 11.0);
        let b = frame(1, 4, 4, |i| ((i * 13) % 5) as f64 / 5.0);
        let w = LossWeights { img: 0.0, sil: 0.7, ..Default::default() };
        let t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let (l, _, sil) = loss_2d(&t, va, vb, &w).unwrap();
        assert_eq!(t.item(l), 0.7 * t.item(sil));
        assert!(t.item(l) >= 0.0);
    }

    fn attrs(seed: u64) -> Attributes {
        let f = |k: u64| ((seed * 31 + k * 17) % 23) as f64 / 23.0 - 0.4;
        Attributes {
            camera: std::array::from_fn(|i| f(i as u64)),
            light: std::array::from_fn(|i| f(10 + i as u64)),
            shape_delta: (0..5).map(|v| std::array::from_fn(|a| f(30 + 3 * v + a as u64))).collect(),
            texture_flow: Tensor::new(&[2, 2, 2], (0..8).map(|k| f(60 + k)).collect()),
        }
    }

    fn close(a: &Attributes, b: &Attributes, tol: f64) -> bool {
        let flat = |x: &Attributes| -> Vec<f64> {
            x.camera
                .iter()
                .chain(&x.light)
                .chain(x.shape_delta.iter().flatten())
                .chain(&x.texture_flow.data)
                .copied()
                .collect()
        };
        flat(a).iter().zip(flat(b)).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn lerp(p: &Attributes, q: &Attributes, t: f64) -> Attributes {
        let l = |a: f64, b: f64| (1.0 - t) * a + t * b;
        Attributes {
            camera: std::array::from_fn(|i| l(p.camera[i], q.camera[i])),
            light: std::array::from_fn(|i| l(p.light[i], q.light[i])),
            shape_delta: p.shape_delta.iter().zip(&q.shape_delta).map(|(a, b)| std::array::from_fn(|i| l(a[i], b[i]))).collect(),
            texture_flow: Tensor::new(
                &p.texture_flow.shape,
                p.texture_flow.data.iter().zip(&q.texture_flow.data).map(|(a, b)| l(*a, *b)).collect(),
            ),
        }
    }

    #[test]
    fn interpolation_endpoints_and_fixed_point() {
        let (i1, i2, j1, j2) = (attrs(1), attrs(2), attrs(3), attrs(4));
        let half = |a: &Attributes, b: &Attributes| interpolate(a, b, a, b, 0.0, 0.0).unwrap();
        let at0 = interpolate(&i1, &i2, &j1, &j2, 0.0, 0.0).unwrap();
        assert!(close(&at0, &half(&i1, &i2), 0.0));
        let at1 = interpolate(&i1, &i2, &j1, &j2, 1.0, 1.0).unwrap();
        assert!(close(&at1, &half(&j1, &j2), 0.0));
        assert_eq!(at0.camera[0], 0.5 * (i1.camera[0] + i2.camera[0]));
        assert_eq!(at1.light[3], 0.5 * (j1.light[3] + j2.light[3]));
        let a = attrs(5);
        assert!(close(&interpolate(&a, &a, &a, &a, 0.3, 0.8).unwrap(), &a, 1e-15));
        let mut bad = attrs(6);
        bad.shape_delta.pop();
        assert!(interpolate(&a, &bad, &a, &a, 0.1, 0.1).is_err());
    }

    #[test]
    fn tape_interpolation_matches_values() {
        let sets = [attrs(1), attrs(2), attrs(3), attrs(4)];
        let t = Tape::<f64>::new();
        let rows: Vec<EncodedVars> = sets.iter().map(|a| crate::encoders::attributes_row(&t, a)).collect();
        let out = interpolate_vars(&t, [&rows[0], &rows[1], &rows[2], &rows[3]], &[(0.25, 0.6)]).unwrap();
        let want = interpolate(&sets[0], &sets[1], &sets[2], &sets[3], 0.25, 0.6).unwrap();
        let got = t.value(out.shape).data.clone();
        let w: Vec<f64> = want.shape_delta.iter().flatten().copied().collect();
        for (g, w) in got.iter().zip(w) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!((t.value(out.camera).data[2] - want.camera[2]).abs() < 1e-15);
    }

    #[test]
    fn cycle_oracle_and_symmetry() {
        let t = Tape::<f64>::new();
        let (a, b) = (crate::encoders::attributes_row(&t, &attrs(1)), crate::encoders::attributes_row(&t, &attrs(2)));
        assert_eq!(t.item(cycle_3d(&t, &a, &a).unwrap()), 0.0);
        let ab = t.item(cycle_3d(&t, &a, &b).unwrap());
        assert_eq!(ab, t.item(cycle_3d(&t, &b, &a).unwrap()));
        // each component contributes its mean absolute difference
        let (x, y) = (attrs(1), attrs(2));
        let m = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let s = |a: &Attributes| a.shape_delta.iter().flatten().copied().collect::<Vec<_>>();
        let want = m(&x.camera, &y.camera) + m(&x.light, &y.light) + m(&s(&x), &s(&y)) + m(&x.texture_flow.data, &y.texture_flow.data);
        assert!((ab - want).abs() < 1e-12);
    }

    fn lc(logits: Vec<f64>, vis: &[bool]) -> f64 {
        let v = vis.len();
        let t = Tape::new();
        let l = t.constant(Tensor::new(&[v, v], logits));
        t.item(landmark_consistency(&t, l, vis, 1).unwrap())
    }

    #[test]
    fn landmark_cases() {
        let v = 42;
        let uniform = lc(vec![0.0; v * v], &[true; 42]);
        assert!((uniform / v as f64 - (v as f64).ln()).abs() < 1e-4);
        assert!((uniform - 157.0).abs() < 0.05);
        let hot: Vec<f64> = (0..v * v).map(|i| if i / v == i % v { 1e6 } else { 0.0 }).collect();
        assert!(lc(hot, &[true; 42]) < 1e-9);
        assert_eq!(lc(vec![0.3; v * v], &[false; 42]), 0.0);
    }

    #[test]
    fn total_loss_structure() {
        let t = Tape::<f64>::new();
        let s = |x: f64| t.constant(Tensor::scalar(x));
        let a = ModelTerms { l2d: s(1.5), l3d: s(0.7), lc: s(3.0) };
        let b = ModelTerms { l2d: s(0.2), l3d: s(2.0), lc: s(9.0) };
        let w = LossWeights::default();
        let ab = t.item(total_loss(&t, &a, &b, &w).unwrap());
        assert_eq!(ab, t.item(total_loss(&t, &b, &a, &w).unwrap()));
        let z = ModelTerms { l2d: s(0.0), l3d: s(0.0), lc: s(0.0) };
        assert_eq!(t.item(total_loss(&t, &z, &z, &w).unwrap()), 0.0);
        let w2 = LossWeights { d3: 0.0, lc: 0.0, d2: 2.0, ..w };
        assert!((t.item(total_loss(&t, &a, &b, &w2).unwrap()) - 2.0 * (1.5 + 0.2) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn image_l1_ignores_background(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (5, 6);
            let n = h * w;
            let mut x = frame(2, h, w, |_| 0.0);
            let mut r = frame(2, h, w, |_| 0.0);
            for v in x.data.iter_mut().chain(r.data.iter_mut()) { *v = rng.gen(); }
            for s in 0..2 {
                for p in 0..n {
                    x.data[(s * 4 + 3) * n + p] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                    if rng.gen_bool(0.3) { r.data[(s * 4 + 3) * n + p] = 0.0; }
                }
            }
            let before = eval2(image_l1, &x, &r);
            let (mut x2, mut r2) = (x.clone(), r.clone());
            for s in 0..2 {
                for p in 0..n {
                    for c in 0..3 {
                        if x.data[(s * 4 + 3) * n + p] == 0.0 { x2.data[(s * 4 + c) * n + p] = rng.gen(); }
                        if r.data[(s * 4 + 3) * n + p] == 0.0 { r2.data[(s * 4 + c) * n + p] = rng.gen(); }
                    }
                }
            }
            prop_assert_eq!(before, eval2(image_l1, &x2, &r2));
        }

        #[test]
        fn iou_loss_is_bounded(a in proptest::collection::vec(0u8..2, 12), b in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let (x, r) = masks(&a, &b);
            let l = eval2(silhouette_iou_loss, &x, &r);
            prop_assert!((0.0..=1.0).contains(&l));
            let bin: Vec<f64> = b.iter().map(|v| v.round()).collect();
            let (x, r) = masks(&a, &bin);
            let l = eval2(silhouette_iou_loss, &x, &r);
            prop_assert_eq!(l == 0.0, a == bin);
        }

        #[test]
        fn interpolation_is_affine(a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0, t in -2.0f64..2.0) {
            let (i1, i2, j1, j2, k) = (attrs(1), attrs(2), attrs(3), attrs(4), attrs(7));
            let f = |x: &Attributes| interpolate(x, &i2, &j1, &j2, a1, a2).unwrap();
            let lhs = f(&lerp(&i1, &k, t));
            let rhs = lerp(&f(&i1), &f(&k), t);
            prop_assert!(close(&lhs, &rhs, 1e-9));
        }

        #[test]
        fn landmark_loss_decreases_with_correct_logit(k in 0usize..6, base in -3.0f64..3.0, step in 0.01f64..5.0) {
            let v = 6;
            let logits: Vec<f64> = (0..v * v).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
            let vis = [true, false, true, true, true, true];
            let mut a = logits.clone();
            a[k * v + k] = base;
            let mut b = a.clone();
            b[k * v + k] = base + step;
            let (la, lb) = (lc(a, &vis), lc(b, &vis));
            if vis[k] { prop_assert!(lb < la); } else { prop_assert_eq!(lb, la); }
        }
    }
}
