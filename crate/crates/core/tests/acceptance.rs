//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssir::data::{gen_synthetic, iou_metric, load_dataset, save_dataset, SyntheticConfig};
use ssir::encoders::attributes_row;
use ssir::eval::{sweep_azimuths, Evaluator};
use ssir::geometry::{icosphere, CameraRaw};
use ssir::losses::{image_l1, interpolate, interpolate_vars, landmark_consistency, silhouette_iou_loss};
use ssir::render::{ambient_light, hard_render, uniform_texture, Attributes, RenderConfig, Renderer, Scene};
use ssir::tensor::{Tape, Tensor, Var};
use ssir::verify::renderer_checks;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("PASS {name}: {d}"),
        Err(d) => println!("FAIL {name}: {d}"),
    }
    outcome.is_ok()
}

fn renderer_gradients() -> Outcome {
    let t0 = Instant::now();
    let checks = renderer_checks().map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(
        failed.is_empty() && secs < 60.0,
        format!("{} inputs, worst rel error {worst:.2e}, {secs:.1}s, failing {failed:?}", checks.len()),
    )
}

/// `[1, 4, 1, n]` frames carrying only a mask.
fn mask_frame(m: &[f64]) -> Tensor<f64> {
    let n = m.len();
    let mut d = vec![0.0; 4 * n];
    d[3 * n..].copy_from_slice(m);
    Tensor::new(&[1, 4, 1, n], d)
}

fn eval_loss(f: fn(&Tape<f64>, Var, Var) -> ssir::Result<Var>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    t.item(f(&t, x, y).unwrap())
}

fn random_attributes(rng: &mut ChaCha8Rng) -> Attributes {
    let mut g = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    let cam = g(4);
    let light = g(9);
    let shape = g(42 * 3);
    let flow = g(4 * 4 * 2);
    Attributes {
        camera: std::array::from_fn(|i| cam[i]),
        light: std::array::from_fn(|i| light[i]),
        shape_delta: shape.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        texture_flow: Tensor::new(&[4, 4, 2], flow),
    }
}

fn flat(a: &Attributes) -> Vec<f64> {
    let mut v = a.camera.to_vec();
    v.extend_from_slice(&a.light);
    v.extend(a.shape_delta.iter().flatten());
    v.extend_from_slice(&a.texture_flow.data);
    v
}

fn loss_identities() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let hand = eval_loss(
        silhouette_iou_loss,
        &mask_frame(&[1., 1., 1., 1., 0., 0.]),
        &mask_frame(&[0., 0., 1., 1., 1., 1.]),
    );
    ok &= (hand - 2.0 / 3.0).abs() < 1e-6;
    notes.push(format!("hand case {hand:.9}"));
    let m = mask_frame(&[1., 0., 1., 1., 0., 1.]);
    let same = eval_loss(silhouette_iou_loss, &m, &m);
    ok &= same == 0.0;
    notes.push(format!("identical {same}"));

    // background pixels of either frame never change the image loss
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, w) = (6, 7);
    let n = h * w;
    let mut violations = 0;
    for _ in 0..100 {
        let mut x: Vec<f64> = (0..2 * 4 * n).map(|_| rng.gen()).collect();
        let mut r: Vec<f64> = (0..2 * 4 * n).map(|_| rng.gen()).collect();
        for s in 0..2 {
            for p in 0..n {
                x[(s * 4 + 3) * n + p] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                if rng.gen_bool(0.3) {
                    r[(s * 4 + 3) * n + p] = 0.0;
                }
            }
        }
        let before = eval_loss(image_l1, &Tensor::new(&[2, 4, h, w], x.clone()), &Tensor::new(&[2, 4, h, w], r.clone()));
        let (mut x2, mut r2) = (x.clone(), r.clone());
        for s in 0..2 {
            for p in 0..n {
                for c in 0..3 {
                    if x[(s * 4 + 3) * n + p] == 0.0 {
                        x2[(s * 4 + c) * n + p] = rng.gen();
                    }
                    if r[(s * 4 + 3) * n + p] == 0.0 {
                        r2[(s * 4 + c) * n + p] = rng.gen();
                    }
                }
            }
        }
        let after = eval_loss(image_l1, &Tensor::new(&[2, 4, h, w], x2), &Tensor::new(&[2, 4, h, w], r2));
        violations += (before != after) as usize;
    }
    ok &= violations == 0;
    notes.push(format!("background changes {violations}/100"));

    // mixing endpoints, on values and on the tape
    let mut bad = 0;
    for _ in 0..20 {
        let a: Vec<Attributes> = (0..4).map(|_| random_attributes(&mut rng)).collect();
        let f: Vec<Vec<f64>> = a.iter().map(flat).collect();
        for (alpha, (p, q)) in [(0.0, (0, 1)), (1.0, (2, 3))] {
            let want: Vec<f64> = f[p].iter().zip(&f[q]).map(|(x, y)| 0.5 * (x + y)).collect();
            let got = flat(&interpolate(&a[0], &a[1], &a[2], &a[3], alpha, alpha).unwrap());
            bad += (got != want) as usize;
            let t = Tape::<f64>::new();
            let rows: Vec<_> = a.iter().map(|x| attributes_row(&t, x)).collect();
            let mixed = interpolate_vars(&t, [&rows[0], &rows[1], &rows[2], &rows[3]], &[(alpha, alpha)]).unwrap();
            let got: Vec<f64> = mixed.parts().iter().flat_map(|v| t.value(*v).data.clone()).collect();
            bad += (got != want) as usize;
        }
    }
    ok &= bad == 0;
    notes.push(format!("endpoint mismatches {bad}/80"));
    ensure(ok, notes.join(", "))
}

fn landmark_uniform() -> Outcome {
    let v = 42;
    let t = Tape::<f64>::new();
    let logits = t.constant(Tensor::zeros(&[v, v]));
    let l = landmark_consistency(&t, logits, &vec![true; v], 1).map_err(|e| e.to_string())?;
    let per = t.item(l) / v as f64;
    let want = (v as f64).ln();
    ensure((per - want).abs() < 1e-4, format!("per-landmark {per:.6} vs ln 42 = {want:.6}"))
}

fn oracle_cross_checks() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mesh = icosphere(3).map_err(|e| e.to_string())?;
    let r = Renderer::new(&mesh, RenderConfig::default().soft(1e-5, 1e-5));
    let scene = Scene {
        camera: [0.0, 1.0, 0.0, 3.0],
        light: ambient_light(1.0),
        vertices: mesh.vertices.clone(),
        texture: uniform_texture(8, 8, [0.5, 0.5, 0.5]),
    };
    let soft = r.render(&scene).map_err(|e| e.to_string())?;
    let hard = hard_render(&r, &scene).map_err(|e| e.to_string())?;
    let mad = soft.mask.iter().zip(&hard.mask).map(|(a, b)| (a - b).abs()).sum::<f64>() / soft.mask.len() as f64;
    ok &= mad < 0.02 && hard.mask_sum() > 0.0;
    notes.push(format!("soft/hard mask MAD {mad:.4}"));

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SyntheticConfig::default();
    save_dataset(dir.path(), &gen_synthetic(0, 16, 7, &cfg).map_err(|e| e.to_string())?, 0).map_err(|e| e.to_string())?;
    let template = icosphere(cfg.icosphere_level).map_err(|e| e.to_string())?;
    let rr = Renderer::new(&template, RenderConfig::with_size(cfg.height, cfg.width).soft(1e-7, 1e-7));
    let mut worst = 1.0f64;
    for s in load_dataset(dir.path()).map_err(|e| e.to_string())? {
        let gt = s.ground_truth.as_ref().ok_or("sample without ground truth")?;
        let frame = rr.render(&gt.scene(&template)).map_err(|e| e.to_string())?;
        worst = worst.min(iou_metric(&frame.mask, &s.mask).map_err(|e| e.to_string())?);
    }
    ok &= worst >= 0.98;
    notes.push(format!("ground-truth re-render min IoU {worst:.4}"));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gap = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let p = rng.gen_range(0.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        if a.iter().chain(&b).all(|&x| x == 0.0) {
            continue;
        }
        let loss = eval_loss(silhouette_iou_loss, &mask_frame(&a), &mask_frame(&b));
        gap = gap.max((1.0 - iou_metric(&a, &b).unwrap() - loss).abs());
    }
    ok &= gap < 1e-6;
    notes.push(format!("max |1 - iou - loss| {gap:.2e}"));
    ensure(ok, notes.join(", "))
}

/// Files and measurements of one gen-data -> train -> eval run.
struct Pipeline {
    root: PathBuf,
    train_time: Duration,
    metrics: Vec<u8>,
    train_report: Vec<u8>,
    held_report: Vec<u8>,
}

impl Pipeline {
    fn checkpoint(&self) -> PathBuf {
        self.root.join("out/ckpt_002000.bin")
    }
}

fn ssir(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssir")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("ssir {} exited {}: {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn pipeline(root: &Path, config: &str) -> Result<Pipeline, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, held, out) = (root.join("data"), root.join("held"), root.join("out"));
    let cfg = root.join("train.cfg");
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    std::fs::write(&cfg, config).map_err(|e| e.to_string())?;
    ssir(&["gen-data", "--out", &s(&data), "--count", "16", "--seed", "7"])?;
    ssir(&["gen-data", "--out", &s(&held), "--count", "8", "--seed", "7", "--start", "16"])?;
    let t0 = Instant::now();
    ssir(&["train", "--data", &s(&data), "--config", &s(&cfg), "--out", &s(&out)])?;
    let train_time = t0.elapsed();
    let ck = s(&out.join("ckpt_002000.bin"));
    let (tr, hr) = (root.join("train_report.csv"), root.join("held_report.csv"));
    ssir(&["eval", "--checkpoint", &ck, "--data", &s(&data), "--report", &s(&tr)])?;
    ssir(&["eval", "--checkpoint", &ck, "--data", &s(&held), "--reference", &s(&data), "--report", &s(&hr)])?;
    Ok(Pipeline {
        root: root.to_path_buf(),
        train_time,
        metrics: read(&out.join("metrics.csv"))?,
        train_report: read(&tr)?,
        held_report: read(&hr)?,
    })
}

/// Mean of a named column of an evaluation report.
fn column_mean(report: &[u8], name: &str) -> Result<f64, String> {
    let text = std::str::from_utf8(report).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty report")?.split(',').collect();
    let k = header.iter().position(|h| *h == name).ok_or(format!("no column {name}"))?;
    let vals: Vec<f64> = lines
        .map(|l| l.split(',').nth(k).and_then(|v| v.parse().ok()).ok_or(format!("bad row {l}")))
        .collect::<Result<_, _>>()?;
    if vals.is_empty() {
        return Err("report has no rows".into());
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn desk_training(run: &Pipeline, repeat: &Pipeline) -> Outcome {
    let train = column_mean(&run.train_report, "iou")?;
    let held = column_mean(&run.held_report, "iou")?;
    let mins = run.train_time.as_secs_f64() / 60.0;
    let same = run.metrics == repeat.metrics;
    ensure(
        train >= 0.80 && held >= 0.75 && mins <= 45.0 && same,
        format!("train IoU {train:.4}, held-out IoU {held:.4}, {mins:.1} min, trace reproduced {same}"),
    )
}

fn ablation_direction(default: &Pipeline, ablated: &Pipeline) -> Outcome {
    let d = column_mean(&default.train_report, "rf_frechet_rotation")?;
    let a = column_mean(&ablated.train_report, "rf_frechet_rotation")?;
    ensure(d <= a, format!("rotation rf_frechet default {d:.5} vs no 3D/LC terms {a:.5} (proxy, not FID)"))
}

fn rotation_protocol(run: &Pipeline) -> Outcome {
    let az = sweep_azimuths();
    let spaced = az.len() == 12 && az.iter().enumerate().all(|(k, &a)| (a - 30.0 * k as f64).abs() < 1e-12);
    let ev = Evaluator::from_checkpoint(&run.checkpoint()).map_err(|e| e.to_string())?;
    let data = load_dataset(&run.root.join("data")).map_err(|e| e.to_string())?;
    let (mut views, mut empty, mut misplaced) = (0, 0, 0);
    for s in &data {
        let frames = ev.rotation_sweep(s).map_err(|e| e.to_string())?;
        views += frames.len();
        empty += frames.iter().filter(|f| !f.mask.iter().any(|&m| m >= 0.5)).count();
        for (k, &a) in az.iter().enumerate() {
            let cam = ev.scene(s, Some(a)).map_err(|e| e.to_string())?.camera;
            let got = CameraRaw::from_slice(&cam).azimuth_deg();
            let diff = (got - 30.0 * k as f64).abs();
            misplaced += (diff.min(360.0 - diff) > 1e-6) as usize;
        }
    }
    ensure(
        spaced && views == 12 * data.len() && empty == 0 && misplaced == 0,
        format!("{views} views over {} samples, {empty} with empty masks, {misplaced} off the 30 degree grid", data.len()),
    )
}

fn determinism(a: &Pipeline, b: &Pipeline) -> Outcome {
    let same = [
        ("metrics", a.metrics == b.metrics),
        ("train report", a.train_report == b.train_report),
        ("held-out report", a.held_report == b.held_report),
    ];
    let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();
    ensure(
        differing.is_empty() && !a.metrics.is_empty(),
        format!("{} metrics bytes, differing files {differing:?}", a.metrics.len()),
    )
}

fn main() {
    let mut all = true;
    all &= report("renderer gradient suite", &renderer_gradients());
    all &= report("loss identities", &loss_identities());
    all &= report("landmark loss uniform logits", &landmark_uniform());
    all &= report("oracle cross-checks", &oracle_cross_checks());

    let tmp = tempfile::tempdir().expect("temp dir");
    let runs = (
        pipeline(&tmp.path().join("default_a"), ""),
        pipeline(&tmp.path().join("default_b"), ""),
        pipeline(&tmp.path().join("ablated"), "lambda_3d = 0.0\nlambda_lc = 0.0\n"),
    );
    match runs {
        (Ok(a), Ok(b), Ok(ab)) => {
            all &= report("desk-scale training", &desk_training(&a, &b));
            all &= report("ablation direction", &ablation_direction(&a, &ab));
            all &= report("rotation protocol", &rotation_protocol(&a));
            all &= report("pipeline determinism", &determinism(&a, &b));
        }
        (a, b, ab) => {
            let err = [a.err(), b.err(), ab.err()].into_iter().flatten().collect::<Vec<_>>().join("; ");
            for name in ["desk-scale training", "ablation direction", "rotation protocol", "pipeline determinism"] {
                all &= report(name, &Err(format!("pipeline failed: {err}")));
            }
        }
    }
    if !all {
        std::process::exit(1);
    }
}
