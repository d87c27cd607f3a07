use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ssir::data::{gen_synthetic, load_dataset, load_pair, save_dataset, SyntheticConfig};
use ssir::eval::{evaluate, Evaluator};
use ssir::geometry::save_obj;
use ssir::train::{fit, load_checkpoint, TrainConfig, Trainer};
use ssir::verify::{loss_checks, renderer_checks, Check, TOLERANCE};
use ssir::{Error, Result};

#[derive(Parser)]
#[command(name = "ssir", version, about = "Self-supervised single-view mesh reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of rendered tools with ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index of the first sample; samples are a pure function of
        /// (seed, index), so disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the two reconstruction models.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one image/mask pair and re-render it.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `IMAGE.png,MASK.png`, or an `NNNN_img.png` whose mask sits next to it.
        #[arg(long)]
        input: String,
        #[arg(long)]
        out: PathBuf,
        /// Replace the predicted azimuth, in degrees.
        #[arg(long)]
        azimuth: Option<f64>,
    },
    /// Score reconstructions and 12-view rotation sweeps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Images the sweeps are compared against; defaults to `--data`.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Also write every reconstruction and sweep view as PNG here.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Module::All)]
        module: Module,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Renderer,
    Losses,
    All,
}

/// A failed command: either a library error or a failed verification.
enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Error(Error::Io { path: path.into(), source: e })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn banner(cfg: &TrainConfig) {
    println!("# seed = {}", cfg.seed);
    println!("# config_hash = {}", cfg.hash());
    for line in cfg.to_text().lines() {
        println!("# {line}");
    }
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData { out, count, seed, start, size } => {
            let cfg = SyntheticConfig { height: size, width: size, ..Default::default() };
            println!("# seed = {seed}");
            println!("# count = {count}");
            println!("# start = {start}");
            println!("# {cfg:?}");
            let samples = gen_synthetic(start, count, seed, &cfg)?;
            save_dataset(&out, &samples, start)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { data, config, out, resume } => {
            let cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            banner(&cfg);
            let samples = load_dataset(&data)?;
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let metrics_path = out.join(&cfg.metrics_path);
            let tr = match resume {
                None => {
                    let f = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
                    let mut w = BufWriter::new(f);
                    let tr = fit(samples, &cfg, &mut w, Some(&out))?;
                    w.flush().map_err(io_err(&metrics_path))?;
                    tr
                }
                Some(ck) => {
                    let ck = load_checkpoint(&ck, Some(&cfg))?;
                    println!("# resuming at iteration {}", ck.state.iteration);
                    let mut tr = Trainer::resume(ck.config, samples, ck.state)?;
                    let f = OpenOptions::new().append(true).open(&metrics_path).map_err(io_err(&metrics_path))?;
                    let mut w = BufWriter::new(f);
                    tr.run(cfg.iterations, &mut w, Some(&out))?;
                    w.flush().map_err(io_err(&metrics_path))?;
                    tr
                }
            };
            println!("trained {} iterations; checkpoints in {}", tr.state.iteration, out.display());
        }
        Command::Render { checkpoint, input, out, azimuth } => {
            let ev = Evaluator::from_checkpoint(&checkpoint)?;
            banner(&ev.cfg);
            let (ip, mp) = pair_paths(&input)?;
            let sample = load_pair(&ip, &mp)?;
            let frame = ev.render_at(&sample, azimuth)?;
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            frame.save_png(&out.join("render_img.png"), Some(&out.join("render_mask.png")))?;
            save_obj(&ev.mesh(&sample)?, &out.join("mesh.obj"))?;
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, data, report, reference, frames } => {
            let ev = Evaluator::from_checkpoint(&checkpoint)?;
            banner(&ev.cfg);
            let samples = load_dataset(&data)?;
            let refs = match &reference {
                Some(dir) => load_dataset(dir)?,
                None => samples.clone(),
            };
            let refs: Vec<_> = refs.into_iter().map(|s| s.image).collect();
            let result = evaluate(&ev, &samples, &refs)?;
            let f = File::create(&report).map_err(io_err(&report))?;
            let mut w = BufWriter::new(f);
            result.write_report(&mut w).and_then(|_| w.flush()).map_err(io_err(&report))?;
            if let Some(dir) = frames {
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                for (i, (r, sweep)) in result.reconstructions.iter().zip(&result.sweeps).enumerate() {
                    r.save_png(&dir.join(format!("{i:04}_recon.png")), Some(&dir.join(format!("{i:04}_recon_mask.png"))))?;
                    for (k, v) in sweep.iter().enumerate() {
                        v.save_png(&dir.join(format!("{i:04}_az{:03}.png", k * 30)), None)?;
                    }
                }
            }
            println!(
                "mean iou {:.4}, rotation rf_frechet {:.4}, report {}",
                result.mean_iou(),
                result.mean_rotation_frechet(),
                report.display()
            );
        }
        Command::Gradcheck { module } => {
            println!("# tolerance = {TOLERANCE}");
            let mut checks: Vec<Check> = Vec::new();
            if module != Module::Losses {
                checks.extend(renderer_checks()?);
            }
            if module != Module::Renderer {
                checks.extend(loss_checks()?);
            }
            for c in &checks {
                println!("{:<24} {:.3e} {}", c.name, c.max_rel_error, if c.passed { "ok" } else { "FAIL" });
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Check(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn pair_paths(input: &str) -> Result<(PathBuf, PathBuf)> {
    if let Some((i, m)) = input.split_once(',') {
        return Ok((i.into(), m.into()));
    }
    match input.strip_suffix("_img.png") {
        Some(stem) => Ok((input.into(), format!("{stem}_mask.png").into())),
        None => Err(Error::Invalid(format!("--input {input}: expected IMAGE,MASK or a path ending in _img.png"))),
    }
}
