//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Checkpoint};
use crate::metrics::{self, EvalReport, EvalSample};
use crate::model::{Model, ModelConfig};
use crate::train::{self, gen_synthetic, SceneSpec, Strategy, TrainConfig};
use crate::{oracle, ssm, tensor::Tensor};

#[derive(Parser)]
#[command(name = "interframe", version, about = "Selective state space video frame interpolation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on synthetic motion data.
    Train(TrainArgs),
    /// Interpolate a frame between two PNGs.
    Interpolate(InterpolateArgs),
    /// Evaluate a checkpoint on a dataset manifest or synthetic data.
    Eval(EvalArgs),
    /// Probe the effective receptive field of a checkpoint.
    Erf(ErfArgs),
    /// Run the built-in numerical cross-checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run spec; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: String,
    /// Output directory for checkpoints and metrics.
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    frame0: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Path to a JSON manifest, or "synthetic".
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "single")]
    protocol: String,
    /// Extent of generated frames when the dataset is synthetic.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Sample count when the dataset is synthetic.
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

#[derive(Args)]
struct ErfArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Output region as x,y,w,h.
    #[arg(long)]
    region: String,
    /// Probe image extent.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Optional PNG path for the normalized heatmap.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// On-disk run spec for `train --config`.
#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Interpolate(a) => cmd_interpolate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Erf(a) => cmd_erf(a),
        Cmd::Selftest => cmd_selftest(),
    }
}

fn load_model(path: &Path) -> Result<(Model<f32>, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    let model = ck.restore_model()?;
    Ok((model, ck))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    let spec: RunSpec = match &a.config {
        Some(path) => serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?,
        None => RunSpec::default(),
    };
    spec.model.validate()?;
    spec.train.validate()?;
    let mut model = match &a.resume {
        Some(path) => Checkpoint::read(path)?.restore_model()?,
        None => Model::<f32>::new(spec.model.clone(), spec.train.seed)?,
    };
    let report = train::train(&mut model, &spec.train, strategy, &a.out, a.resume.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    if !(a.t > 0.0 && a.t < 1.0) {
        return Err(Error::Data(format!("t must lie strictly inside (0,1), got {}", a.t)));
    }
    let (model, _) = load_model(&a.ckpt)?;
    let i0: Tensor<f32> = io::read_png(&a.frame0)?;
    let i1: Tensor<f32> = io::read_png(&a.frame1)?;
    if i0.shape() != i1.shape() {
        return Err(Error::Data(format!(
            "frame extents differ: {:?} vs {:?}",
            &i0.shape()[2..],
            &i1.shape()[2..]
        )));
    }
    let (p0, orig) = io::pad_to_multiple(&i0, 16)?;
    let (p1, _) = io::pad_to_multiple(&i1, 16)?;
    let out = model.interpolate(&p0, &p1, a.t)?;
    io::write_png(&a.out, &io::crop_to(&out.synth.image, orig))?;
    Ok(())
}

fn synthetic_eval_set(size: usize, samples: usize) -> Vec<EvalSample<f32>> {
    (0..samples)
        .map(|i| {
            let motion = 4.0 + 60.0 * i as f64 / samples.max(1) as f64;
            let s = gen_synthetic::<f32>(9000 + i as u64, motion.min(0.7 * size as f64), 0.5, size);
            EvalSample { i0: s.i0, i1: s.i1, gt: s.gt, t: s.t }
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_model(&a.ckpt)?;
    let report: EvalReport = match a.protocol.as_str() {
        "single" => {
            let samples = if a.dataset == "synthetic" {
                synthetic_eval_set(a.size, a.samples)
            } else {
                let mut out = Vec::new();
                for e in io::read_manifest(&a.dataset)? {
                    let pad = |p: &str| -> Result<(Tensor<f32>, (usize, usize))> {
                        io::pad_to_multiple(&io::read_png(p)?, 16)
                    };
                    out.push(EvalSample {
                        i0: pad(&e.frame0)?.0,
                        i1: pad(&e.frame1)?.0,
                        gt: pad(&e.gt)?.0,
                        t: e.t,
                    });
                }
                out
            };
            metrics::eval_single(&model, &samples)?
        }
        "recursive8x" => {
            if a.dataset != "synthetic" {
                return Err(Error::Data(
                    "protocol recursive8x expects --dataset synthetic (an octet is generated)"
                        .into(),
                ));
            }
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9100);
            let scene = SceneSpec::sample(&mut rng, (0.4 * a.size as f64).min(48.0), a.size);
            let frame = |k: usize| scene.render::<f32>(k as f64 / 8.0, a.size);
            let gts: [Tensor<f32>; 7] = std::array::from_fn(|i| frame(i + 1));
            metrics::eval_recursive_8x(&model, &frame(0), &frame(8), &gts)?
        }
        other => {
            return Err(Error::Data(format!(
                "unknown protocol '{other}' (expected single|recursive8x)"
            )))
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_erf(a: ErfArgs) -> Result<()> {
    let parts: std::result::Result<Vec<usize>, _> =
        a.region.split(',').map(|p| p.trim().parse::<usize>()).collect();
    let region = match parts.as_deref() {
        Ok([x, y, w, h]) => (*x, *y, *w, *h),
        _ => return Err(Error::Data(format!("region '{}' is not x,y,w,h", a.region))),
    };
    let (model, _) = load_model(&a.ckpt)?;
    let s = gen_synthetic::<f32>(9200, 8.0, 0.5, a.size);
    let map = metrics::erf_probe(&model, &s.i0, &s.i1, region)?;
    let radius = model.cfg.conv_receptive_radius();
    let outside = map.mass_outside(region, radius + 1.0);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "region": { "x": region.0, "y": region.1, "w": region.2, "h": region.3 },
            "extent": a.size,
            "conv_receptive_radius_px": radius,
            "total_mass": map.total_mass(),
            "mass_outside_conv_radius": outside,
            "max_flow_px": map.max_flow,
        }))?
    );
    if let Some(out) = a.out {
        let gray: Vec<f32> = map.heatmap.iter().map(|v| *v as f32).collect();
        let plane = Tensor::<f32>::new(gray, &[1, 1, map.h, map.w]);
        let rgb = Tensor::cat(&[plane.clone(), plane.clone(), plane], 1)?;
        io::write_png(&out, &rgb)?;
    }
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // selective scan against the plain-loop recurrence
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let mut scan_ok = true;
    for _ in 0..5 {
        let (b, t, l, n) = (1, 9, 3, 4);
        let mk = |len: usize, rng: &mut rand::rngs::StdRng, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(lo..hi)).collect()
        };
        let x = Tensor::new(mk(b * t * l, &mut rng, -1.0, 1.0), &[b, t, l]);
        let delta = Tensor::new(mk(b * t * l, &mut rng, 0.01, 0.4), &[b, t, l]);
        let a = Tensor::new(mk(l * n, &mut rng, -2.0, -0.1), &[l, n]);
        let bt = Tensor::new(mk(b * t * n, &mut rng, -1.0, 1.0), &[b, t, n]);
        let ct = Tensor::new(mk(b * t * n, &mut rng, -1.0, 1.0), &[b, t, n]);
        let d = Tensor::new(mk(l, &mut rng, -0.5, 0.5), &[l]);
        let y = ssm::scan_core(&x, &delta, &a, &bt, &ct, &d).unwrap();
        let want = oracle::naive_selective_scan(
            x.data(), delta.data(), a.data(), bt.data(), ct.data(), d.data(), (b, t, l, n),
        );
        for (got, want) in y.data().iter().zip(&want) {
            if oracle::rel_err(*got, *want) > 1e-6 {
                scan_ok = false;
            }
        }
    }
    check("selective scan matches plain-loop recurrence", scan_ok);

    // psnr/ssim against pixel-loop references
    let img = |rng: &mut rand::rngs::StdRng| -> Tensor<f64> {
        Tensor::new((0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(), &[1, 3, 32, 32])
    };
    let a = img(&mut rng);
    let b = img(&mut rng);
    let p_ok = (metrics::psnr(&a, &b, 1.0)? - oracle::psnr_reference(a.data(), b.data(), 1.0))
        .abs()
        < 1e-6;
    check("psnr matches reference", p_ok);
    let mut s_ref = 0.0;
    for c in 0..3 {
        s_ref += oracle::ssim_reference_plane(
            &a.data()[c * 1024..(c + 1) * 1024],
            &b.data()[c * 1024..(c + 1) * 1024],
            32,
            32,
            1.0,
        );
    }
    let s_ok = (metrics::ssim(&a, &b, 1.0)? - s_ref / 3.0).abs() < 1e-6;
    check("ssim matches reference", s_ok);

    // laplacian loss against the brute-force pyramid
    let s = gen_synthetic::<f64>(2, 4.0, 0.5, 64);
    let ours = train::laplacian_loss(&s.i0, &s.i1, 5)?.item();
    let refv = oracle::laplacian_reference(s.i0.data(), s.i1.data(), 3, 64, 64, 5);
    check("laplacian loss matches reference pyramid", oracle::rel_err(ours, refv) < 1e-9);

    // end-to-end gradient check on a tiny model
    let model = Model::<f64>::new(ModelConfig { d_state: 2, ..ModelConfig::tiny(4, 1, 2) }, 5)?;
    let probe = gen_synthetic::<f64>(3, 4.0, 0.5, 32);
    let inputs = model.store.tensors();
    let f = |ts: &[Tensor<f64>]| -> Tensor<f64> {
        let mut m = Model::<f64>::new(model.cfg.clone(), 5).unwrap();
        m.store = model.store.with_tensors(ts);
        let out = m.interpolate(&probe.i0, &probe.i1, 0.5).unwrap();
        train::laplacian_loss(&out.synth.image, &probe.gt, 5).unwrap()
    };
    let worst = oracle::gradcheck(&f, &inputs, 1e-4, 2);
    check("loss gradients match finite differences", worst < 1e-2);

    if failures > 0 {
        return Err(Error::NonFinite(format!("{failures} selftest check(s) failed")));
    }
    Ok(())
}
