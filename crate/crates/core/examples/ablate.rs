use interframe::model::{Model, ModelConfig};
use interframe::scan2d::ScanMode;
use interframe::train::*;
use interframe::Element;

fn tiny_cfg(mode: ScanMode) -> ModelConfig {
    ModelConfig {
        d_state: 4,
        mode_h: mode,
        mode_v: mode,
        ..ModelConfig::tiny(8, 1, 4)
    }
}

fn tcfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: 10,
        batch_small: 3,
        batch_large: 1,
        crop: 64,
        warmup_steps: 10,
        lr_max: 1e-3,
        lr_min: 1e-4,
        eval_samples: 6,
        eval_every: 1000, // only final
        seed,
        curriculum: CurriculumConfig { period: 2, ..CurriculumConfig::default() },
        ..TrainConfig::default()
    }
}

fn run(mode: ScanMode, strategy: Strategy, epochs: usize, seed: u64) -> (f64, f64) {
    let mut model = Model::<f32>::new(tiny_cfg(mode), seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = train(&mut model, &tcfg(epochs, seed), strategy, dir.path(), None).unwrap();
    (r.psnr_small, r.psnr_large)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    match args.get(1).map(|s| s.as_str()).unwrap_or("scan") {
        "scan" => {
            for seed in 0..seeds {
                let t0 = std::time::Instant::now();
                let (is, il) = run(ScanMode::Interleaved, Strategy::Mixed, epochs, seed);
                let (ss, sl) = run(ScanMode::Sequential, Strategy::Mixed, epochs, seed);
                println!(
                    "seed {seed}: interleaved small {is:.2} large {il:.2} | sequential small {ss:.2} large {sl:.2} | dlarge {:.2} ({:.0}s)",
                    il - sl, t0.elapsed().as_secs_f64()
                );
            }
        }
        "strategy" => {
            for seed in 0..seeds {
                let t0 = std::time::Instant::now();
                let (cs, cl) = run(ScanMode::Interleaved, Strategy::Curriculum, epochs, seed);
                let (os, ol) = run(ScanMode::Interleaved, Strategy::SmallOnly, epochs, seed);
                let (qs, ql) = run(ScanMode::Interleaved, Strategy::Sequential, epochs, seed);
                println!(
                    "seed {seed}: curr {cs:.2}/{cl:.2} small-only {os:.2}/{ol:.2} sequential {qs:.2}/{ql:.2} ({:.0}s)",
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "long" => {
            let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
            let mut model = Model::<f32>::new(tiny_cfg(ScanMode::Interleaved), seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = tcfg(epochs, seed);
            cfg.eval_every = 5;
            let r = train(&mut model, &cfg, Strategy::Mixed, dir.path(), None).unwrap();
            for row in r.rows.iter().filter(|r| r.step % 50 == 1) {
                println!("step {} lap {:.3} psnr_s {:.2} psnr_l {:.2}", row.step, row.loss_lap, row.psnr_small, row.psnr_large);
            }
            println!("final small {:.2} large {:.2}", r.psnr_small, r.psnr_large);
        }
        "baseline" => {
            // frame-average baseline on the eval pools
            use interframe::metrics::psnr;
            let cfg = tcfg(1, 0);
            for (name, lo, hi) in [("small", 1.0, 8.0), ("large", 32.0, 38.0)] {
                let mut acc = 0.0;
                let n = 6;
                for i in 0..n {
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4000 + i);
                    let motion = lo + (hi - lo) * (i as f64) / (n - 1) as f64;
                    let s = gen_synthetic::<f64>(4000 + i, motion, 0.5, cfg.crop);
                    let _ = rng;
                    let avg = s.i0.add(&s.i1).unwrap().mul_scalar(0.5);
                    acc += psnr(&avg, &s.gt, 1.0).unwrap();
                }
                println!("baseline {name}: {:.2}", acc / n as f64);
            }
        }
        "overfit" => {
            let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let size: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
            let motion: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(6.0);
            let c: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
            let zih = args.get(6).map(|s| s == "z").unwrap_or(false);
            let mut model = Model::<f64>::new(ModelConfig { d_state: 4, zero_init_heads: zih, ..ModelConfig::tiny(c, 1, 4) }, 3).unwrap();
            let batch = vec![gen_synthetic::<f64>(500, motion, 0.5, size)];
            let mut opt = AdamW::new(&model.store, AdamWConfig::default());
            let mut first = 0.0;
            let mut last = 0.0;
            for i in 0..50u64 {
                let cur = if i < 8 { lr * (i + 1) as f64 / 8.0 } else { lr };
                let (lap, warp) = train_step(&mut model, &mut opt, &batch, cur).unwrap();
                let total = lap + WARP_WEIGHT * warp;
                if i == 0 { first = total; }
                last = total;
                if i % 10 == 9 || i == 0 {
                    println!("  step {:2} lr {:.2e} lap {lap:.4} warp {warp:.4} total {total:.4}", i + 1, cur);
                }
            }
            println!("lr {lr} size {size} motion {motion}: ratio {:.1}", first / last);
        }
        "flowdiag" => {
            // does the flow branch leave zero on a small-motion stream?
            use interframe::metrics::psnr;
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let warm = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10u64);
            let zih = args.get(5).map(|s| s == "z").unwrap_or(false);
            let cfg = ModelConfig { zero_init_heads: zih, ..tiny_cfg(ScanMode::Interleaved) };
            let mut model = Model::<f32>::new(cfg, 0).unwrap();
            let mut opt = AdamW::new(&model.store, AdamWConfig::default());
            let evals: Vec<_> = (0..6)
                .map(|i| gen_synthetic::<f32>(7000 + i, 1.0 + i as f64, 0.5, 64))
                .collect();
            let base: f64 = evals
                .iter()
                .map(|s| psnr(&s.i0.add(&s.i1).unwrap().mul_scalar(0.5), &s.gt, 1.0).unwrap())
                .sum::<f64>()
                / evals.len() as f64;
            println!("eval baseline (avg of frames): {base:.2} dB");
            // finite pool of recurring scenes (0 = fresh scene every draw)
            let pool: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);
            for i in 0..steps as u64 {
                let batch: Vec<_> = (0..4)
                    .map(|j| {
                        let mut seed = i * 4 + j;
                        if pool > 0 {
                            seed %= pool;
                        }
                        gen_synthetic::<f32>(seed, 1.0 + (seed % 13) as f64 / 2.0, 0.5, 64)
                    })
                    .collect();
                let cur = if i < warm { lr * (i + 1) as f64 / warm as f64 } else { lr };
                let (lap, warp) = train_step(&mut model, &mut opt, &batch, cur).unwrap();
                if i % 25 == 24 || i == 0 {
                    let out = model.interpolate(&evals[4].i0, &evals[4].i1, 0.5).unwrap();
                    let f = out.field.flow.data();
                    let mean_flow =
                        4.0 * f.iter().map(|v| v.abs() as f64).sum::<f64>() / f.len() as f64;
                    let ps: f64 = evals
                        .iter()
                        .map(|s| {
                            let o = model.interpolate(&s.i0, &s.i1, 0.5).unwrap();
                            psnr(&o.synth.image, &s.gt, 1.0).unwrap()
                        })
                        .sum::<f64>()
                        / evals.len() as f64;
                    println!(
                        "step {:3} lap {lap:.4} warp {warp:.4} |flow| {mean_flow:.3}px psnr {ps:.2}",
                        i + 1
                    );
                }
            }
        }
        "flowfit" => {
            // single fixed scene: does flow head move toward the true motion?
            use interframe::metrics::psnr;
            let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
            let motion: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(6.0);
            let zih = args.get(5).map(|s| s == "z").unwrap_or(false);
            let cfg = ModelConfig { zero_init_heads: zih, ..tiny_cfg(ScanMode::Interleaved) };
            let mut model = Model::<f32>::new(cfg, 0).unwrap();
            let mut opt = AdamW::new(&model.store, AdamWConfig::default());
            let s = gen_synthetic::<f32>(42, motion, 0.5, 64);
            println!("true |f_t0| = {:.2}px", 0.5 * motion);
            for i in 0..steps {
                let cur = if i < 10 { lr * (i + 1) as f64 / 10.0 } else { lr };
                let (lap, warp) =
                    train_step(&mut model, &mut opt, std::slice::from_ref(&s), cur).unwrap();
                if i % 20 == 19 || i == 0 {
                    let out = model.interpolate(&s.i0, &s.i1, 0.5).unwrap();
                    let f = out.field.flow.data();
                    let mean_flow =
                        4.0 * f.iter().map(|v| v.abs() as f64).sum::<f64>() / f.len() as f64;
                    let ps = psnr(&out.synth.image, &s.gt, 1.0).unwrap();
                    println!(
                        "step {:3} lap {lap:.4} warp {warp:.4} |flow| {mean_flow:.3}px psnr {ps:.2}",
                        i + 1
                    );
                }
            }
        }
        "oracleflow" => {
            // upper bound: ground-truth piecewise flow through the zero-init
            // synthesis path vs the frame-average baseline
            use interframe::metrics::psnr;
            use interframe::model::FlowField;
            use interframe::tensor::Tensor;
            use interframe::train::{SceneSpec, ShapeKind};
            use rand_chacha::ChaCha8Rng;
            use rand::SeedableRng;
            let cfg = ModelConfig { zero_init_heads: true, ..tiny_cfg(ScanMode::Interleaved) };
            let model = Model::<f64>::new(cfg, 0).unwrap();
            let t = 0.5;
            for (name, seeds_motions) in [
                ("small", (0..6).map(|i| (7000 + i, 1.0 + i as f64)).collect::<Vec<_>>()),
                ("large", (0..6).map(|i| (8000 + i, 32.0 + i as f64)).collect::<Vec<_>>()),
            ] {
                let mut base_acc = 0.0;
                let mut oracle_acc = 0.0;
                let (mut lap0, mut lapf, mut warp0, mut warpf) = (0.0, 0.0, 0.0, 0.0);
                for &(seed, motion) in &seeds_motions {
                    let size = 64usize;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let scene = SceneSpec::sample(&mut rng, motion, size);
                    let i0 = scene.render::<f64>(0.0, size);
                    let i1 = scene.render::<f64>(1.0, size);
                    let gt = scene.render::<f64>(t, size);
                    let (hq, wq) = (size / 4, size / 4);
                    let mut vfield = vec![0.0; 2 * hq * wq];
                    for y in 0..hq {
                        for x in 0..wq {
                            let (fx, fy) = (4.0 * x as f64 + 1.5, 4.0 * y as f64 + 1.5);
                            for s in &scene.shapes {
                                let cx = s.center[0] + t * s.velocity[0];
                                let cy = s.center[1] + t * s.velocity[1];
                                let ext = match s.kind {
                                    ShapeKind::Disk { radius } => radius,
                                    ShapeKind::Square { half, .. } => half * 1.42,
                                };
                                if ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() < ext {
                                    vfield[y * wq + x] = s.velocity[0];
                                    vfield[hq * wq + y * wq + x] = s.velocity[1];
                                }
                            }
                        }
                    }
                    let mut flow = vec![0.0; 4 * hq * wq];
                    for i in 0..hq * wq {
                        flow[i] = -t * vfield[i] / 4.0;
                        flow[hq * wq + i] = -t * vfield[hq * wq + i] / 4.0;
                        flow[2 * hq * wq + i] = (1.0 - t) * vfield[i] / 4.0;
                        flow[3 * hq * wq + i] = (1.0 - t) * vfield[hq * wq + i] / 4.0;
                    }
                    let field = FlowField {
                        flow: Tensor::new(flow, &[1, 4, hq, wq]),
                        mask_logits: Tensor::zeros(&[1, 1, hq, wq]),
                    };
                    let pyr0 = model.extract_features(&i0).unwrap();
                    let pyr1 = model.extract_features(&i1).unwrap();
                    let out = model.synthesize(&i0, &i1, &field, &pyr0, &pyr1).unwrap();
                    let avg = i0.add(&i1).unwrap().mul_scalar(0.5);
                    base_acc += psnr(&avg, &gt, 1.0).unwrap();
                    oracle_acc += psnr(&out.image, &gt, 1.0).unwrap();
                    lap0 += laplacian_loss(&avg, &gt, LAP_LEVELS).unwrap().item();
                    lapf += laplacian_loss(&out.image, &gt, LAP_LEVELS).unwrap().item();
                    warp0 += warp_loss(&i0, &i1, &gt).unwrap().item();
                    warpf += warp_loss(&out.warp0, &out.warp1, &gt).unwrap().item();
                }
                let n = seeds_motions.len() as f64;
                println!(
                    "{name}: baseline {:.2} dB oracle-flow {:.2} dB | lap {:.4} -> {:.4} warp {:.4} -> {:.4}",
                    base_acc / n, oracle_acc / n, lap0 / n, lapf / n, warp0 / n, warpf / n
                );
            }
        }
        "gradprobe" => {
            // cross-batch gradient agreement per parameter group at init
            let zih = args.get(2).map(|s| s == "z").unwrap_or(true);
            let cfg = ModelConfig { zero_init_heads: zih, ..tiny_cfg(ScanMode::Interleaved) };
            let model = Model::<f64>::new(cfg, 0).unwrap();
            let groups = ["flow.coarse.c3", "flow.coarse.c1", "flow.residual.c3", "refine.out", "refine.enc0a", "s8.block0"];
            let mut per_batch: Vec<Vec<(String, Vec<f64>)>> = Vec::new();
            for k in 0..8u64 {
                let batch: Vec<_> = (0..4)
                    .map(|j| {
                        let seed = 100 + k * 4 + j;
                        gen_synthetic::<f64>(seed, 1.0 + (seed % 13) as f64 / 2.0, 0.5, 64)
                    })
                    .collect();
                let mut lap_sum = interframe::tensor::Tensor::scalar(0.0);
                let mut warp_sum = interframe::tensor::Tensor::scalar(0.0);
                for s in &batch {
                    let out = model.interpolate(&s.i0, &s.i1, s.t).unwrap();
                    let (lap, warp) = sample_loss(&out, &s.gt).unwrap();
                    lap_sum = lap_sum.add(&lap).unwrap();
                    warp_sum = warp_sum.add(&warp).unwrap();
                }
                let total = lap_sum.add(&warp_sum.mul_scalar(WARP_WEIGHT)).unwrap().mul_scalar(0.25);
                let grads = total.backward();
                let mut row = Vec::new();
                for (name, t) in model.store.iter() {
                    if groups.iter().any(|g| name.starts_with(g)) {
                        let g: Vec<f64> = grads.get(t).map(|v| v.to_vec()).unwrap_or_default();
                        row.push((name.to_string(), g));
                    }
                }
                per_batch.push(row);
            }
            for gi in 0..per_batch[0].len() {
                let name = &per_batch[0][gi].0;
                if !name.ends_with(".w") { continue; }
                let mut cos_sum = 0.0f64;
                let mut cnt = 0.0f64;
                let mut mag = 0.0f64;
                for a in 0..8 {
                    let ga = &per_batch[a][gi].1;
                    mag += (ga.iter().map(|v| v * v).sum::<f64>() / ga.len() as f64).sqrt();
                    for b in a + 1..8 {
                        let gb = &per_batch[b][gi].1;
                        let dot: f64 = ga.iter().zip(gb).map(|(x, y)| x * y).sum();
                        let na: f64 = ga.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb: f64 = gb.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if na > 0.0 && nb > 0.0 {
                            cos_sum += dot / (na * nb);
                            cnt += 1.0;
                        }
                    }
                }
                println!("{name}: mean pairwise cos {:+.3}  rms grad {:.2e}", cos_sum / cnt.max(1.0), mag / 8.0);
            }
        }
        "evalbase" => {
            // frame-average baseline on the exact training eval pools
            use interframe::metrics::psnr;
            let cfg = tcfg(1, 0);
            let (small, large) = eval_pools::<f64>(&cfg);
            for (name, pool) in [("small", small), ("large", large)] {
                let mut acc = 0.0;
                for s in &pool {
                    let avg = s.i0.add(&s.i1).unwrap().mul_scalar(0.5);
                    acc += psnr(&avg, &s.gt, 1.0).unwrap();
                }
                println!("eval-pool baseline {name}: {:.2} (motions {:?})", acc / pool.len() as f64,
                    pool.iter().map(|s| s.motion_px).collect::<Vec<_>>());
            }
        }
        _ => {}
    }
}
