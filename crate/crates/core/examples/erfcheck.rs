use interframe::metrics::erf_probe;
use interframe::model::{Model, ModelConfig};
use interframe::train::*;

fn cfg(conv_only: bool) -> ModelConfig {
    ModelConfig { d_state: 4, conv_only, ..ModelConfig::tiny(8, 1, 4) }
}

fn probe(model: &Model<f32>, size: usize) -> (f64, f64, f64) {
    let s = gen_synthetic::<f32>(777, 6.0, 0.5, size);
    let r = size / 2;
    let region = (r - 2, r - 2, 4, 4);
    let map = erf_probe(model, &s.i0, &s.i1, region).unwrap();
    let radius = model.cfg.conv_receptive_radius() + map.max_flow.ceil() + 1.0;
    (map.mass_outside(region, radius), map.total_mass(), map.max_flow)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(224);
    let trained: bool = args.get(2).map(|s| s == "t").unwrap_or(false);
    for conv_only in [false, true] {
        let mut model = Model::<f32>::new(cfg(conv_only), 11).unwrap();
        println!("conv_only={conv_only} radius {:.1}", model.cfg.conv_receptive_radius());
        if trained {
            let tc = TrainConfig {
                epochs: 2, steps_per_epoch: 10, batch_small: 2, batch_large: 1,
                crop: 64, warmup_steps: 5, lr_max: 1e-3, lr_min: 1e-4,
                eval_samples: 1, eval_every: 10, ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            train(&mut model, &tc, Strategy::Mixed, dir.path(), None).unwrap();
        }
        let (out, total, max_flow) = probe(&model, size);
        println!("  mass outside {out:.3e} total {total:.3e} frac {:.3e} max_flow {max_flow:.2}", out / total);
    }
}
