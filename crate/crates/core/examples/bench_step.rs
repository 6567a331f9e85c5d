use interframe::model::{Model, ModelConfig};
use interframe::train::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("desk");
    match which {
        "desk" => {
            let cfg = ModelConfig::default();
            let mut model = Model::<f32>::new(cfg, 1).unwrap();
            let tcfg = TrainConfig::default();
            let batch: Vec<_> = (0..tcfg.batch_small + tcfg.batch_large)
                .map(|i| gen_synthetic::<f32>(i as u64, 8.0, 0.5, tcfg.crop))
                .collect();
            let mut opt = AdamW::new(&model.store, AdamWConfig::default());
            for i in 0..3 {
                let t0 = Instant::now();
                let (lap, warp) = train_step(&mut model, &mut opt, &batch, 1e-4).unwrap();
                println!("step {i}: {:.2}s lap {lap:.4} warp {warp:.4}", t0.elapsed().as_secs_f64());
            }
        }
        "tiny" => {
            let cfg = ModelConfig { d_state: 4, ..ModelConfig::tiny(8, 1, 4) };
            let mut model = Model::<f32>::new(cfg, 1).unwrap();
            let batch: Vec<_> = (0..3)
                .map(|i| gen_synthetic::<f32>(i as u64, 20.0, 0.5, 64))
                .collect();
            let mut opt = AdamW::new(&model.store, AdamWConfig::default());
            for i in 0..3 {
                let t0 = Instant::now();
                let (lap, warp) = train_step(&mut model, &mut opt, &batch, 1e-4).unwrap();
                println!("tiny64 step {i}: {:.2}s lap {lap:.4} warp {warp:.4}", t0.elapsed().as_secs_f64());
            }
        }
        _ => {}
    }
}
