use interframe::metrics::op_counter;
use interframe::model::{Model, ModelConfig};
use interframe::train::gen_synthetic;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let f = op_counter(&cfg, 128, 128);
    println!("flops conv {:.2e} scan {:.2e} other {:.2e} total {:.2e}", f.conv, f.scan, f.other, f.total());
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let s = gen_synthetic::<f32>(1, 8.0, 0.5, 128);
    let t0 = Instant::now();
    let p0 = model.extract_features(&s.i0).unwrap();
    let p1 = model.extract_features(&s.i1).unwrap();
    println!("extract: {:.2}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let (s8, s16) = model.interframe_features(&p0[2], &p1[2]).unwrap();
    println!("interframe: {:.2}s", t1.elapsed().as_secs_f64());
    let t2 = Instant::now();
    let field = model.estimate_flow(&s16, &s8, &s.i0, &s.i1, 0.5).unwrap();
    println!("flow: {:.2}s", t2.elapsed().as_secs_f64());
    let t3 = Instant::now();
    let out = model.synthesize(&s.i0, &s.i1, &field, &p0, &p1).unwrap();
    println!("synthesize: {:.2}s", t3.elapsed().as_secs_f64());
    let t4 = Instant::now();
    let loss = interframe::train::laplacian_loss(&out.image, &s.gt, 5).unwrap();
    let g = loss.backward();
    println!("loss+backward: {:.2}s grads {}", t4.elapsed().as_secs_f64(), g.len());
}
