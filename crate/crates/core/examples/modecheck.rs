use interframe::model::{Model, ModelConfig};
use interframe::scan2d::ScanMode;
use interframe::train::gen_synthetic;

fn main() {
    let mk = |mode: ScanMode| ModelConfig { d_state: 4, mode_h: mode, mode_v: mode, ..ModelConfig::tiny(8, 1, 4) };
    let a = Model::<f64>::new(mk(ScanMode::Interleaved), 5).unwrap();
    let b = Model::<f64>::new(mk(ScanMode::Sequential), 5).unwrap();
    let s = gen_synthetic::<f64>(7, 20.0, 0.5, 64);
    let ya = a.interpolate(&s.i0, &s.i1, 0.5).unwrap().synth.image;
    let yb = b.interpolate(&s.i0, &s.i1, 0.5).unwrap().synth.image;
    let diff: f64 = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / ya.numel() as f64;
    println!("mean abs diff between modes: {diff:e}");
    // and between the two frames' features to confirm scans matter at all
    let same = Model::<f64>::new(mk(ScanMode::Interleaved), 5).unwrap();
    let yc = same.interpolate(&s.i0, &s.i1, 0.5).unwrap().synth.image;
    println!("repeat determinism diff: {:e}", ya.data().iter().zip(yc.data()).map(|(x, y)| (x - y).abs()).sum::<f64>());
}
