//! Quality metrics, evaluation protocols, receptive-field probing, and an
//! analytic operation counter.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Conv2dSpec, Element, Tensor};

/// Peak signal-to-noise ratio in dB; identical inputs report the 99 dB cap.
pub fn psnr<E: Element>(pred: &Tensor<E>, gt: &Tensor<E>, max_val: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidShape("psnr: shape mismatch".into()));
    }
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| {
            let d = p.as_f64() - g.as_f64();
            d * d
        })
        .sum::<f64>()
        / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(99.0))
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5,
/// K1 = 0.01, K2 = 0.03), computed per channel on the valid (unpadded)
/// region and averaged. Inputs are [B,C,H,W].
pub fn ssim<E: Element>(pred: &Tensor<E>, gt: &Tensor<E>, max_val: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidShape("ssim: shape mismatch".into()));
    }
    let (b, c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2], pred.shape()[3]);
    if h < 11 || w < 11 {
        return Err(Error::InvalidShape(format!("ssim needs extents >= 11, got {h}x{w}")));
    }
    let win = gaussian_kernel_11::<f64>();
    let wt = Tensor::new(win, &[1, 1, 11, 11]);
    let spec = Conv2dSpec { stride: 1, pad: 0, groups: 1 };
    let p: Tensor<f64> = pred.cast::<f64>().reshape(&[b * c, 1, h, w])?;
    let g: Tensor<f64> = gt.cast::<f64>().reshape(&[b * c, 1, h, w])?;
    let mu_p = p.conv2d(&wt, None, spec)?;
    let mu_g = g.conv2d(&wt, None, spec)?;
    let pp = p.mul(&p)?.conv2d(&wt, None, spec)?;
    let gg = g.mul(&g)?.conv2d(&wt, None, spec)?;
    let pg = p.mul(&g)?.conv2d(&wt, None, spec)?;
    let c1 = (0.01 * max_val) * (0.01 * max_val);
    let c2 = (0.03 * max_val) * (0.03 * max_val);
    let mut total = 0.0;
    for i in 0..mu_p.numel() {
        let (mp, mg) = (mu_p.data()[i], mu_g.data()[i]);
        let var_p = pp.data()[i] - mp * mp;
        let var_g = gg.data()[i] - mg * mg;
        let cov = pg.data()[i] - mp * mg;
        total += ((2.0 * mp * mg + c1) * (2.0 * cov + c2))
            / ((mp * mp + mg * mg + c1) * (var_p + var_g + c2));
    }
    Ok(total / mu_p.numel() as f64)
}

fn gaussian_kernel_11<E: Element>() -> Vec<E> {
    let sigma = 1.5f64;
    let mut win = vec![0.0f64; 121];
    let mut sum = 0.0;
    for (i, v) in win.iter_mut().enumerate() {
        let dy = (i / 11) as f64 - 5.0;
        let dx = (i % 11) as f64 - 5.0;
        *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    win.into_iter().map(|v| E::of_f64(v / sum)).collect()
}

/// One evaluation item: a frame pair, the ground-truth intermediate, and
/// its timestep.
pub struct EvalSample<E: Element> {
    pub i0: Tensor<E>,
    pub i1: Tensor<E>,
    pub gt: Tensor<E>,
    pub t: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub per_sample: Vec<FrameScore>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub runtime_s: f64,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct FrameScore {
    pub psnr: f64,
    pub ssim: f64,
}

fn aggregate(scores: Vec<FrameScore>, started: Instant, cfg: &ModelConfig) -> EvalReport {
    let n = scores.len().max(1) as f64;
    EvalReport {
        psnr_mean: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim_mean: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        per_sample: scores,
        runtime_s: started.elapsed().as_secs_f64(),
        config_hash: config_hash(cfg),
    }
}

/// FNV-1a hash of the serialized model config, for report provenance.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Score each sample's direct interpolation at its own timestep.
pub fn eval_single<E: Element>(model: &Model<E>, samples: &[EvalSample<E>]) -> Result<EvalReport> {
    let started = Instant::now();
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.interpolate(&s.i0, &s.i1, s.t)?;
        scores.push(FrameScore {
            psnr: psnr(&out.synth.image, &s.gt, 1.0)?,
            ssim: ssim(&out.synth.image, &s.gt, 1.0)?,
        });
    }
    Ok(aggregate(scores, started, &model.cfg))
}

/// Recursive midpoint interpolation between two endpoints: the midpoint,
/// then quarters, then eighths — seven predictions in temporal order,
/// scored against the seven ground-truth intermediates.
pub fn eval_recursive_8x<E: Element>(
    model: &Model<E>,
    i0: &Tensor<E>,
    i8: &Tensor<E>,
    gts: &[Tensor<E>; 7],
) -> Result<EvalReport> {
    let started = Instant::now();
    let preds = recursive_midpoints(model, i0, i8)?;
    let mut scores = Vec::with_capacity(7);
    for (p, gt) in preds.iter().zip(gts.iter()) {
        scores.push(FrameScore { psnr: psnr(p, gt, 1.0)?, ssim: ssim(p, gt, 1.0)? });
    }
    Ok(aggregate(scores, started, &model.cfg))
}

/// The seven intermediate frames of the 8x protocol, in temporal order.
pub fn recursive_midpoints<E: Element>(
    model: &Model<E>,
    i0: &Tensor<E>,
    i8: &Tensor<E>,
) -> Result<[Tensor<E>; 7]> {
    let mid = |a: &Tensor<E>, b: &Tensor<E>| -> Result<Tensor<E>> {
        Ok(model.interpolate(a, b, 0.5)?.synth.image)
    };
    let f4 = mid(i0, i8)?;
    let f2 = mid(i0, &f4)?;
    let f6 = mid(&f4, i8)?;
    let f1 = mid(i0, &f2)?;
    let f3 = mid(&f2, &f4)?;
    let f5 = mid(&f4, &f6)?;
    let f7 = mid(&f6, i8)?;
    Ok([f1, f2, f3, f4, f5, f6, f7])
}

/// Gradient-based receptive-field probe: how strongly each pixel of the
/// second input frame influences a rectangular output region.
pub struct ErfMap {
    /// Channel-summed gradient magnitudes over frame 1, normalized to [0,1].
    pub heatmap: Vec<f64>,
    pub h: usize,
    pub w: usize,
    /// Largest flow displacement magnitude seen during the probe, in px.
    pub max_flow: f64,
}

impl ErfMap {
    /// Total heatmap mass at Chebyshev distance > `radius` from the region.
    pub fn mass_outside(&self, region: (usize, usize, usize, usize), radius: f64) -> f64 {
        let (rx, ry, rw, rh) = region;
        let mut mass = 0.0;
        for y in 0..self.h {
            for x in 0..self.w {
                let dx = if x < rx {
                    (rx - x) as f64
                } else if x >= rx + rw {
                    (x - (rx + rw - 1)) as f64
                } else {
                    0.0
                };
                let dy = if y < ry {
                    (ry - y) as f64
                } else if y >= ry + rh {
                    (y - (ry + rh - 1)) as f64
                } else {
                    0.0
                };
                if dx.max(dy) > radius {
                    mass += self.heatmap[y * self.w + x];
                }
            }
        }
        mass
    }

    pub fn total_mass(&self) -> f64 {
        self.heatmap.iter().sum()
    }
}

/// Probe the ERF of `region` (x, y, w, h in output pixels) with respect to
/// frame 1.
pub fn erf_probe<E: Element>(
    model: &Model<E>,
    i0: &Tensor<E>,
    i1: &Tensor<E>,
    region: (usize, usize, usize, usize),
) -> Result<ErfMap> {
    let (h, w) = (i1.shape()[2], i1.shape()[3]);
    let (rx, ry, rw, rh) = region;
    if rx + rw > w || ry + rh > h || rw == 0 || rh == 0 {
        return Err(Error::Data(format!(
            "erf region {region:?} outside {h}x{w} output"
        )));
    }
    let probe = i1.requires_grad_leaf();
    let out = model.interpolate(i0, &probe, 0.5)?;
    let rows: Vec<usize> = (ry..ry + rh).collect();
    let cols: Vec<usize> = (rx..rx + rw).collect();
    let target = out
        .synth
        .image
        .index_select(2, &rows)
        .index_select(3, &cols)
        .sum_all();
    let grads = target.backward();
    let g = grads
        .get(&probe)
        .ok_or_else(|| Error::Data("output region is disconnected from frame 1".into()))?;
    let mut heat = vec![0.0f64; h * w];
    let plane = h * w;
    for (i, v) in g.iter().enumerate() {
        heat[i % plane] += v.as_f64().abs();
    }
    let max = heat.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Err(Error::Data("output region is disconnected from frame 1".into()));
    }
    for v in &mut heat {
        *v /= max;
    }
    let max_flow = out
        .field
        .upsample(4)?
        .flow
        .data()
        .iter()
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max);
    Ok(ErfMap { heatmap: heat, h, w, max_flow })
}

/// Analytic floating-point operation estimate for one interpolation at the
/// given input extents.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlopCount {
    /// Convolutions and projections.
    pub conv: f64,
    /// Selective-scan recurrences (linear in token count).
    pub scan: f64,
    /// Everything else (norms, warps, resizes, gating).
    pub other: f64,
    /// A hypothetical full-attention mixer over the same token sequences
    /// (quadratic in token count), for comparison.
    pub attention_reference: f64,
}

impl FlopCount {
    pub fn total(&self) -> f64 {
        self.conv + self.scan + self.other
    }
}

/// Count the cost of the model's ops from config arithmetic alone.
pub fn op_counter(cfg: &ModelConfig, h: usize, w: usize) -> FlopCount {
    let c = cfg.base_channels as f64;
    let mut f = FlopCount::default();
    let conv = |f: &mut FlopCount, cin: f64, cout: f64, k: f64, hw: f64, groups: f64| {
        f.conv += 2.0 * cin / groups * cout * k * k * hw;
    };
    let hw = (h * w) as f64;
    // per-frame extractor (two frames)
    for _ in 0..2 {
        conv(&mut f, 3.0, c, 3.0, hw, 1.0);
        for l in 0..3u32 {
            let cin = c * f64::from(1 << l);
            conv(&mut f, cin, 2.0 * cin, 3.0, hw / f64::powi(4.0, l as i32 + 1), 1.0);
        }
    }
    // mixing stacks at H/8 (8C) and H/16 (16C)
    for (ch, div) in [(8.0 * c, 64.0), (16.0 * c, 256.0)] {
        let sp = hw / div; // spatial positions per frame
        let tokens = 2.0 * sp;
        let el = ch * cfg.expand as f64;
        let n = cfg.d_state as f64;
        for _ in 0..cfg.blocks_per_scale {
            if cfg.conv_only {
                conv(&mut f, ch, ch, 3.0, 2.0 * sp, 1.0);
                conv(&mut f, ch, ch, 3.0, 2.0 * sp, 1.0);
            } else {
                conv(&mut f, ch, 2.0 * el, 1.0, 2.0 * sp, 1.0); // in_proj
                conv(&mut f, el, el, cfg.dconv as f64, 2.0 * sp, el); // depthwise
                // four directional scans plus their parameter projections
                f.scan += 4.0 * 12.0 * tokens * el * n;
                f.other += 4.0 * 2.0 * tokens * el * (2.0 * n + 2.0 * (el / 16.0).ceil());
                conv(&mut f, el, ch, 1.0, 2.0 * sp, 1.0); // out_proj
                // channel attention
                conv(&mut f, ch, ch, 3.0, 2.0 * sp, 1.0);
                conv(&mut f, ch, ch, 3.0, 2.0 * sp, 1.0);
                f.other += 2.0 * sp * ch * 4.0;
                // a full-attention mixer in place of the four scans
                f.attention_reference += 4.0 * 2.0 * tokens * tokens * el;
            }
        }
        conv(&mut f, ch, 2.0 * ch, 3.0, sp / 2.0, 1.0); // embed between scales
    }
    // flow heads with their local-correlation inputs
    let hidden = cfg.flow_hidden() as f64;
    let (corr16, corr8) = (49.0, 25.0);
    let sp16 = hw / 256.0;
    let (corr4, sp4) = (49.0, hw / 16.0);
    // image-level displacement prior: anti-aliased pooling to quarter
    // resolution plus a windowed least-squares solve per position
    f.other += hw * 25.0 * 3.0 + sp4 * (25.0 * 3.0 + 5.0 * (3.0 + 25.0) + 20.0);
    f.other += corr16 * 4.0 * 16.0 * c * sp16;
    conv(&mut f, 32.0 * c + 9.0 + corr16, hidden, 3.0, sp16, 1.0);
    conv(&mut f, hidden, hidden, 3.0, sp16, 1.0);
    conv(&mut f, hidden, 5.0, 3.0, sp16, 1.0);
    let sp8 = hw / 64.0;
    for _ in 0..cfg.flow_iterations {
        f.other += corr8 * 4.0 * 8.0 * c * sp8 + corr4 * 4.0 * 4.0 * c * sp4;
        conv(&mut f, 32.0 * c + 8.0 + corr8 + corr4, hidden, 3.0, sp8, 1.0);
        conv(&mut f, hidden, hidden, 3.0, sp8, 1.0);
        conv(&mut f, hidden, 5.0, 3.0, sp8, 1.0);
    }
    // refiner
    let d = cfg.refine_width() as f64;
    conv(&mut f, 20.0, d, 3.0, hw, 1.0);
    conv(&mut f, d, d, 3.0, hw, 1.0);
    conv(&mut f, d, 2.0 * d, 3.0, hw / 4.0, 1.0);
    conv(&mut f, 2.0 * d + 4.0 * c, 2.0 * d, 3.0, hw / 4.0, 1.0);
    conv(&mut f, 2.0 * d, 4.0 * d, 3.0, hw / 16.0, 1.0);
    conv(&mut f, 4.0 * d + 8.0 * c, 4.0 * d, 3.0, hw / 16.0, 1.0);
    conv(&mut f, 4.0 * d, 2.0 * d, 3.0, hw / 4.0, 1.0);
    conv(&mut f, 4.0 * d, 2.0 * d, 3.0, hw / 4.0, 1.0);
    conv(&mut f, 2.0 * d, d, 3.0, hw, 1.0);
    conv(&mut f, 2.0 * d, d, 3.0, hw, 1.0);
    conv(&mut f, d, 3.0, 3.0, hw, 1.0);
    // warps, resizes, blending
    f.other += 40.0 * hw;
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_image(rng: &mut StdRng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            &[1, 3, h, w],
        )
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        // uniform error of 0.1 -> MSE 0.01 -> 20 dB
        let b = a.add_scalar(0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let zero = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let one = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        assert!((psnr(&zero, &one, 1.0).unwrap() - 0.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_reference_on_random_images() {
        let mut rng = StdRng::seed_from_u64(60);
        for _ in 0..5 {
            let a = rand_image(&mut rng, 32, 32);
            let b = rand_image(&mut rng, 32, 32);
            let ours = psnr(&a, &b, 1.0).unwrap();
            let refv = oracle::psnr_reference(a.data(), b.data(), 1.0);
            assert!((ours - refv).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = StdRng::seed_from_u64(61);
        let a = rand_image(&mut rng, 16, 16);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_reference_on_random_images() {
        let mut rng = StdRng::seed_from_u64(62);
        for _ in 0..3 {
            let a = rand_image(&mut rng, 32, 32);
            let b = rand_image(&mut rng, 32, 32);
            let ours = ssim(&a, &b, 1.0).unwrap();
            let mut refv = 0.0;
            for c in 0..3 {
                refv += oracle::ssim_reference_plane(
                    &a.data()[c * 1024..(c + 1) * 1024],
                    &b.data()[c * 1024..(c + 1) * 1024],
                    32,
                    32,
                    1.0,
                );
            }
            refv /= 3.0;
            assert!((ours - refv).abs() < 1e-6, "{ours} vs {refv}");
        }
    }

    #[test]
    fn ssim_inverted_binary_is_negative() {
        // checkerboard against its inverse: structure term flips sign
        let mut data = vec![0.0f64; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                if (x / 4 + y / 4) % 2 == 0 {
                    data[y * 32 + x] = 1.0;
                }
            }
        }
        let a = Tensor::new(data.clone(), &[1, 1, 32, 32]);
        let inv: Vec<f64> = data.iter().map(|v| 1.0 - v).collect();
        let b = Tensor::new(inv, &[1, 1, 32, 32]);
        assert!(ssim(&a, &b, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn ssim_tolerates_small_global_shift() {
        let mut rng = StdRng::seed_from_u64(63);
        let a = rand_image(&mut rng, 32, 32);
        let b = a.add_scalar(0.02);
        // luminance term degrades only mildly under a constant shift
        assert!(ssim(&a, &b, 1.0).unwrap() > 0.9);
    }

    #[test]
    fn ssim_rejects_small_extents() {
        let a = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn scan_cost_quadruples_when_extents_double() {
        let cfg = ModelConfig::default();
        let a = op_counter(&cfg, 64, 64);
        let b = op_counter(&cfg, 128, 128);
        let ratio = b.scan / a.scan;
        assert!((ratio - 4.0).abs() < 0.01, "scan ratio {ratio}");
        let attn = b.attention_reference / a.attention_reference;
        assert!((attn - 16.0).abs() < 0.01, "attention ratio {attn}");
    }

    #[test]
    fn op_counts_are_additive_and_positive() {
        let cfg = ModelConfig::default();
        let f = op_counter(&cfg, 64, 64);
        assert!(f.conv > 0.0 && f.scan > 0.0 && f.other > 0.0);
        assert!((f.total() - (f.conv + f.scan + f.other)).abs() < 1e-6);
        let conv_only = op_counter(&ModelConfig { conv_only: true, ..cfg }, 64, 64);
        assert_eq!(conv_only.scan, 0.0);
    }

    #[test]
    fn recursive_protocol_structure() {
        use crate::model::Model;
        let cfg = ModelConfig { d_state: 2, ..ModelConfig::tiny(4, 1, 2) };
        let model = Model::<f64>::new(cfg, 70).unwrap();
        let mut rng = StdRng::seed_from_u64(64);
        let i0 = rand_image(&mut rng, 32, 32);
        let i8 = rand_image(&mut rng, 32, 32);
        let preds = recursive_midpoints(&model, &i0, &i8).unwrap();
        assert_eq!(preds.len(), 7);
        let direct = model.interpolate(&i0, &i8, 0.5).unwrap().synth.image;
        assert_eq!(preds[3].data(), direct.data());
    }

    #[test]
    fn erf_probe_normalized_and_nonzero() {
        use crate::model::Model;
        let cfg = ModelConfig { d_state: 2, ..ModelConfig::tiny(4, 1, 2) };
        let model = Model::<f64>::new(cfg, 71).unwrap();
        let mut rng = StdRng::seed_from_u64(65);
        let i0 = rand_image(&mut rng, 32, 32);
        let i1 = rand_image(&mut rng, 32, 32);
        let map = erf_probe(&model, &i0, &i1, (12, 12, 4, 4)).unwrap();
        let max = map.heatmap.iter().cloned().fold(0.0f64, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(map.total_mass() > 0.0);
        assert!(erf_probe(&model, &i0, &i1, (30, 30, 8, 8)).is_err());
    }
}
