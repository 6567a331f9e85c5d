//! Training: losses, optimizer, schedules, synthetic motion data, and the
//! strategy-driven epoch loop.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics::psnr;
use crate::model::{InterpOutput, Model};
use crate::params::ParamStore;
use crate::tensor::{Conv2dSpec, Element, Gradients, Tensor};

// ---------------------------------------------------------------------------
// losses

/// 5x5 binomial blur applied per channel with zero padding.
fn gaussian_blur<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let c = x.shape()[1];
    let base = [1.0f64, 4.0, 6.0, 4.0, 1.0];
    let mut k = Vec::with_capacity(c * 25);
    for _ in 0..c {
        for wy in base {
            for wx in base {
                k.push(E::of_f64(wy * wx / 256.0));
            }
        }
    }
    let kernel = Tensor::new(k, &[c, 1, 5, 5]);
    x.conv2d(&kernel, None, Conv2dSpec { stride: 1, pad: 2, groups: c })
}

/// Keep even-indexed rows and columns.
fn decimate<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let rows: Vec<usize> = (0..h).step_by(2).collect();
    let cols: Vec<usize> = (0..w).step_by(2).collect();
    x.index_select(2, &rows).index_select(3, &cols)
}

fn laplacian_pyramid<E: Element>(x: &Tensor<E>, levels: usize) -> Result<Vec<Tensor<E>>> {
    let mut gaussians = vec![x.clone()];
    for _ in 1..levels {
        let prev = gaussians.last().unwrap();
        gaussians.push(decimate(&gaussian_blur(prev)?));
    }
    let mut laps = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        let g = &gaussians[l];
        let up = gaussians[l + 1].resize_bilinear(g.shape()[2], g.shape()[3])?;
        laps.push(g.sub(&up)?);
    }
    laps.push(gaussians[levels - 1].clone());
    Ok(laps)
}

/// Weighted multi-scale L1: sum over pyramid levels of 2^l times the mean
/// absolute difference of the level-l Laplacian bands.
pub fn laplacian_loss<E: Element>(
    pred: &Tensor<E>,
    gt: &Tensor<E>,
    levels: usize,
) -> Result<Tensor<E>> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidShape("laplacian_loss: shape mismatch".into()));
    }
    let (h, w) = (pred.shape()[2], pred.shape()[3]);
    let min = 1usize << levels;
    if h < min || w < min {
        return Err(Error::InvalidShape(format!(
            "laplacian_loss with {levels} levels needs extents >= {min}, got {h}x{w}"
        )));
    }
    let lp = laplacian_pyramid(pred, levels)?;
    let lg = laplacian_pyramid(gt, levels)?;
    let mut total = Tensor::scalar(E::zero());
    for (l, (a, b)) in lp.iter().zip(&lg).enumerate() {
        let band = a.sub(b)?.abs_t().mean_all();
        total = total.add(&band.mul_scalar(E::of_f64(f64::powi(2.0, l as i32))))?;
    }
    Ok(total)
}

/// Multi-scale alignment loss: Laplacian-pyramid L1 of each flow-warped input
/// against the ground-truth intermediate. This term bypasses the refiner, so
/// it is the only loss the flow heads see undiluted; the coarse pyramid levels
/// matter because a plain full-resolution L1 yields misdirected gradients
/// whenever fine texture has shifted by more than half its period, while the
/// low-pass bands stay within the linear range of the warp for any motion the
/// training scenes contain.
pub fn warp_loss<E: Element>(
    w0: &Tensor<E>,
    w1: &Tensor<E>,
    gt: &Tensor<E>,
) -> Result<Tensor<E>> {
    let a = laplacian_loss(w0, gt, LAP_LEVELS)?;
    let b = laplacian_loss(w1, gt, LAP_LEVELS)?;
    a.add(&b)
}

pub const WARP_WEIGHT: f64 = 0.5;
pub const LAP_LEVELS: usize = 5;

/// Laplacian and warp components for one prediction.
pub fn sample_loss<E: Element>(
    out: &InterpOutput<E>,
    gt: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let lap = laplacian_loss(&out.synth.image, gt, LAP_LEVELS)?;
    let warp = warp_loss(&out.synth.warp0, &out.synth.warp1, gt)?;
    Ok((lap, warp))
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Decoupled-weight-decay Adam with bias correction. Moments are kept in
/// f64 regardless of the parameter element type. A parameter whose gradient
/// contains a non-finite value is skipped for that step (and counted);
/// a missing gradient counts as zero.
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub skipped: u64,
}

impl AdamW {
    pub fn new<E: Element>(store: &ParamStore<E>, cfg: AdamWConfig) -> AdamW {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            skipped: 0,
        }
    }

    pub fn step<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &Gradients<E>,
        lr: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (k, id) in store.ids().enumerate() {
            let p = store.get(id);
            let g: Vec<f64> = match grads.get(&p) {
                Some(g) => {
                    if g.iter().any(|v| !v.as_f64().is_finite()) {
                        self.skipped += 1;
                        eprintln!(
                            "adamw: skipping {} at step {} (non-finite gradient)",
                            store.name(id),
                            self.step_count
                        );
                        continue;
                    }
                    g.iter().map(|v| v.as_f64()).collect()
                }
                None => vec![0.0; p.numel()],
            };
            let mut new = Vec::with_capacity(p.numel());
            for (i, pv) in p.data().iter().enumerate() {
                let m = self.cfg.beta1 * self.m[k][i] + (1.0 - self.cfg.beta1) * g[i];
                let v = self.cfg.beta2 * self.v[k][i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                self.m[k][i] = m;
                self.v[k][i] = v;
                let update = (m / bc1) / ((v / bc2).sqrt() + self.cfg.eps);
                let pf = pv.as_f64();
                new.push(E::of_f64(pf - lr * (update + self.cfg.weight_decay * pf)));
            }
            store.set_data(id, new);
        }
    }

    /// Moment tensors for checkpointing, keyed by parameter name.
    pub fn export<E: Element>(&self, store: &ParamStore<E>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (k, (name, t)) in store.iter().enumerate() {
            out.push((format!("opt.m.{name}"), t.shape().to_vec(),
                      self.m[k].iter().map(|v| *v as f32).collect()));
            out.push((format!("opt.v.{name}"), t.shape().to_vec(),
                      self.v[k].iter().map(|v| *v as f32).collect()));
        }
        out
    }

    pub fn import<E: Element>(&mut self, store: &ParamStore<E>, ck: &Checkpoint) -> Result<()> {
        for (k, (name, _)) in store.iter().enumerate() {
            let (_, m) = ck
                .tensor(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))?;
            let (_, v) = ck
                .tensor(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))?;
            self.m[k] = m.iter().map(|x| *x as f64).collect();
            self.v[k] = v.iter().map(|x| *x as f64).collect();
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// schedules

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then cosine decay
/// to `lr_min` over the remaining steps. Continuous at the junction.
pub fn lr_at(step: u64, warmup: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if step <= warmup && warmup > 0 {
        return lr_max * step as f64 / warmup as f64;
    }
    if step >= total {
        return lr_min;
    }
    let span = (total - warmup).max(1) as f64;
    let phase = (step - warmup) as f64 / span;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Epochs between growth steps.
    pub period: usize,
    /// Starting resize extent in px.
    pub resize_base: u32,
    /// Multiplicative growth of the resize extent per period.
    pub growth: f64,
    /// Starting frame interval. The appendix-style schedule starting at 1
    /// is available by setting this to 1.
    pub interval_base: u32,
    /// Fraction of large-motion samples per batch.
    pub mix: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { period: 50, resize_base: 256, growth: 1.1, interval_base: 2, mix: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curriculum {
    pub size: u32,
    pub interval: u32,
    pub mix: f64,
}

impl Curriculum {
    /// Motion multiplier for the large pool relative to the schedule start.
    pub fn motion_scale(&self, cfg: &CurriculumConfig) -> f64 {
        (self.size as f64 / cfg.resize_base as f64)
            * (self.interval as f64 / cfg.interval_base as f64)
    }
}

/// Resize extent, frame interval, and batch mix at the given epoch: the
/// extent grows 10% and the interval doubles every `period` epochs.
pub fn curriculum_at(epoch: usize, cfg: &CurriculumConfig) -> Curriculum {
    let k = (epoch / cfg.period) as u32;
    Curriculum {
        size: (cfg.resize_base as f64 * cfg.growth.powi(k as i32)).round() as u32,
        interval: cfg.interval_base << k,
        mix: cfg.mix,
    }
}

// ---------------------------------------------------------------------------
// synthetic data

#[derive(Clone, Debug)]
pub enum ShapeKind {
    Disk { radius: f64 },
    /// Axis extents before rotation; spins at `spin` rad per unit time.
    Square { half: f64, angle: f64, spin: f64 },
}

#[derive(Clone, Debug)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    /// Displacement over the whole [0,1] time span, in px.
    pub velocity: [f64; 2],
    pub color: [f64; 3],
}

impl ShapeSpec {
    fn coverage(&self, x: f64, y: f64, tau: f64) -> f64 {
        let cx = self.center[0] + tau * self.velocity[0];
        let cy = self.center[1] + tau * self.velocity[1];
        let d = match self.kind {
            ShapeKind::Disk { radius } => {
                ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - radius
            }
            ShapeKind::Square { half, angle, spin } => {
                let a = angle + spin * tau;
                let (s, c) = a.sin_cos();
                let rx = c * (x - cx) + s * (y - cy);
                let ry = -s * (x - cx) + c * (y - cy);
                rx.abs().max(ry.abs()) - half
            }
        };
        // one-pixel soft edge for anti-aliasing
        (0.5 - d).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    /// Per-channel sinusoid mixture: (fx, fy, phase, amplitude).
    pub background: [[(f64, f64, f64, f64); 3]; 3],
    pub shapes: Vec<ShapeSpec>,
}

impl SceneSpec {
    /// Random scene of 3-8 shapes, each translating by `motion_px` in a
    /// random direction over the unit time span.
    pub fn sample(rng: &mut ChaCha8Rng, motion_px: f64, size: usize) -> SceneSpec {
        let mut background = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for ch in &mut background {
            for wave in ch.iter_mut() {
                *wave = (
                    rng.gen_range(0.02..0.3),
                    rng.gen_range(0.02..0.3),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.05..0.15),
                );
            }
        }
        let count = rng.gen_range(3..=8);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let extent = rng.gen_range(0.04..0.15) * size as f64;
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Disk { radius: extent }
            } else {
                ShapeKind::Square {
                    half: extent,
                    angle: rng.gen_range(0.0..std::f64::consts::TAU),
                    // spin scales with motion so motion 0 is a static scene
                    spin: rng.gen_range(-0.6..0.6) * (motion_px / 8.0).clamp(0.0, 1.0),
                }
            };
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let velocity = [motion_px * theta.cos(), motion_px * theta.sin()];
            // keep start and end positions inside the frame when possible
            let center = [0, 1].map(|axis| {
                let lo = (extent - velocity[axis].min(0.0)).min(size as f64 / 2.0);
                let hi = (size as f64 - extent - velocity[axis].max(0.0)).max(size as f64 / 2.0);
                if lo < hi { rng.gen_range(lo..hi) } else { size as f64 / 2.0 }
            });
            shapes.push(ShapeSpec {
                kind,
                center,
                velocity,
                color: [(); 3].map(|_| rng.gen_range(0.0..1.0)),
            });
        }
        SceneSpec { background, shapes }
    }

    /// Render the scene at time `tau` into a [1,3,size,size] image.
    pub fn render<E: Element>(&self, tau: f64, size: usize) -> Tensor<E> {
        let mut data = vec![E::zero(); 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                let mut px = [0.0f64; 3];
                for (c, waves) in self.background.iter().enumerate() {
                    let mut v = 0.5;
                    for (wx, wy, phase, amp) in waves {
                        v += amp * (wx * fx + wy * fy + phase).sin();
                    }
                    px[c] = v;
                }
                for shape in &self.shapes {
                    let a = shape.coverage(fx, fy, tau);
                    if a > 0.0 {
                        for c in 0..3 {
                            px[c] = (1.0 - a) * px[c] + a * shape.color[c];
                        }
                    }
                }
                for c in 0..3 {
                    data[c * size * size + y * size + x] = E::of_f64(px[c].clamp(0.0, 1.0));
                }
            }
        }
        Tensor::new(data, &[1, 3, size, size])
    }
}

pub struct SyntheticSample<E: Element> {
    pub i0: Tensor<E>,
    pub i1: Tensor<E>,
    pub gt: Tensor<E>,
    pub t: f64,
    pub motion_px: f64,
    pub seed: u64,
}

/// Deterministic synthetic triplet: shapes translating/rotating over a
/// textured background, with the intermediate frame rendered analytically
/// at time `t`.
pub fn gen_synthetic<E: Element>(seed: u64, motion_px: f64, t: f64, size: usize) -> SyntheticSample<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SceneSpec::sample(&mut rng, motion_px, size);
    SyntheticSample {
        i0: scene.render(0.0, size),
        i1: scene.render(1.0, size),
        gt: scene.render(t, size),
        t,
        motion_px,
        seed,
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Small-motion pool only.
    SmallOnly,
    /// Small pool for the first half of training, large pool after.
    Sequential,
    /// Fixed small/large mix for the whole run.
    Mixed,
    /// Mixed batches whose large-motion magnitude grows on the curriculum
    /// schedule.
    Curriculum,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "small-only" => Ok(Strategy::SmallOnly),
            "sequential" => Ok(Strategy::Sequential),
            "mixed" => Ok(Strategy::Mixed),
            "curriculum" => Ok(Strategy::Curriculum),
            other => Err(Error::Data(format!(
                "unknown strategy '{other}' (expected small-only|sequential|mixed|curriculum)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SmallOnly => "small-only",
            Strategy::Sequential => "sequential",
            Strategy::Mixed => "mixed",
            Strategy::Curriculum => "curriculum",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Small-motion samples per batch.
    pub batch_small: usize,
    /// Large-motion samples per batch (for mixing strategies).
    pub batch_large: usize,
    /// Square crop extent; must be a multiple of 16.
    pub crop: usize,
    pub warmup_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub curriculum: CurriculumConfig,
    pub seed: u64,
    /// Epoch period between eval snapshots.
    pub eval_every: usize,
    /// Samples per eval pool.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // desk-scale shrink of the reference regimen: crop 128 (vs 256),
        // batches 8/2 (vs 32/8), 60 epochs with period 10 (vs 300/50)
        TrainConfig {
            epochs: 60,
            steps_per_epoch: 5,
            batch_small: 8,
            batch_large: 2,
            crop: 128,
            warmup_steps: 30,
            lr_max: 2e-4,
            lr_min: 2e-5,
            optimizer: AdamWConfig::default(),
            curriculum: CurriculumConfig { period: 10, ..CurriculumConfig::default() },
            seed: 0,
            eval_every: 30,
            eval_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min >= self.lr_max {
            return Err(Error::Data("lr_min must be below lr_max".into()));
        }
        if self.crop % 16 != 0 || self.crop < (1 << LAP_LEVELS) {
            return Err(Error::Data(format!(
                "crop must be a multiple of 16 and at least {}, got {}",
                1 << LAP_LEVELS,
                self.crop
            )));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_small + self.batch_large == 0
        {
            return Err(Error::Data("empty training schedule".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

pub const SMALL_MOTION_MAX: f64 = 8.0;
pub const LARGE_MOTION_RANGE: (f64, f64) = (16.0, 96.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pool {
    Small,
    Large,
}

/// Deterministic per-sample seed from run coordinates (splitmix64 over a
/// simple combination).
fn sample_seed(seed: u64, epoch: usize, step: usize, idx: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((epoch as u64) << 40)
        .wrapping_add((step as u64) << 20)
        .wrapping_add(idx as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn draw_sample<E: Element>(
    seed: u64,
    pool: Pool,
    motion_scale: f64,
    crop: usize,
) -> SyntheticSample<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a);
    let motion = match pool {
        Pool::Small => rng.gen_range(0.0..SMALL_MOTION_MAX),
        Pool::Large => {
            let base = rng.gen_range(LARGE_MOTION_RANGE.0..LARGE_MOTION_RANGE.1);
            (base * motion_scale).min(0.7 * crop as f64)
        }
    };
    let t = rng.gen_range(0.25..0.75);
    let mut s = gen_synthetic::<E>(seed, motion, t, crop);
    // time-reversal augmentation
    if rng.gen_bool(0.5) {
        std::mem::swap(&mut s.i0, &mut s.i1);
        s.t = 1.0 - s.t;
    }
    s
}

fn batch_pools(strategy: Strategy, cfg: &TrainConfig, epoch: usize) -> Vec<Pool> {
    let n = cfg.batch_small + cfg.batch_large;
    match strategy {
        Strategy::SmallOnly => vec![Pool::Small; n],
        Strategy::Sequential => {
            if epoch < cfg.epochs / 2 {
                vec![Pool::Small; n]
            } else {
                vec![Pool::Large; n]
            }
        }
        Strategy::Mixed | Strategy::Curriculum => {
            let mut pools = vec![Pool::Small; cfg.batch_small];
            pools.extend(vec![Pool::Large; cfg.batch_large]);
            pools
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_lap: f64,
    pub loss_warp: f64,
    pub lr: f64,
    pub psnr_small: f64,
    pub psnr_large: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub strategy: String,
    pub small_drawn: usize,
    pub large_drawn: usize,
    pub skipped_updates: u64,
    pub final_loss: f64,
    pub psnr_small: f64,
    pub psnr_large: f64,
    pub rows: Vec<MetricsRow>,
}

/// Fixed held-out pools for snapshot evaluation; the large pool stays at
/// the top of the motion range regardless of strategy.
pub fn eval_pools<E: Element>(
    cfg: &TrainConfig,
) -> (Vec<SyntheticSample<E>>, Vec<SyntheticSample<E>>) {
    let small = (0..cfg.eval_samples)
        .map(|i| {
            let seed = sample_seed(cfg.seed, usize::MAX / 2, 0, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let motion = rng.gen_range(1.0..SMALL_MOTION_MAX);
            gen_synthetic(seed, motion, 0.5, cfg.crop)
        })
        .collect();
    let large = (0..cfg.eval_samples)
        .map(|i| {
            let seed = sample_seed(cfg.seed, usize::MAX / 2, 1, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let motion = rng.gen_range(32.0..(0.6 * cfg.crop as f64).max(33.0));
            gen_synthetic(seed, motion, 0.5, cfg.crop)
        })
        .collect();
    (small, large)
}

fn mean_psnr<E: Element>(model: &Model<E>, pool: &[SyntheticSample<E>]) -> Result<f64> {
    let mut acc = 0.0;
    for s in pool {
        // a non-finite model scores NaN rather than aborting the run here;
        // the training step reports the halt with full diagnostics
        acc += match model.interpolate(&s.i0, &s.i1, s.t) {
            Ok(out) => psnr(&out.synth.image, &s.gt, 1.0)?,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
    }
    Ok(acc / pool.len().max(1) as f64)
}

/// One optimizer step on a prepared batch; returns (laplacian, warp) means.
pub fn train_step<E: Element>(
    model: &mut Model<E>,
    opt: &mut AdamW,
    batch: &[SyntheticSample<E>],
    lr: f64,
) -> Result<(f64, f64)> {
    let mut lap_sum = Tensor::scalar(E::zero());
    let mut warp_sum = Tensor::scalar(E::zero());
    for s in batch {
        let out = model.interpolate(&s.i0, &s.i1, s.t)?;
        let (lap, warp) = sample_loss(&out, &s.gt)?;
        lap_sum = lap_sum.add(&lap)?;
        warp_sum = warp_sum.add(&warp)?;
    }
    let inv = E::of_f64(1.0 / batch.len() as f64);
    let lap_mean = lap_sum.mul_scalar(inv);
    let warp_mean = warp_sum.mul_scalar(inv);
    let total = lap_mean.add(&warp_mean.mul_scalar(E::of_f64(WARP_WEIGHT)))?;
    let (lap_v, warp_v) = (lap_mean.item().as_f64(), warp_mean.item().as_f64());
    if !total.item().as_f64().is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (lap {lap_v}, warp {warp_v})"
        )));
    }
    let grads = total.backward();
    opt.step(&mut model.store, &grads, lr);
    Ok((lap_v, warp_v))
}

/// Strategy-driven training loop with metrics CSV, periodic eval snapshots,
/// and per-epoch checkpoints under `out_dir`. Pass `resume` to continue
/// from a checkpoint written by a previous run with the same configs.
pub fn train<E: Element>(
    model: &mut Model<E>,
    cfg: &TrainConfig,
    strategy: Strategy,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    if let Some(path) = resume {
        let ck = Checkpoint::read(path)?;
        ck.apply_to(model)?;
        opt.import(&model.store, &ck)?;
        start_epoch = ck.manifest.state["epoch_next"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))? as usize;
        global_step = ck.manifest.state["global_step"].as_u64().unwrap_or(0);
        opt.step_count = global_step;
    }
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(if start_epoch == 0 {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "epoch,step,loss_lap,loss_warp,lr,psnr_small,psnr_large")?;
        f
    } else {
        std::fs::OpenOptions::new().create(true).append(true).open(&csv_path)?
    });

    let (eval_small, eval_large) = eval_pools::<E>(cfg);
    let mut psnr_small = mean_psnr(model, &eval_small)?;
    let mut psnr_large = mean_psnr(model, &eval_large)?;
    let (mut small_drawn, mut large_drawn) = (0usize, 0usize);
    let mut rows = Vec::new();
    let mut last_losses = (0.0, 0.0);

    for epoch in start_epoch..cfg.epochs {
        let cur = curriculum_at(epoch, &cfg.curriculum);
        let motion_scale = match strategy {
            Strategy::Curriculum => cur.motion_scale(&cfg.curriculum),
            _ => 1.0,
        };
        let pools = batch_pools(strategy, cfg, epoch);
        for step in 0..cfg.steps_per_epoch {
            let batch: Vec<SyntheticSample<E>> = pools
                .iter()
                .enumerate()
                .map(|(i, pool)| {
                    match pool {
                        Pool::Small => small_drawn += 1,
                        Pool::Large => large_drawn += 1,
                    }
                    draw_sample(sample_seed(cfg.seed, epoch, step, i), *pool, motion_scale, cfg.crop)
                })
                .collect();
            global_step += 1;
            let lr = lr_at(global_step, cfg.warmup_steps, cfg.total_steps(), cfg.lr_max, cfg.lr_min);
            let (lap, warp) = match train_step(model, &mut opt, &batch, lr) {
                Ok(v) => v,
                Err(e) => {
                    let dump = serde_json::json!({
                        "error": e.to_string(),
                        "epoch": epoch,
                        "step": step,
                        "global_step": global_step,
                        "lr": lr,
                        "strategy": strategy.to_string(),
                        "last_loss_lap": last_losses.0,
                        "last_loss_warp": last_losses.1,
                        "param_norms": model.store.iter().map(|(n, t)| {
                            let norm = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                            serde_json::json!({"name": n, "l2": norm})
                        }).collect::<Vec<_>>(),
                    });
                    std::fs::write(
                        out_dir.join("diagnostic_dump.json"),
                        serde_json::to_string_pretty(&dump)?,
                    )?;
                    return Err(e);
                }
            };
            last_losses = (lap, warp);
            let row = MetricsRow {
                epoch,
                step: global_step,
                loss_lap: lap,
                loss_warp: warp,
                lr,
                psnr_small,
                psnr_large,
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                row.epoch, row.step, row.loss_lap, row.loss_warp, row.lr, row.psnr_small,
                row.psnr_large
            )?;
            rows.push(row);
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            psnr_small = mean_psnr(model, &eval_small)?;
            psnr_large = mean_psnr(model, &eval_large)?;
        }
        let state = serde_json::json!({
            "epoch_next": epoch + 1,
            "global_step": global_step,
            "seed": cfg.seed,
            "strategy": strategy.to_string(),
        });
        let ck = Checkpoint::from_model(model, opt.export(&model.store), state);
        ck.write(out_dir.join("latest.ckpt"))?;
        if (epoch + 1) % cfg.eval_every == 0 {
            ck.write(out_dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
        }
        csv.flush()?;
    }
    let final_loss = rows
        .last()
        .map(|r| r.loss_lap + WARP_WEIGHT * r.loss_warp)
        .unwrap_or(f64::NAN);
    Ok(TrainReport {
        strategy: strategy.to_string(),
        small_drawn,
        large_drawn,
        skipped_updates: opt.skipped,
        final_loss,
        psnr_small,
        psnr_large,
        rows,
    })
}

/// Repeatedly fit one fixed batch; returns the total loss trace.
pub fn overfit_one_batch<E: Element>(
    model: &mut Model<E>,
    batch: &[SyntheticSample<E>],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(&model.store, AdamWConfig::default());
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (lap, warp) = train_step(model, &mut opt, batch, lr)?;
        trace.push(lap + WARP_WEIGHT * warp);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::oracle;

    fn tiny_model(seed: u64) -> Model<f64> {
        Model::new(ModelConfig { d_state: 2, ..ModelConfig::tiny(4, 1, 2) }, seed).unwrap()
    }

    #[test]
    fn laplacian_loss_zero_iff_equal() {
        let s = gen_synthetic::<f64>(1, 5.0, 0.5, 64);
        let zero = laplacian_loss(&s.i0, &s.i0, LAP_LEVELS).unwrap();
        assert_eq!(zero.item(), 0.0);
        let pos = laplacian_loss(&s.i0, &s.i1, LAP_LEVELS).unwrap();
        assert!(pos.item() > 0.0);
    }

    #[test]
    fn laplacian_loss_matches_pixel_loop_reference() {
        // single-pixel delta plus a full random pair, both against the
        // 64-bit brute-force pyramid
        let s = gen_synthetic::<f64>(2, 4.0, 0.5, 64);
        let mut bumped = s.i0.data().to_vec();
        bumped[3 * 64 * 64 / 2 + 64 * 31 + 17] += 0.25;
        let b = Tensor::new(bumped, s.i0.shape());
        for (pred, gt) in [(&b, &s.i0), (&s.i0, &s.i1)] {
            let ours = laplacian_loss(pred, gt, LAP_LEVELS).unwrap().item();
            let refv =
                oracle::laplacian_reference(pred.data(), gt.data(), 3, 64, 64, LAP_LEVELS);
            assert!(
                oracle::rel_err(ours, refv) < 1e-9,
                "loss {ours} vs reference {refv}"
            );
        }
    }

    #[test]
    fn laplacian_loss_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
        assert!(laplacian_loss(&a, &a, LAP_LEVELS).is_err());
        assert!(laplacian_loss(&a, &a, 4).is_ok());
    }

    #[test]
    fn warp_loss_components_and_weighting() {
        let s = gen_synthetic::<f64>(3, 6.0, 0.5, 32);
        assert_eq!(warp_loss(&s.gt, &s.gt, &s.gt).unwrap().item(), 0.0);
        let w = warp_loss(&s.i0, &s.i1, &s.gt).unwrap().item();
        let l0 = laplacian_loss(&s.i0, &s.gt, LAP_LEVELS).unwrap().item();
        let l1 = laplacian_loss(&s.i1, &s.gt, LAP_LEVELS).unwrap().item();
        assert!((w - (l0 + l1)).abs() < 1e-12);
        assert_eq!(WARP_WEIGHT, 0.5);
    }

    #[test]
    fn loss_gradient_reaches_flow_parameters() {
        let model = tiny_model(11);
        let s = gen_synthetic::<f64>(4, 10.0, 0.5, 32);
        let out = model.interpolate(&s.i0, &s.i1, 0.5).unwrap();
        let (lap, warp) = sample_loss(&out, &s.gt).unwrap();
        let total = lap.add(&warp.mul_scalar(WARP_WEIGHT)).unwrap();
        let grads = total.backward();
        let mut hit = false;
        for (name, t) in model.store.iter() {
            if name.starts_with("flow.") {
                if let Some(g) = grads.get(t) {
                    if g.iter().any(|v| *v != 0.0) {
                        hit = true;
                    }
                }
            }
        }
        assert!(hit, "no flow parameter received gradient through the warp");
    }

    #[test]
    fn adamw_pure_decay_example() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", vec![1.0], &[1]);
        let cfg = AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&store, cfg);
        let p = store.get(id);
        // zero gradient: build a graph whose gradient w.r.t. p is 0
        let grads = p.mul_scalar(0.0).sum_all().backward();
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get(id).data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", vec![0.0], &[1]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&store, cfg);
        let p = store.get(id);
        let grads = p.mul_scalar(3.0).sum_all().backward(); // constant grad 3
        opt.step(&mut store, &grads, 0.01);
        // bias-corrected first step: m̂/√v̂ = g/|g| = 1, so the move is ~lr
        let moved = -store.get(id).data()[0];
        assert!((moved - 0.01).abs() < 1e-5, "moved {moved}");
    }

    #[test]
    fn adamw_skips_nonfinite_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", vec![1.0], &[1]);
        let b = store.add("b", vec![1.0], &[1]);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        // a's gradient is NaN (0/0 path), b's is finite
        let ta = store.get(a);
        let tb = store.get(b);
        let bad = ta.mul_scalar(f64::NAN).sum_all();
        let good = tb.mul_scalar(2.0).sum_all();
        let grads = bad.add(&good).unwrap().backward();
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(opt.skipped, 1);
        assert_eq!(store.get(a).data()[0], 1.0); // untouched
        assert!(store.get(b).data()[0] < 1.0);
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("p", vec![0.3, -0.7], &[2]);
            let mut opt = AdamW::new(&store, AdamWConfig::default());
            for _ in 0..5 {
                let p = store.get(id);
                let grads = p.mul(&p).unwrap().sum_all().backward();
                opt.step(&mut store, &grads, 0.01);
            }
            store.get(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let (warmup, total, max, min) = (100u64, 1100u64, 2e-4, 2e-5);
        assert_eq!(lr_at(0, warmup, total, max, min), 0.0);
        assert!((lr_at(warmup, warmup, total, max, min) - max).abs() < 1e-18);
        assert!((lr_at(total, warmup, total, max, min) - min).abs() < 1e-18);
        let mid = lr_at(warmup + (total - warmup) / 2, warmup, total, max, min);
        assert!((mid - (max + min) / 2.0).abs() < 1e-12);
        // continuity at the junction
        let before = lr_at(warmup - 1, warmup, total, max, min);
        let after = lr_at(warmup + 1, warmup, total, max, min);
        assert!((before - max).abs() < 3.0 * max / warmup as f64);
        assert!((after - max).abs() < 3.0 * max / (total - warmup) as f64);
    }

    #[test]
    fn curriculum_reference_epochs() {
        let cfg = CurriculumConfig::default();
        let c0 = curriculum_at(0, &cfg);
        assert_eq!((c0.size, c0.interval), (256, 2));
        let c50 = curriculum_at(50, &cfg);
        assert_eq!((c50.size, c50.interval), (282, 4));
        let c120 = curriculum_at(120, &cfg);
        assert_eq!((c120.size, c120.interval), (310, 8));
        assert_eq!(c0.mix, 0.2);
        // appendix-style start
        let alt = CurriculumConfig { interval_base: 1, ..cfg };
        assert_eq!(curriculum_at(0, &alt).interval, 1);
    }

    #[test]
    fn curriculum_is_monotone() {
        let cfg = CurriculumConfig::default();
        let mut prev = curriculum_at(0, &cfg);
        for epoch in 1..300 {
            let c = curriculum_at(epoch, &cfg);
            assert!(c.size >= prev.size && c.interval >= prev.interval);
            prev = c;
        }
    }

    #[test]
    fn synthetic_static_scene_is_constant() {
        let s = gen_synthetic::<f64>(9, 0.0, 0.4, 48);
        assert_eq!(s.i0.data(), s.i1.data());
        assert_eq!(s.i0.data(), s.gt.data());
    }

    #[test]
    fn synthetic_same_seed_bitwise_identical() {
        let a = gen_synthetic::<f64>(42, 12.0, 0.5, 48);
        let b = gen_synthetic::<f64>(42, 12.0, 0.5, 48);
        assert_eq!(a.i0.data(), b.i0.data());
        assert_eq!(a.i1.data(), b.i1.data());
        assert_eq!(a.gt.data(), b.gt.data());
        let c = gen_synthetic::<f64>(43, 12.0, 0.5, 48);
        assert_ne!(a.i0.data(), c.i0.data());
    }

    #[test]
    fn tracked_centroid_moves_by_motion_px() {
        // single bright disk on a flat dark background; intensity centroid
        // displacement measures the shape's motion
        for (seed, motion) in [(1u64, 10.0), (2, 24.0), (3, 5.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let size = 96;
            let mut scene = SceneSpec::sample(&mut rng, motion, size);
            scene.background = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
            scene.shapes.truncate(1);
            scene.shapes[0].color = [1.0, 1.0, 1.0];
            let centroid = |img: &Tensor<f64>| {
                let d = img.data();
                let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
                for y in 0..size {
                    for x in 0..size {
                        let v = (d[y * size + x] - 0.5).max(0.0); // above background
                        mx += v * x as f64;
                        my += v * y as f64;
                        mass += v;
                    }
                }
                (mx / mass, my / mass)
            };
            let a = centroid(&scene.render(0.0, size));
            let b = centroid(&scene.render(1.0, size));
            let disp = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            assert!(
                (disp - motion).abs() <= 0.5,
                "seed {seed}: measured {disp:.3}, requested {motion}"
            );
        }
    }

    #[test]
    fn overfit_reduces_loss_with_smoothed_decrease() {
        let mut model = tiny_model(21);
        let batch = vec![gen_synthetic::<f64>(100, 4.0, 0.5, 32)];
        let trace = overfit_one_batch(&mut model, &batch, 50, 1e-3).unwrap();
        let window = |i: usize| trace[i..i + 10].iter().sum::<f64>() / 10.0;
        for i in 0..trace.len() - 20 {
            assert!(
                window(i + 10) < window(i),
                "smoothed loss did not decrease at window {i}: {} -> {}",
                window(i),
                window(i + 10)
            );
        }
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn small_only_never_draws_large() {
        let mut model = tiny_model(22);
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 2,
            batch_small: 2,
            batch_large: 1,
            crop: 32,
            eval_samples: 1,
            eval_every: 2,
            warmup_steps: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = train(&mut model, &cfg, Strategy::SmallOnly, dir.path(), None).unwrap();
        assert_eq!(report.large_drawn, 0);
        assert_eq!(report.small_drawn, 2 * 2 * 3);
        let mixed_dir = tempfile::tempdir().unwrap();
        let mut model2 = tiny_model(22);
        let report2 = train(&mut model2, &cfg, Strategy::Mixed, mixed_dir.path(), None).unwrap();
        assert!(report2.large_drawn > 0);
    }

    #[test]
    fn metrics_csv_reproducible_across_runs() {
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 3,
            batch_small: 1,
            batch_large: 1,
            crop: 32,
            eval_samples: 1,
            eval_every: 1,
            warmup_steps: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(23);
            let dir = tempfile::tempdir().unwrap();
            train(&mut model, &cfg, Strategy::Mixed, dir.path(), None).unwrap();
            std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.starts_with("epoch,step,loss_lap,loss_warp,lr,psnr_small,psnr_large\n"));
        assert_eq!(a.lines().count(), 4);
    }

    #[test]
    fn resume_reproduces_next_step_loss_bitwise() {
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 2,
            batch_small: 1,
            batch_large: 1,
            crop: 32,
            eval_samples: 1,
            eval_every: 2,
            warmup_steps: 2,
            ..TrainConfig::default()
        };
        // f32 models: the checkpoint payload is f32, so restore is exact
        let tiny_model = |seed: u64| -> Model<f32> {
            Model::new(ModelConfig { d_state: 2, ..ModelConfig::tiny(4, 1, 2) }, seed).unwrap()
        };
        // uninterrupted run
        let mut full = tiny_model(24);
        let full_dir = tempfile::tempdir().unwrap();
        let full_report = train(&mut full, &cfg, Strategy::Mixed, full_dir.path(), None).unwrap();
        // interrupted: train 1 epoch, then resume from its checkpoint
        let half_cfg = TrainConfig { epochs: 1, ..cfg.clone() };
        let mut half = tiny_model(24);
        let half_dir = tempfile::tempdir().unwrap();
        train(&mut half, &half_cfg, Strategy::Mixed, half_dir.path(), None).unwrap();
        let mut resumed = tiny_model(999); // wrong init, overwritten by resume
        let res_dir = tempfile::tempdir().unwrap();
        let res_report = train(
            &mut resumed,
            &cfg,
            Strategy::Mixed,
            res_dir.path(),
            Some(&half_dir.path().join("latest.ckpt")),
        )
        .unwrap();
        // first resumed row must equal the uninterrupted run's third row
        let full_row = &full_report.rows[2];
        let res_row = &res_report.rows[0];
        assert_eq!(res_row.step, full_row.step);
        assert_eq!(res_row.loss_lap.to_bits(), full_row.loss_lap.to_bits());
        assert_eq!(res_row.loss_warp.to_bits(), full_row.loss_warp.to_bits());
    }

    #[test]
    fn nan_loss_halts_with_dump() {
        let mut model = tiny_model(25);
        // poison one parameter so the forward pass goes non-finite
        let id = model.store.ids().next().unwrap();
        let n = model.store.get(id).numel();
        model.store.set_data(id, vec![f64::NAN; n]);
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 1,
            batch_small: 1,
            batch_large: 0,
            crop: 32,
            eval_samples: 1,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut model, &cfg, Strategy::SmallOnly, dir.path(), None);
        assert!(err.is_err());
        assert!(dir.path().join("diagnostic_dump.json").exists());
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for s in ["small-only", "sequential", "mixed", "curriculum"] {
            let parsed: Strategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    #[test]
    fn curriculum_motion_scale_grows() {
        let cfg = CurriculumConfig { period: 10, ..CurriculumConfig::default() };
        let early = curriculum_at(0, &cfg).motion_scale(&cfg);
        let late = curriculum_at(35, &cfg).motion_scale(&cfg);
        assert!((early - 1.0).abs() < 1e-12);
        assert!(late > 8.0, "scale after three periods: {late}");
    }
}
