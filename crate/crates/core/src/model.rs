//! The end-to-end interpolation network: per-frame feature extraction,
//! two-scale inter-frame mixing (S6 blocks or a conv-only ablation), coarse
//! plus residual flow/mask estimation, backward warping, and a small U-Net
//! that refines the blended result.
//!
//! Resolution map for input H x W (divisible by 16): extractor pyramid at
//! H/2 (2C), H/4 (4C), H/8 (8C); inter-frame scales at H/8 (8C) and
//! H/16 (16C); flow estimated at H/16 then H/8, returned at H/4.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ln_channels, mixed_ssm_block, overlap_patch_embed, MsbConfig, MsbParams, PatchEmbedParams,
};
use crate::error::{Error, Result};
use crate::params::{randn, randn_fan_in, ParamId, ParamStore};
use crate::scan2d::{InterleavePolicy, ScanMode};
use crate::tensor::{Conv2dSpec, Element, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Base channel count C; the pyramid carries 2C/4C/8C.
    pub base_channels: usize,
    /// Mixing blocks per inter-frame scale.
    pub blocks_per_scale: usize,
    pub d_state: usize,
    pub expand: usize,
    pub dconv: usize,
    pub squeeze_ratio: usize,
    pub mode_h: ScanMode,
    pub mode_v: ScanMode,
    pub policy: InterleavePolicy,
    /// Zero residual output projections (exact identity blocks at init).
    pub zero_init_residual: bool,
    /// Zero the flow/mask heads and the refiner's output conv, so a fresh
    /// model predicts zero flow, logits 0, and no residual.
    pub zero_init_heads: bool,
    /// Residual flow refinement passes at H/8.
    pub flow_iterations: usize,
    /// Initial value of the learnable gain on the image-level displacement
    /// prior's direct contribution to the coarse flow. At 1.0 a fresh model
    /// already moves with the prior's motion estimate; 0.0 disables the
    /// shortcut at init (it can still be learned).
    pub prior_gain_init: f64,
    /// Hidden width of the flow heads; 0 picks 4C.
    pub flow_hidden: usize,
    /// Width of the refiner U-Net's top level; 0 picks 2C.
    pub refine_width: usize,
    /// Ablation: replace the S6 mixing blocks with per-frame conv blocks
    /// (no cross-frame token mixing, strictly local receptive field).
    pub conv_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            blocks_per_scale: 3,
            d_state: 16,
            expand: 2,
            dconv: 3,
            squeeze_ratio: 4,
            mode_h: ScanMode::Interleaved,
            mode_v: ScanMode::Interleaved,
            policy: InterleavePolicy::AxisMatched,
            zero_init_residual: false,
            zero_init_heads: false,
            flow_iterations: 1,
            prior_gain_init: 1.0,
            flow_hidden: 0,
            refine_width: 0,
            conv_only: false,
        }
    }
}

impl ModelConfig {
    pub fn tiny(base_channels: usize, blocks_per_scale: usize, d_state: usize) -> Self {
        ModelConfig { base_channels, blocks_per_scale, d_state, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_scale < 1 {
            return Err(Error::InvalidShape("need at least one block per scale".into()));
        }
        self.msb_config(8 * self.base_channels).validate()
    }

    pub fn flow_hidden(&self) -> usize {
        if self.flow_hidden == 0 { 4 * self.base_channels } else { self.flow_hidden }
    }

    pub fn refine_width(&self) -> usize {
        if self.refine_width == 0 { 2 * self.base_channels } else { self.refine_width }
    }

    fn msb_config(&self, channels: usize) -> MsbConfig {
        MsbConfig {
            channels,
            d_state: self.d_state,
            expand: self.expand,
            dconv: self.dconv,
            squeeze_ratio: self.squeeze_ratio,
            mode_h: self.mode_h,
            mode_v: self.mode_v,
            policy: self.policy,
            zero_init_residual: self.zero_init_residual,
        }
    }

    fn head_std(&self) -> f64 {
        if self.zero_init_heads { 0.0 } else { 0.01 }
    }

    /// Receptive radius, in input pixels, of the deepest purely
    /// convolutional path (extractor -> both mixing scales -> flow heads ->
    /// upsampling -> warp taps). Token mixing and flow displacement reach
    /// beyond it; convolution alone cannot.
    pub fn conv_receptive_radius(&self) -> f64 {
        let mut scale = 1.0f64;
        let mut r = 0.0f64;
        let mut conv = |radius_px: f64, s: f64| r += radius_px * s;
        // extractor: k3 conv, then three stride-2 k3 embeds
        conv(1.0, scale);
        for _ in 0..3 {
            conv(1.0, scale);
            scale *= 2.0;
        }
        // mixing blocks at H/8: two k3 convs each (conv ablation path; the
        // depthwise conv of the S6 variant matches this bound)
        for _ in 0..self.blocks_per_scale {
            conv(2.0, scale);
        }
        conv(1.0, scale);
        scale *= 2.0; // embed to H/16
        for _ in 0..self.blocks_per_scale {
            conv(2.0, scale);
        }
        conv(COARSE_CORR_RADIUS as f64, scale); // matching-window taps
        conv(3.0, scale); // coarse flow head, three k3 convs
        conv(1.0, scale); // bilinear upsample taps
        scale /= 2.0; // at H/8
        for _ in 0..self.flow_iterations {
            conv(RESIDUAL_CORR_RADIUS as f64, scale); // matching-window taps
            conv(FINE_CORR_RADIUS as f64 + 1.0, scale / 2.0); // fine matching
            conv(3.0, scale); // residual head
        }
        conv(1.0, scale);
        scale /= 2.0; // flow at H/4
        conv(1.0, scale); // final upsample to full resolution
        // refiner: encoder/decoder round trip at scales 1,2,4
        conv(3.0, 1.0);
        conv(3.0, 2.0);
        conv(3.0, 4.0);
        conv(1.0, 4.0); // first upsample
        conv(2.0, 2.0);
        conv(1.0, 2.0);
        conv(2.0, 1.0);
        // warp taps one pixel around the (flow-displaced) sample point
        r + 1.0
    }
}

/// Matching window of the coarse flow head, in H/16 tokens.
pub const COARSE_CORR_RADIUS: usize = 3;
/// Matching window of the residual flow head, in H/8 tokens.
pub const RESIDUAL_CORR_RADIUS: usize = 2;
/// Matching window of the fine correlation the residual head also sees,
/// in H/4 tokens; fine enough to resolve few-pixel motion.
pub const FINE_CORR_RADIUS: usize = 3;

const fn corr_channels(r: usize) -> usize {
    (2 * r + 1) * (2 * r + 1)
}

/// Channel-mean local correlation: for every integer displacement within
/// `r` Chebyshev tokens, `<a(p), b(p+d)> / C`, border-clamped. Output
/// `[B,(2r+1)^2,H,W]`. Hands the flow heads an explicit matching signal
/// instead of asking them to discover correspondence from scratch.
pub fn local_correlation<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    r: usize,
) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape("correlation inputs differ in shape".into()));
    }
    let (_, c, h, w) = shape4(a);
    let sum_c = Tensor::full(&[1, c, 1, 1], E::of_f64(1.0 / c as f64));
    let spec = Conv2dSpec { stride: 1, pad: 0, groups: 1 };
    let ri = r as isize;
    let mut planes = Vec::with_capacity(corr_channels(r));
    for dy in -ri..=ri {
        let rows: Vec<usize> = (0..h)
            .map(|y| (y as isize + dy).clamp(0, h as isize - 1) as usize)
            .collect();
        for dx in -ri..=ri {
            let cols: Vec<usize> = (0..w)
                .map(|x| (x as isize + dx).clamp(0, w as isize - 1) as usize)
                .collect();
            let shifted = b.index_select(2, &rows).index_select(3, &cols);
            planes.push(a.mul(&shifted)?.conv2d(&sum_c, None, spec)?);
        }
    }
    Tensor::cat(&planes, 1)
}

/// Differentiable single-shot Lucas-Kanade displacement estimate computed
/// from the input frames themselves: anti-alias both frames down to quarter
/// resolution, then solve the windowed least-squares problem
/// `[Sxx Sxy; Sxy Syy] d = -[Sxt; Syt]` per position, where S are 5x5-token
/// sums of products of spatial and temporal derivatives over all channels.
///
/// Output is [B,2,H/4,W/4] (dx then dy) in quarter-resolution pixel units:
/// +1 in dx means content visible at x in frame 0 sits at x+1 in frame 1.
/// Static regions give exactly zero (the temporal difference vanishes), and
/// featureless regions are driven to zero by Tikhonov regularization. The
/// flow heads receive this as an input channel pair, so on a stream of
/// unrelated scenes they only have to learn a scene-independent scaling of
/// an estimate that is already signed correctly, instead of discovering
/// correspondence from photometric gradients whose sign flips once fine
/// texture moves more than half its period.
pub fn displacement_prior<E: Element>(
    i0: &Tensor<E>,
    i1: &Tensor<E>,
) -> Result<Tensor<E>> {
    if i0.shape() != i1.shape() {
        return Err(Error::InvalidShape("prior inputs differ in shape".into()));
    }
    let (_, c, _, _) = shape4(i0);
    // anti-aliased downsampling: 5x5 binomial blur fused with stride-2
    // decimation, applied twice, plus one smoothing pass at the coarse
    // grid to widen the linear range of the gradient model
    let base = [1.0f64, 4.0, 6.0, 4.0, 1.0];
    let mut k = Vec::with_capacity(c * 25);
    for _ in 0..c {
        for wy in base {
            for wx in base {
                k.push(E::of_f64(wy * wx / 256.0));
            }
        }
    }
    let pool = Tensor::new(k.clone(), &[c, 1, 5, 5]);
    let pool_spec = Conv2dSpec { stride: 2, pad: 2, groups: c };
    let smooth_spec = Conv2dSpec { stride: 1, pad: 2, groups: c };
    let down = |img: &Tensor<E>| -> Result<Tensor<E>> {
        img.conv2d(&pool, None, pool_spec)?
            .conv2d(&pool, None, pool_spec)?
            .conv2d(&pool, None, smooth_spec)
    };
    let p0 = down(i0)?;
    let p1 = down(i1)?;
    let (_, _, h, w) = shape4(&p0);
    // central differences on the temporal average, border-clamped
    let shift = |x: &Tensor<E>, axis: usize, by: isize| {
        let n = x.shape()[axis] as isize;
        let idx: Vec<usize> = (0..n)
            .map(|i| (i + by).clamp(0, n - 1) as usize)
            .collect();
        x.index_select(axis, &idx)
    };
    let avg = p0.add(&p1)?.mul_scalar(E::of_f64(0.5));
    let gx = shift(&avg, 3, 1).sub(&shift(&avg, 3, -1))?.mul_scalar(E::of_f64(0.5));
    let gy = shift(&avg, 2, 1).sub(&shift(&avg, 2, -1))?.mul_scalar(E::of_f64(0.5));
    let gt = p1.sub(&p0)?;
    // windowed structure tensor, summed over channels and a 5x5 window
    let sum_c = Tensor::full(&[1, c, 1, 1], E::of_f64(1.0));
    let one = Conv2dSpec { stride: 1, pad: 0, groups: 1 };
    let win = Tensor::full(&[1, 1, 5, 5], E::of_f64(1.0));
    let win_spec = Conv2dSpec { stride: 1, pad: 2, groups: 1 };
    let moment = |a: &Tensor<E>, b: &Tensor<E>| -> Result<Tensor<E>> {
        a.mul(b)?.conv2d(&sum_c, None, one)?.conv2d(&win, None, win_spec)
    };
    let sxx = moment(&gx, &gx)?;
    let sxy = moment(&gx, &gy)?;
    let syy = moment(&gy, &gy)?;
    let sxt = moment(&gx, &gt)?;
    let syt = moment(&gy, &gt)?;
    // Tikhonov floor, small against any real gradient energy in the window
    let lam = E::of_f64(1e-5);
    let rxx = sxx.add_scalar(lam);
    let ryy = syy.add_scalar(lam);
    let det = rxx.mul(&ryy)?.sub(&sxy.mul(&sxy)?)?;
    let dx = sxy.mul(&syt)?.sub(&ryy.mul(&sxt)?)?.div(&det)?;
    let dy = sxy.mul(&sxt)?.sub(&rxx.mul(&syt)?)?.div(&det)?;
    Tensor::cat(&[dx, dy], 1)
}

/// Bidirectional flow plus occlusion logits at one resolution.
/// `flow` is [B,4,h,w]: channels 0-1 displace toward frame 0, 2-3 toward
/// frame 1, in that resolution's pixel units.
#[derive(Clone, Debug)]
pub struct FlowField<E: Element> {
    pub flow: Tensor<E>,
    pub mask_logits: Tensor<E>,
}

impl<E: Element> FlowField<E> {
    pub fn f_t0(&self) -> Tensor<E> {
        self.flow.narrow(1, 0, 2)
    }

    pub fn f_t1(&self) -> Tensor<E> {
        self.flow.narrow(1, 2, 2)
    }

    /// Resize by `factor`, scaling displacement values to the new grid.
    pub fn upsample(&self, factor: usize) -> Result<FlowField<E>> {
        let (h, w) = (self.flow.shape()[2], self.flow.shape()[3]);
        let flow = self
            .flow
            .resize_bilinear(h * factor, w * factor)?
            .mul_scalar(E::of_f64(factor as f64));
        let mask_logits = self.mask_logits.resize_bilinear(h * factor, w * factor)?;
        Ok(FlowField { flow, mask_logits })
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<E: Element, R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        std: Option<f64>,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        let n = cout * cin * k * k;
        let w = match std {
            Some(s) if s == 0.0 => vec![E::zero(); n],
            Some(s) => randn(rng, n, s),
            None => randn_fan_in(rng, n, cin * k * k),
        };
        ConvLayer {
            w: store.add(format!("{name}.w"), w, &[cout, cin, k, k]),
            b: store.add(format!("{name}.b"), vec![E::zero(); cout], &[cout]),
        }
    }

    fn apply<E: Element>(
        &self,
        x: &Tensor<E>,
        spec: Conv2dSpec,
        store: &ParamStore<E>,
    ) -> Result<Tensor<E>> {
        x.conv2d(&store.get(self.w), Some(&store.get(self.b)), spec)
    }
}

const K3: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1, groups: 1 };
const K3S2: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1, groups: 1 };

/// Three k3 convs with SiLU between; the last is head-initialized.
#[derive(Clone, Debug)]
struct FlowHead {
    c1: ConvLayer,
    c2: ConvLayer,
    c3: ConvLayer,
}

impl FlowHead {
    fn init<E: Element, R: Rng>(
        name: &str,
        cin: usize,
        hidden: usize,
        head_std: f64,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        FlowHead {
            c1: ConvLayer::init(&format!("{name}.c1"), cin, hidden, 3, None, store, rng),
            c2: ConvLayer::init(&format!("{name}.c2"), hidden, hidden, 3, None, store, rng),
            c3: ConvLayer::init(&format!("{name}.c3"), hidden, 5, 3, Some(head_std), store, rng),
        }
    }

    fn apply<E: Element>(&self, x: &Tensor<E>, store: &ParamStore<E>) -> Result<Tensor<E>> {
        let y = self.c1.apply(x, K3, store)?.silu();
        let y = self.c2.apply(&y, K3, store)?.silu();
        self.c3.apply(&y, K3, store)
    }
}

/// One inter-frame mixing block: either the full Mixed-SSM block or the
/// per-frame conv residual used by the ablation.
#[derive(Clone, Debug)]
enum SceneBlock {
    Mixed(MsbParams),
    ConvOnly {
        ln_gamma: ParamId,
        ln_beta: ParamId,
        c1: ConvLayer,
        c2: ConvLayer,
    },
}

impl SceneBlock {
    fn init<E: Element, R: Rng>(
        name: &str,
        cfg: &ModelConfig,
        channels: usize,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        if cfg.conv_only {
            let std = if cfg.zero_init_residual { Some(0.0) } else { Some(0.01) };
            SceneBlock::ConvOnly {
                ln_gamma: store.add(format!("{name}.ln.gamma"), vec![E::one(); channels], &[channels]),
                ln_beta: store.add(format!("{name}.ln.beta"), vec![E::zero(); channels], &[channels]),
                c1: ConvLayer::init(&format!("{name}.c1"), channels, channels, 3, None, store, rng),
                c2: ConvLayer::init(&format!("{name}.c2"), channels, channels, 3, std, store, rng),
            }
        } else {
            SceneBlock::Mixed(MsbParams::init(name, &cfg.msb_config(channels), store, rng))
        }
    }

    fn apply<E: Element>(
        &self,
        f0: &Tensor<E>,
        f1: &Tensor<E>,
        cfg: &ModelConfig,
        store: &ParamStore<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        match self {
            SceneBlock::Mixed(p) => {
                mixed_ssm_block(f0, f1, &cfg.msb_config(f0.shape()[1]), p, store)
            }
            SceneBlock::ConvOnly { ln_gamma, ln_beta, c1, c2 } => {
                let g = store.get(*ln_gamma);
                let b = store.get(*ln_beta);
                let one = |x: &Tensor<E>| -> Result<Tensor<E>> {
                    let y = ln_channels(x, &g, &b)?;
                    let y = c2.apply(&c1.apply(&y, K3, store)?.silu(), K3, store)?;
                    x.add(&y)
                };
                Ok((one(f0)?, one(f1)?))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct RefineParams {
    enc0a: ConvLayer,
    enc0b: ConvLayer,
    down1: ConvLayer,
    fuse1: ConvLayer,
    down2: ConvLayer,
    fuse2: ConvLayer,
    up1: ConvLayer,
    fuse_up1: ConvLayer,
    up0: ConvLayer,
    fuse_up0: ConvLayer,
    out: ConvLayer,
}

pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    extract_conv: ConvLayer,
    prelu_alpha: ParamId,
    embeds: Vec<PatchEmbedParams>,
    blocks8: Vec<SceneBlock>,
    embed16: PatchEmbedParams,
    blocks16: Vec<SceneBlock>,
    coarse_head: FlowHead,
    residual_head: FlowHead,
    prior_gain: ParamId,
    refine: RefineParams,
}

impl<E: Element> Model<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.base_channels;
        let extract_conv =
            ConvLayer::init("extract.conv", 3, c, 3, None, &mut store, &mut rng);
        let prelu_alpha = store.add("extract.prelu", vec![E::of_f64(0.25); c], &[c]);
        let embeds = (0..3)
            .map(|i| {
                PatchEmbedParams::init(&format!("embed{i}"), c << i, &mut store, &mut rng)
            })
            .collect::<Vec<_>>();
        let blocks8 = (0..cfg.blocks_per_scale)
            .map(|i| SceneBlock::init(&format!("s8.block{i}"), &cfg, 8 * c, &mut store, &mut rng))
            .collect();
        let embed16 = PatchEmbedParams::init("embed16", 8 * c, &mut store, &mut rng);
        let blocks16 = (0..cfg.blocks_per_scale)
            .map(|i| SceneBlock::init(&format!("s16.block{i}"), &cfg, 16 * c, &mut store, &mut rng))
            .collect();
        let hidden = cfg.flow_hidden();
        let head_std = cfg.head_std();
        let coarse_head = FlowHead::init(
            "flow.coarse",
            32 * c + 9 + corr_channels(COARSE_CORR_RADIUS),
            hidden,
            head_std,
            &mut store,
            &mut rng,
        );
        let residual_head = FlowHead::init(
            "flow.residual",
            32 * c + 8 + corr_channels(RESIDUAL_CORR_RADIUS) + corr_channels(FINE_CORR_RADIUS),
            hidden,
            head_std,
            &mut store,
            &mut rng,
        );
        let prior_gain = store.add(
            "flow.prior_gain",
            vec![E::of_f64(cfg.prior_gain_init)],
            &[1],
        );
        let d = cfg.refine_width();
        let rp = |n: &str, cin: usize, cout: usize, std: Option<f64>,
                  store: &mut ParamStore<E>, rng: &mut StdRng| {
            ConvLayer::init(&format!("refine.{n}"), cin, cout, 3, std, store, rng)
        };
        let refine = RefineParams {
            enc0a: rp("enc0a", 20, d, None, &mut store, &mut rng),
            enc0b: rp("enc0b", d, d, None, &mut store, &mut rng),
            down1: rp("down1", d, 2 * d, None, &mut store, &mut rng),
            fuse1: rp("fuse1", 2 * d + 4 * c, 2 * d, None, &mut store, &mut rng),
            down2: rp("down2", 2 * d, 4 * d, None, &mut store, &mut rng),
            fuse2: rp("fuse2", 4 * d + 8 * c, 4 * d, None, &mut store, &mut rng),
            up1: rp("up1", 4 * d, 2 * d, None, &mut store, &mut rng),
            fuse_up1: rp("fuse_up1", 4 * d, 2 * d, None, &mut store, &mut rng),
            up0: rp("up0", 2 * d, d, None, &mut store, &mut rng),
            fuse_up0: rp("fuse_up0", 2 * d, d, None, &mut store, &mut rng),
            out: rp("out", d, 3, Some(head_std), &mut store, &mut rng),
        };
        Ok(Model {
            cfg,
            store,
            extract_conv,
            prelu_alpha,
            embeds,
            blocks8,
            embed16,
            blocks16,
            coarse_head,
            residual_head,
            prior_gain,
            refine,
        })
    }

    /// Per-frame shallow pyramid: features at H/2 (2C), H/4 (4C), H/8 (8C).
    pub fn extract_features(&self, image: &Tensor<E>) -> Result<[Tensor<E>; 3]> {
        let (h, w) = (image.shape()[2], image.shape()[3]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidShape(format!(
                "input extents must be multiples of 16, got {h}x{w}"
            )));
        }
        let alpha = self.store.get(self.prelu_alpha).reshape(&[self.cfg.base_channels, 1, 1])?;
        let f = self
            .extract_conv
            .apply(image, K3, &self.store)?
            .prelu(&alpha)?;
        let f2 = overlap_patch_embed(&f, &self.embeds[0], &self.store)?;
        let f4 = overlap_patch_embed(&f2, &self.embeds[1], &self.store)?;
        let f8 = overlap_patch_embed(&f4, &self.embeds[2], &self.store)?;
        Ok([f2, f4, f8])
    }

    /// Joint features at H/8 and H/16 after the mixing stacks.
    #[allow(clippy::type_complexity)]
    pub fn interframe_features(
        &self,
        f0: &Tensor<E>,
        f1: &Tensor<E>,
    ) -> Result<((Tensor<E>, Tensor<E>), (Tensor<E>, Tensor<E>))> {
        let mut a = f0.clone();
        let mut b = f1.clone();
        for blk in &self.blocks8 {
            let (na, nb) = blk.apply(&a, &b, &self.cfg, &self.store)?;
            a = na;
            b = nb;
        }
        let s8 = (a.clone(), b.clone());
        let mut a = overlap_patch_embed(&a, &self.embed16, &self.store)?;
        let mut b = overlap_patch_embed(&b, &self.embed16, &self.store)?;
        for blk in &self.blocks16 {
            let (na, nb) = blk.apply(&a, &b, &self.cfg, &self.store)?;
            a = na;
            b = nb;
        }
        Ok((s8, (a, b)))
    }

    /// Coarse flow at H/16 plus residual refinement at H/8; returns the
    /// field upsampled to H/4.
    pub fn estimate_flow(
        &self,
        s16: &(Tensor<E>, Tensor<E>),
        s8: &(Tensor<E>, Tensor<E>),
        f4: (&Tensor<E>, &Tensor<E>),
        i0: &Tensor<E>,
        i1: &Tensor<E>,
        t: f64,
    ) -> Result<FlowField<E>> {
        let (b, _, h16, w16) = shape4(&s16.0);
        let tval = E::of_f64(t);
        // image-level matching estimate in H/4 units; rescaled to each
        // head's grid so its units match the flow that head predicts
        let prior = displacement_prior(i0, i1)?;
        let p16 = prior.resize_bilinear(h16, w16)?.mul_scalar(E::of_f64(0.25));
        let coarse_in = Tensor::cat(
            &[
                s16.0.clone(),
                s16.1.clone(),
                local_correlation(&s16.0, &s16.1, COARSE_CORR_RADIUS)?,
                p16.clone(),
                i0.resize_bilinear(h16, w16)?,
                i1.resize_bilinear(h16, w16)?,
                Tensor::full(&[b, 1, h16, w16], tval),
            ],
            1,
        )?;
        let head = self.coarse_head.apply(&coarse_in, &self.store)?;
        // direct shortcut: the flow a perfectly trusted prior would imply,
        // under one learnable gain, so a consistent scalar learning signal
        // exists from the very first step regardless of head initialization
        let implied = Tensor::cat(
            &[
                p16.mul_scalar(E::of_f64(-t)),
                p16.mul_scalar(E::of_f64(1.0 - t)),
            ],
            1,
        )?;
        let gain = self.store.get(self.prior_gain).reshape(&[1, 1, 1, 1])?;
        let mut field = FlowField {
            flow: head.narrow(1, 0, 4).add(&implied.mul(&gain)?)?,
            mask_logits: head.narrow(1, 4, 1),
        }
        .upsample(2)?;
        let (_, _, h8, w8) = shape4(&s8.0);
        let prior8 = prior.resize_bilinear(h8, w8)?.mul_scalar(E::of_f64(0.5));
        for _ in 0..self.cfg.flow_iterations {
            let w0 = s8.0.flow_warp(&field.f_t0())?;
            let w1 = s8.1.flow_warp(&field.f_t1())?;
            // fine-scale matching: warp the H/4 features by the current
            // field, correlate, and pool the costs down to H/8
            let up4 = field.upsample(2)?;
            let wf0 = f4.0.flow_warp(&up4.f_t0())?;
            let wf1 = f4.1.flow_warp(&up4.f_t1())?;
            let corr_fine = local_correlation(&wf0, &wf1, FINE_CORR_RADIUS)?
                .resize_bilinear(h8, w8)?;
            let resid_in = Tensor::cat(
                &[
                    s8.0.clone(),
                    s8.1.clone(),
                    local_correlation(&w0, &w1, RESIDUAL_CORR_RADIUS)?,
                    corr_fine,
                    prior8.clone(),
                    w0,
                    w1,
                    field.flow.clone(),
                    field.mask_logits.clone(),
                    Tensor::full(&[b, 1, h8, w8], tval),
                ],
                1,
            )?;
            let delta = self.residual_head.apply(&resid_in, &self.store)?;
            field = FlowField {
                flow: field.flow.add(&delta.narrow(1, 0, 4))?,
                mask_logits: field.mask_logits.add(&delta.narrow(1, 4, 1))?,
            };
        }
        let field = field.upsample(2)?;
        field.flow.check_finite("estimated flow")?;
        Ok(field)
    }

    /// Warp, blend by the occlusion mask, and refine. `field` is at H/4.
    pub fn synthesize(
        &self,
        i0: &Tensor<E>,
        i1: &Tensor<E>,
        field: &FlowField<E>,
        pyr0: &[Tensor<E>; 3],
        pyr1: &[Tensor<E>; 3],
    ) -> Result<SynthOutput<E>> {
        let full = field.upsample(4)?;
        let w0 = i0.flow_warp(&full.f_t0())?;
        let w1 = i1.flow_warp(&full.f_t1())?;
        let m = full.mask_logits.sigmoid();
        let one_minus = m.neg().add_scalar(E::one());
        let coarse = w0.mul(&m)?.add(&w1.mul(&one_minus)?)?;
        let r = &self.refine;
        let st = &self.store;
        let x = Tensor::cat(
            &[
                i0.clone(),
                i1.clone(),
                w0.clone(),
                w1.clone(),
                coarse.clone(),
                full.flow.clone(),
                m,
            ],
            1,
        )?;
        let e0 = r.enc0b.apply(&r.enc0a.apply(&x, K3, st)?.silu(), K3, st)?.silu();
        let d1 = r.down1.apply(&e0, K3S2, st)?.silu();
        let skip1 = Tensor::cat(&[d1, pyr0[0].clone(), pyr1[0].clone()], 1)?;
        let e1 = r.fuse1.apply(&skip1, K3, st)?.silu();
        let d2 = r.down2.apply(&e1, K3S2, st)?.silu();
        let skip2 = Tensor::cat(&[d2, pyr0[1].clone(), pyr1[1].clone()], 1)?;
        let e2 = r.fuse2.apply(&skip2, K3, st)?.silu();
        let (_, _, h2, w2) = shape4(&e1);
        let u1 = r.up1.apply(&e2.resize_bilinear(h2, w2)?, K3, st)?.silu();
        let u1 = r.fuse_up1.apply(&Tensor::cat(&[u1, e1], 1)?, K3, st)?.silu();
        let (_, _, h0, w0s) = shape4(&e0);
        let u0 = r.up0.apply(&u1.resize_bilinear(h0, w0s)?, K3, st)?.silu();
        let u0 = r.fuse_up0.apply(&Tensor::cat(&[u0, e0], 1)?, K3, st)?.silu();
        let residual = r.out.apply(&u0, K3, st)?.tanh_t();
        let image = coarse.add(&residual)?.clamp_t(E::zero(), E::one());
        Ok(SynthOutput { image, warp0: w0, warp1: w1 })
    }

    /// Full pipeline: two frames in [0,1] and a timestep to the predicted
    /// intermediate frame.
    pub fn interpolate(&self, i0: &Tensor<E>, i1: &Tensor<E>, t: f64) -> Result<InterpOutput<E>> {
        if !(0.0 < t && t < 1.0) {
            return Err(Error::Data(format!("timestep must lie in (0,1), got {t}")));
        }
        let pyr0 = self.extract_features(i0)?;
        let pyr1 = self.extract_features(i1)?;
        let (s8, s16) = self.interframe_features(&pyr0[2], &pyr1[2])?;
        let field = self.estimate_flow(&s16, &s8, (&pyr0[1], &pyr1[1]), i0, i1, t)?;
        let synth = self.synthesize(i0, i1, &field, &pyr0, &pyr1)?;
        Ok(InterpOutput { synth, field })
    }
}

pub struct SynthOutput<E: Element> {
    pub image: Tensor<E>,
    pub warp0: Tensor<E>,
    pub warp1: Tensor<E>,
}

pub struct InterpOutput<E: Element> {
    pub synth: SynthOutput<E>,
    /// Flow field at quarter resolution.
    pub field: FlowField<E>,
}

fn shape4<E: Element>(t: &Tensor<E>) -> (usize, usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}
