//! Network building blocks: the gated S6 mixing block, the channel-attention
//! block that replaces the MLP, the Mixed-SSM block combining the two with
//! pre-norm residuals, and overlapping patch embedding for downsampling.
//!
//! Blocks hold `ParamId` handles; tensors live in a [`ParamStore`] so the
//! optimizer can update them without the blocks noticing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{randn, randn_fan_in, ParamId, ParamStore};
use crate::scan2d::{multi_directional_scan, InterleavePolicy, ScanMode};
use crate::ssm::SsmParams;
use crate::tensor::{Conv2dSpec, Element, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct MsbConfig {
    /// Feature channels L entering the block.
    pub channels: usize,
    /// States per scan channel.
    pub d_state: usize,
    /// Expansion factor of the S6 branch.
    pub expand: usize,
    /// Depthwise conv kernel on the scan branch.
    pub dconv: usize,
    /// Channel-attention bottleneck ratio.
    pub squeeze_ratio: usize,
    pub mode_h: ScanMode,
    pub mode_v: ScanMode,
    pub policy: InterleavePolicy,
    /// Zero the residual-branch output projections so a fresh block is an
    /// exact identity. Defaults to small random values instead, which gives
    /// the scan path nonzero influence from the first step.
    pub zero_init_residual: bool,
}

impl MsbConfig {
    pub fn new(channels: usize, d_state: usize) -> Self {
        MsbConfig {
            channels,
            d_state,
            expand: 2,
            dconv: 3,
            squeeze_ratio: 4,
            mode_h: ScanMode::Interleaved,
            mode_v: ScanMode::Interleaved,
            policy: InterleavePolicy::AxisMatched,
            zero_init_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.expand < 1 {
            return Err(Error::InvalidShape("expand factor must be >= 1".into()));
        }
        if self.channels % self.squeeze_ratio != 0 {
            return Err(Error::InvalidShape(format!(
                "squeeze ratio {} must divide channels {}",
                self.squeeze_ratio, self.channels
            )));
        }
        Ok(())
    }

    fn expanded(&self) -> usize {
        self.expand * self.channels
    }
}

/// Handles for one scan direction's SSM parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmParamIds {
    pub d_model: usize,
    pub d_state: usize,
    pub a_log: ParamId,
    pub s_b: ParamId,
    pub s_c: ParamId,
    pub s_delta_down: ParamId,
    pub s_delta_up: ParamId,
    pub delta_bias: ParamId,
    pub d_skip: ParamId,
}

impl SsmParamIds {
    pub fn init<E: Element, R: Rng>(
        prefix: &str,
        d_model: usize,
        d_state: usize,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        let fresh = SsmParams::<E>::init(d_model, d_state, rng);
        let mut add = |suffix: &str, t: &Tensor<E>| {
            store.add(format!("{prefix}.{suffix}"), t.data().to_vec(), t.shape())
        };
        SsmParamIds {
            d_model,
            d_state,
            a_log: add("a_log", &fresh.a_log),
            s_b: add("s_b", &fresh.s_b),
            s_c: add("s_c", &fresh.s_c),
            s_delta_down: add("s_delta_down", &fresh.s_delta_down),
            s_delta_up: add("s_delta_up", &fresh.s_delta_up),
            delta_bias: add("delta_bias", &fresh.delta_bias),
            d_skip: add("d_skip", &fresh.d_skip),
        }
    }

    pub fn fetch<E: Element>(&self, store: &ParamStore<E>) -> SsmParams<E> {
        SsmParams {
            d_model: self.d_model,
            d_state: self.d_state,
            a_log: store.get(self.a_log),
            s_b: store.get(self.s_b),
            s_c: store.get(self.s_c),
            s_delta_down: store.get(self.s_delta_down),
            s_delta_up: store.get(self.s_delta_up),
            delta_bias: store.get(self.delta_bias),
            d_skip: store.get(self.d_skip),
        }
    }
}

#[derive(Clone, Debug)]
pub struct S6BlockParams {
    pub in_proj_w: ParamId,
    pub in_proj_b: ParamId,
    pub dconv_w: ParamId,
    pub dconv_b: ParamId,
    pub ssm4: [SsmParamIds; 4],
    pub out_proj_w: ParamId,
    pub out_proj_b: ParamId,
}

impl S6BlockParams {
    pub fn init<E: Element, R: Rng>(
        prefix: &str,
        cfg: &MsbConfig,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        let l = cfg.channels;
        let el = cfg.expanded();
        let k = cfg.dconv;
        let in_proj_w = store.add(
            format!("{prefix}.in_proj.w"),
            randn_fan_in(rng, 2 * el * l, l),
            &[2 * el, l, 1, 1],
        );
        let in_proj_b =
            store.add(format!("{prefix}.in_proj.b"), vec![E::zero(); 2 * el], &[2 * el]);
        let dconv_w = store.add(
            format!("{prefix}.dconv.w"),
            randn_fan_in(rng, el * k * k, k * k),
            &[el, 1, k, k],
        );
        let dconv_b = store.add(format!("{prefix}.dconv.b"), vec![E::zero(); el], &[el]);
        let ssm4 = std::array::from_fn(|i| {
            SsmParamIds::init(
                &format!("{prefix}.dir{i}"),
                el,
                cfg.d_state,
                store,
                rng,
            )
        });
        let out_w = if cfg.zero_init_residual {
            vec![E::zero(); l * el]
        } else {
            // strong enough that the scan branch contributes from step one
            randn(rng, l * el, (1.0 / el as f64).sqrt() * 0.5)
        };
        let out_proj_w = store.add(format!("{prefix}.out_proj.w"), out_w, &[l, el, 1, 1]);
        let out_proj_b = store.add(format!("{prefix}.out_proj.b"), vec![E::zero(); l], &[l]);
        S6BlockParams { in_proj_w, in_proj_b, dconv_w, dconv_b, ssm4, out_proj_w, out_proj_b }
    }
}

/// Gated S6 mixing over a frame pair: shared per-frame projections and
/// depthwise conv, jointly scanned in four directions.
pub fn s6_block<E: Element>(
    f0: &Tensor<E>,
    f1: &Tensor<E>,
    cfg: &MsbConfig,
    p: &S6BlockParams,
    store: &ParamStore<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let el = cfg.expanded();
    if f0.shape()[1] != cfg.channels {
        return Err(Error::InvalidShape(format!(
            "s6 block configured for {} channels, input has {}",
            cfg.channels,
            f0.shape()[1]
        )));
    }
    let pointwise = Conv2dSpec { stride: 1, pad: 0, groups: 1 };
    let depthwise = Conv2dSpec { stride: 1, pad: cfg.dconv / 2, groups: el };
    let mut branches = Vec::with_capacity(2);
    for f in [f0, f1] {
        let u = f.conv2d(&store.get(p.in_proj_w), Some(&store.get(p.in_proj_b)), pointwise)?;
        let xs = u.narrow(1, 0, el);
        let z = u.narrow(1, el, el);
        let xs = xs
            .conv2d(&store.get(p.dconv_w), Some(&store.get(p.dconv_b)), depthwise)?
            .silu();
        branches.push((xs, z));
    }
    let ssm4: [SsmParams<E>; 4] = std::array::from_fn(|i| p.ssm4[i].fetch(store));
    let (s0, s1) = multi_directional_scan(
        &branches[0].0,
        &branches[1].0,
        cfg.mode_h,
        cfg.mode_v,
        cfg.policy,
        &ssm4,
    )?;
    let project = |s: &Tensor<E>, z: &Tensor<E>| -> Result<Tensor<E>> {
        s.mul(&z.silu())?
            .conv2d(&store.get(p.out_proj_w), Some(&store.get(p.out_proj_b)), pointwise)
    };
    Ok((project(&s0, &branches[0].1)?, project(&s1, &branches[1].1)?))
}

#[derive(Clone, Debug)]
pub struct CabParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub se_down_w: ParamId,
    pub se_down_b: ParamId,
    pub se_up_w: ParamId,
    pub se_up_b: ParamId,
}

impl CabParams {
    pub fn init<E: Element, R: Rng>(
        prefix: &str,
        cfg: &MsbConfig,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        let l = cfg.channels;
        let s = l / cfg.squeeze_ratio;
        let conv2_w = if cfg.zero_init_residual {
            vec![E::zero(); l * l * 9]
        } else {
            randn(rng, l * l * 9, (1.0 / (l * 9) as f64).sqrt() * 0.5)
        };
        CabParams {
            conv1_w: store.add(
                format!("{prefix}.conv1.w"),
                randn_fan_in(rng, l * l * 9, l * 9),
                &[l, l, 3, 3],
            ),
            conv1_b: store.add(format!("{prefix}.conv1.b"), vec![E::zero(); l], &[l]),
            conv2_w: store.add(format!("{prefix}.conv2.w"), conv2_w, &[l, l, 3, 3]),
            conv2_b: store.add(format!("{prefix}.conv2.b"), vec![E::zero(); l], &[l]),
            se_down_w: store.add(
                format!("{prefix}.se_down.w"),
                randn_fan_in(rng, s * l, l),
                &[s, l, 1, 1],
            ),
            se_down_b: store.add(format!("{prefix}.se_down.b"), vec![E::zero(); s], &[s]),
            se_up_w: store.add(
                format!("{prefix}.se_up.w"),
                randn_fan_in(rng, l * s, s),
                &[l, s, 1, 1],
            ),
            se_up_b: store.add(format!("{prefix}.se_up.b"), vec![E::zero(); l], &[l]),
        }
    }
}

/// Two 3x3 convs followed by a squeeze-excitation channel gate. The
/// enclosing block supplies the residual connection.
pub fn channel_attention_block<E: Element>(
    x: &Tensor<E>,
    p: &CabParams,
    store: &ParamStore<E>,
) -> Result<Tensor<E>> {
    let k3 = Conv2dSpec { stride: 1, pad: 1, groups: 1 };
    let k1 = Conv2dSpec { stride: 1, pad: 0, groups: 1 };
    let c = x
        .conv2d(&store.get(p.conv1_w), Some(&store.get(p.conv1_b)), k3)?
        .silu()
        .conv2d(&store.get(p.conv2_w), Some(&store.get(p.conv2_b)), k3)?;
    let gate = c
        .mean_hw()
        .conv2d(&store.get(p.se_down_w), Some(&store.get(p.se_down_b)), k1)?
        .silu()
        .conv2d(&store.get(p.se_up_w), Some(&store.get(p.se_up_b)), k1)?
        .sigmoid();
    c.mul(&gate)
}

#[derive(Clone, Debug)]
pub struct MsbParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub s6: S6BlockParams,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub cab: CabParams,
}

impl MsbParams {
    pub fn init<E: Element, R: Rng>(
        prefix: &str,
        cfg: &MsbConfig,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        let l = cfg.channels;
        MsbParams {
            ln1_gamma: store.add(format!("{prefix}.ln1.gamma"), vec![E::one(); l], &[l]),
            ln1_beta: store.add(format!("{prefix}.ln1.beta"), vec![E::zero(); l], &[l]),
            s6: S6BlockParams::init(&format!("{prefix}.s6"), cfg, store, rng),
            ln2_gamma: store.add(format!("{prefix}.ln2.gamma"), vec![E::one(); l], &[l]),
            ln2_beta: store.add(format!("{prefix}.ln2.beta"), vec![E::zero(); l], &[l]),
            cab: CabParams::init(&format!("{prefix}.cab"), cfg, store, rng),
        }
    }
}

/// Layer norm across the channel dim of a [B,C,H,W] map.
pub fn ln_channels<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<Tensor<E>> {
    let y = x.permute(&[0, 2, 3, 1]).layer_norm(gamma, beta, E::of_f64(1e-5))?;
    Ok(y.permute(&[0, 3, 1, 2]))
}

/// Pre-norm transformer-style block: S6 mixing then channel attention, each
/// behind a residual.
pub fn mixed_ssm_block<E: Element>(
    f0: &Tensor<E>,
    f1: &Tensor<E>,
    cfg: &MsbConfig,
    p: &MsbParams,
    store: &ParamStore<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g1 = store.get(p.ln1_gamma);
    let b1 = store.get(p.ln1_beta);
    let (s0, s1) = s6_block(
        &ln_channels(f0, &g1, &b1)?,
        &ln_channels(f1, &g1, &b1)?,
        cfg,
        &p.s6,
        store,
    )?;
    let y0 = f0.add(&s0)?;
    let y1 = f1.add(&s1)?;
    let g2 = store.get(p.ln2_gamma);
    let b2 = store.get(p.ln2_beta);
    let refine = |y: &Tensor<E>| -> Result<Tensor<E>> {
        y.add(&channel_attention_block(&ln_channels(y, &g2, &b2)?, &p.cab, store)?)
    };
    Ok((refine(&y0)?, refine(&y1)?))
}

#[derive(Clone, Debug)]
pub struct PatchEmbedParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub in_channels: usize,
}

impl PatchEmbedParams {
    pub fn init<E: Element, R: Rng>(
        prefix: &str,
        in_channels: usize,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Self {
        let l = in_channels;
        PatchEmbedParams {
            conv_w: store.add(
                format!("{prefix}.conv.w"),
                randn_fan_in(rng, 2 * l * l * 9, l * 9),
                &[2 * l, l, 3, 3],
            ),
            conv_b: store.add(format!("{prefix}.conv.b"), vec![E::zero(); 2 * l], &[2 * l]),
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), vec![E::one(); 2 * l], &[2 * l]),
            ln_beta: store.add(format!("{prefix}.ln.beta"), vec![E::zero(); 2 * l], &[2 * l]),
            in_channels: l,
        }
    }
}

/// The stride-2 overlapping conv of the patch embed, before normalization.
pub fn patch_embed_conv<E: Element>(
    x: &Tensor<E>,
    p: &PatchEmbedParams,
    store: &ParamStore<E>,
) -> Result<Tensor<E>> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "patch embed needs even extents, got {h}x{w}"
        )));
    }
    x.conv2d(
        &store.get(p.conv_w),
        Some(&store.get(p.conv_b)),
        Conv2dSpec { stride: 2, pad: 1, groups: 1 },
    )
}

/// [B,L,H,W] -> [B,2L,H/2,W/2]: overlapping stride-2 conv plus channel norm.
pub fn overlap_patch_embed<E: Element>(
    x: &Tensor<E>,
    p: &PatchEmbedParams,
    store: &ParamStore<E>,
) -> Result<Tensor<E>> {
    let y = patch_embed_conv(x, p, store)?;
    ln_channels(&y, &store.get(p.ln_gamma), &store.get(p.ln_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_map(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        Tensor::new(
            (0..shape.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            shape,
        )
    }

    #[test]
    fn s6_block_zero_input_zero_output() {
        let mut rng = StdRng::seed_from_u64(30);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init("b", &cfg, &mut store, &mut rng);
        let z = Tensor::zeros(&[1, 4, 3, 3]);
        let (g0, g1) = s6_block(&z, &z, &cfg, &p, &store).unwrap();
        assert!(g0.data().iter().all(|&v| v == 0.0));
        assert!(g1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn s6_block_preserves_shape() {
        let mut rng = StdRng::seed_from_u64(31);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init("b", &cfg, &mut store, &mut rng);
        let f0 = rand_map(&mut rng, &[2, 4, 3, 5]);
        let f1 = rand_map(&mut rng, &[2, 4, 3, 5]);
        let (g0, g1) = s6_block(&f0, &f1, &cfg, &p, &store).unwrap();
        assert_eq!(g0.shape(), f0.shape());
        assert_eq!(g1.shape(), f1.shape());
    }

    #[test]
    fn s6_block_rejects_channel_mismatch() {
        let mut rng = StdRng::seed_from_u64(32);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init("b", &cfg, &mut store, &mut rng);
        let bad = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(s6_block(&bad, &bad, &cfg, &p, &store).is_err());
    }

    #[test]
    fn s6_block_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(33);
        let mut cfg = MsbConfig::new(2, 2);
        cfg.expand = 2;
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init("b", &cfg, &mut store, &mut rng);
        let f0 = rand_map(&mut rng, &[1, 2, 2, 2]).requires_grad_leaf();
        let f1 = rand_map(&mut rng, &[1, 2, 2, 2]).requires_grad_leaf();
        let mut leaves = vec![f0, f1];
        leaves.extend(store.tensors());
        let base = store.with_tensors(&store.tensors());
        let cfg2 = cfg;
        let p2 = p.clone();
        let f = move |inp: &[Tensor<f64>]| -> Tensor<f64> {
            let probe = base.with_tensors(&inp[2..]);
            let (g0, g1) = s6_block(&inp[0], &inp[1], &cfg2, &p2, &probe).unwrap();
            g0.sum_all().add(&g1.sum_all()).unwrap().sum_all()
        };
        let worst = oracle::gradcheck(&f, &leaves, 1e-5, 6);
        assert!(worst < 1e-3, "max rel err {worst}");
    }

    #[test]
    fn cab_zero_bottleneck_halves_conv_path() {
        let mut rng = StdRng::seed_from_u64(34);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        let p = CabParams::init("cab", &cfg, &mut store, &mut rng);
        store.set_data(p.se_down_w, vec![0.0; 4]);
        store.set_data(p.se_up_w, vec![0.0; 4]);
        let x = rand_map(&mut rng, &[1, 4, 5, 5]);
        let out = channel_attention_block(&x, &p, &store).unwrap();
        // conv path alone: gate of exactly 1 everywhere
        let k3 = Conv2dSpec { stride: 1, pad: 1, groups: 1 };
        let c = x
            .conv2d(&store.get(p.conv1_w), Some(&store.get(p.conv1_b)), k3)
            .unwrap()
            .silu()
            .conv2d(&store.get(p.conv2_w), Some(&store.get(p.conv2_b)), k3)
            .unwrap();
        for (o, cv) in out.data().iter().zip(c.data()) {
            assert!((o - 0.5 * cv).abs() < 1e-12);
        }
    }

    #[test]
    fn cab_pool_of_constant_input_is_constant() {
        let x = Tensor::<f64>::full(&[1, 3, 4, 4], 2.5);
        let pooled = x.mean_hw();
        assert_eq!(pooled.shape(), &[1, 3, 1, 1]);
        assert!(pooled.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn cab_preserves_shape() {
        let mut rng = StdRng::seed_from_u64(35);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        let p = CabParams::init("cab", &cfg, &mut store, &mut rng);
        let x = rand_map(&mut rng, &[2, 4, 6, 3]);
        let out = channel_attention_block(&x, &p, &store).unwrap();
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn msb_zero_init_residuals_is_identity() {
        let mut rng = StdRng::seed_from_u64(36);
        let mut cfg = MsbConfig::new(4, 2);
        cfg.zero_init_residual = true;
        let mut store = ParamStore::<f64>::new();
        let blocks: Vec<MsbParams> = (0..3)
            .map(|i| MsbParams::init(&format!("msb{i}"), &cfg, &mut store, &mut rng))
            .collect();
        let mut f0 = rand_map(&mut rng, &[1, 4, 4, 4]);
        let mut f1 = rand_map(&mut rng, &[1, 4, 4, 4]);
        let (orig0, orig1) = (f0.clone(), f1.clone());
        for p in &blocks {
            let (g0, g1) = mixed_ssm_block(&f0, &f1, &cfg, p, &store).unwrap();
            f0 = g0;
            f1 = g1;
        }
        assert_eq!(f0.data(), orig0.data());
        assert_eq!(f1.data(), orig1.data());
    }

    #[test]
    fn msb_stack_preserves_shape() {
        let mut rng = StdRng::seed_from_u64(37);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        for k in 1..=3usize {
            let blocks: Vec<MsbParams> = (0..k)
                .map(|i| MsbParams::init(&format!("k{k}.msb{i}"), &cfg, &mut store, &mut rng))
                .collect();
            let mut f0 = rand_map(&mut rng, &[1, 4, 4, 6]);
            let mut f1 = rand_map(&mut rng, &[1, 4, 4, 6]);
            for p in &blocks {
                let (g0, g1) = mixed_ssm_block(&f0, &f1, &cfg, p, &store).unwrap();
                assert_eq!(g0.shape(), &[1, 4, 4, 6]);
                f0 = g0;
                f1 = g1;
            }
        }
    }

    #[test]
    fn msb_frame_swap_with_symmetric_scan_swaps_outputs() {
        let mut rng = StdRng::seed_from_u64(38);
        let cfg = MsbConfig::new(4, 2);
        let mut store = ParamStore::<f64>::new();
        let p = MsbParams::init("msb", &cfg, &mut store, &mut rng);
        // a per-token scan path treats the frames symmetrically
        for ids in &p.s6.ssm4 {
            store.set_data(ids.s_c, vec![0.0; 8 * 2]);
        }
        let f0 = rand_map(&mut rng, &[1, 4, 3, 3]);
        let f1 = rand_map(&mut rng, &[1, 4, 3, 3]);
        let (g0, g1) = mixed_ssm_block(&f0, &f1, &cfg, &p, &store).unwrap();
        let (s0, s1) = mixed_ssm_block(&f1, &f0, &cfg, &p, &store).unwrap();
        assert_eq!(s0.data(), g1.data());
        assert_eq!(s1.data(), g0.data());
    }

    #[test]
    fn patch_embed_halves_spatial_doubles_channels() {
        let mut rng = StdRng::seed_from_u64(39);
        let mut store = ParamStore::<f64>::new();
        let p = PatchEmbedParams::init("pe", 3, &mut store, &mut rng);
        let x = rand_map(&mut rng, &[2, 3, 8, 8]);
        let y = overlap_patch_embed(&x, &p, &store).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 4]);
    }

    #[test]
    fn patch_embed_rejects_odd_extent() {
        let mut rng = StdRng::seed_from_u64(40);
        let mut store = ParamStore::<f64>::new();
        let p = PatchEmbedParams::init("pe", 2, &mut store, &mut rng);
        let x = Tensor::<f64>::zeros(&[1, 2, 7, 8]);
        assert!(overlap_patch_embed(&x, &p, &store).is_err());
    }

    #[test]
    fn patch_embed_averaging_kernel_keeps_constant_interior() {
        let mut rng = StdRng::seed_from_u64(41);
        let l = 2usize;
        let mut store = ParamStore::<f64>::new();
        let p = PatchEmbedParams::init("pe", l, &mut store, &mut rng);
        store.set_data(p.conv_w, vec![1.0 / (9.0 * l as f64); 2 * l * l * 9]);
        let x = Tensor::<f64>::full(&[1, l, 6, 6], 3.0);
        let y = patch_embed_conv(&x, &p, &store).unwrap();
        // interior outputs (away from the zero-padded border) average to
        // the input constant
        assert_eq!(y.shape(), &[1, 2 * l, 3, 3]);
        for c in 0..2 * l {
            let v = y.data()[(c * 3 + 1) * 3 + 1];
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_embed_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut store = ParamStore::<f64>::new();
        let p = PatchEmbedParams::init("pe", 2, &mut store, &mut rng);
        let x = rand_map(&mut rng, &[1, 2, 4, 4]).requires_grad_leaf();
        let mut leaves = vec![x];
        leaves.extend(store.tensors());
        let base = store.with_tensors(&store.tensors());
        let p2 = p.clone();
        let f = move |inp: &[Tensor<f64>]| -> Tensor<f64> {
            let probe = base.with_tensors(&inp[1..]);
            let y = overlap_patch_embed(&inp[0], &p2, &probe).unwrap();
            let w = Tensor::new((0..y.numel()).map(|i| 0.1 * i as f64 - 1.0).collect(), y.shape());
            y.mul(&w).unwrap().sum_all()
        };
        let worst = oracle::gradcheck(&f, &leaves, 1e-5, 8);
        assert!(worst < 1e-3, "max rel err {worst}");
    }
}
