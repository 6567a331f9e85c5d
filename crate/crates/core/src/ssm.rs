//! The S6 machinery: per-token selective parameter generation, zero-order
//! hold discretization, the linear-time selective scan (with a hand-written
//! backward pass), and unrolled attention-style views of the scan.
//!
//! Conventions: `x` sequences are `[B, T, L]` with `L` model channels and
//! `N` states per channel. The evolution parameter is diagonal per channel,
//! stored as `a_log` with effective `A = -exp(a_log)` so every entry stays
//! strictly negative.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{softplus_inverse, Element, Tensor};

/// Per-layer selective-SSM parameters. A view over tensors; clones are cheap.
#[derive(Clone)]
pub struct SsmParams<E: Element> {
    pub d_model: usize,
    pub d_state: usize,
    /// [L,N]; effective evolution parameter is `-exp(a_log)`.
    pub a_log: Tensor<E>,
    /// [L,N] input projection generating per-token B.
    pub s_b: Tensor<E>,
    /// [L,N] input projection generating per-token C.
    pub s_c: Tensor<E>,
    /// Low-rank timescale projection: [L,R] then [R,L].
    pub s_delta_down: Tensor<E>,
    pub s_delta_up: Tensor<E>,
    /// [L] bias added before softplus.
    pub delta_bias: Tensor<E>,
    /// [L] residual skip scale.
    pub d_skip: Tensor<E>,
}

pub fn delta_rank(d_model: usize) -> usize {
    d_model.div_ceil(16)
}

impl<E: Element> SsmParams<E> {
    /// Fresh parameters with the standard S6 initialization.
    pub fn init<R: Rng>(d_model: usize, d_state: usize, rng: &mut R) -> Self {
        let l = d_model;
        let n = d_state;
        let r = delta_rank(l);
        let mut a_log = Vec::with_capacity(l * n);
        for _ in 0..l {
            for s in 0..n {
                a_log.push(E::of_f64(((s + 1) as f64).ln()));
            }
        }
        let scale = 1.0 / (l as f64).sqrt();
        let randn = |rng: &mut R, len: usize, std: f64| -> Vec<E> {
            (0..len)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    E::of_f64(z * std)
                })
                .collect()
        };
        let s_b = randn(rng, l * n, scale);
        let s_c = randn(rng, l * n, scale);
        let s_delta_down = randn(rng, l * r, scale);
        let s_delta_up = randn(rng, r * l, 1.0 / (r as f64).sqrt());
        // softplus(bias) log-uniform in [1e-3, 0.1]
        let delta_bias: Vec<E> = (0..l)
            .map(|_| {
                let lo = 1e-3f64.ln();
                let hi = 0.1f64.ln();
                let dt = (rng.gen_range(0.0..1.0) * (hi - lo) + lo).exp();
                softplus_inverse(E::of_f64(dt))
            })
            .collect();
        SsmParams {
            d_model: l,
            d_state: n,
            a_log: Tensor::leaf(a_log, &[l, n]),
            s_b: Tensor::leaf(s_b, &[l, n]),
            s_c: Tensor::leaf(s_c, &[l, n]),
            s_delta_down: Tensor::leaf(s_delta_down, &[l, r]),
            s_delta_up: Tensor::leaf(s_delta_up, &[r, l]),
            delta_bias: Tensor::leaf(delta_bias, &[l]),
            d_skip: Tensor::leaf(vec![E::zero(); l], &[l]),
        }
    }

    /// Effective evolution parameter `A = -exp(a_log)`, differentiable.
    pub fn a_neg(&self) -> Tensor<E> {
        self.a_log.exp().neg()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<E>)> {
        vec![
            ("a_log", &self.a_log),
            ("s_b", &self.s_b),
            ("s_c", &self.s_c),
            ("s_delta_down", &self.s_delta_down),
            ("s_delta_up", &self.s_delta_up),
            ("delta_bias", &self.delta_bias),
            ("d_skip", &self.d_skip),
        ]
    }
}

/// Per-token parameters: `(B_t, C_t, delta_t)` of shapes
/// `([B,T,N], [B,T,N], [B,T,L])`; `delta_t` is strictly positive.
pub fn selective_params<E: Element>(
    x: &Tensor<E>,
    p: &SsmParams<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let b_t = x.matmul(&p.s_b)?;
    let c_t = x.matmul(&p.s_c)?;
    let delta = x
        .matmul(&p.s_delta_down)?
        .matmul(&p.s_delta_up)?
        .add(&p.delta_bias)?
        .softplus();
    Ok((b_t, c_t, delta))
}

/// Discrete-time step coefficients for one `(a, delta)` pair:
/// `A_bar = exp(delta * a)`.
pub fn zoh_a_bar<E: Element>(a: E, delta: E) -> E {
    (delta * a).exp()
}

/// `B_bar = (delta a)^{-1} (exp(delta a) - 1) * delta * b`, with the series
/// limit `delta * b * (1 + z/2)` when `|delta a| < 1e-8`.
pub fn zoh_b_bar<E: Element>(a: E, delta: E, b: E) -> E {
    delta * em1_over_z(delta * a) * b
}

/// (e^z - 1) / z with a series fallback near zero.
fn em1_over_z<E: Element>(z: E) -> E {
    if z.abs() < E::of_f64(1e-8) {
        E::one() + z / E::of_f64(2.0)
    } else {
        z.exp_m1() / z
    }
}

/// Materialized discrete counterparts for analysis and tests.
pub struct DiscreteStep<E: Element> {
    /// [B,T,L,N]
    pub a_bar: Vec<E>,
    /// [B,T,L,N]; `B_bar` itself (not yet multiplied by x).
    pub b_bar: Vec<E>,
    pub shape: [usize; 4],
}

/// Discretize per token: `a` is `[L,N]` (strictly negative entries),
/// `b_t` is `[B,T,N]`, `delta` is `[B,T,L]`.
pub fn discretize<E: Element>(
    a: &Tensor<E>,
    b_t: &Tensor<E>,
    delta: &Tensor<E>,
) -> Result<DiscreteStep<E>> {
    let (l, n) = (a.shape()[0], a.shape()[1]);
    let (b, t) = (delta.shape()[0], delta.shape()[1]);
    if delta.shape()[2] != l || b_t.shape() != [b, t, n] {
        return Err(Error::InvalidShape("discretize shape mismatch".into()));
    }
    let ad = a.data();
    let bd = b_t.data();
    let dd = delta.data();
    let mut a_bar = vec![E::zero(); b * t * l * n];
    let mut b_bar = vec![E::zero(); b * t * l * n];
    for bi in 0..b {
        for ti in 0..t {
            for li in 0..l {
                let dv = dd[(bi * t + ti) * l + li];
                debug_assert!(dv > E::zero());
                for ni in 0..n {
                    let av = ad[li * n + ni];
                    let bv = bd[(bi * t + ti) * n + ni];
                    let o = ((bi * t + ti) * l + li) * n + ni;
                    a_bar[o] = zoh_a_bar(av, dv);
                    b_bar[o] = zoh_b_bar(av, dv, bv);
                }
            }
        }
    }
    Ok(DiscreteStep {
        a_bar,
        b_bar,
        shape: [b, t, l, n],
    })
}

/// Selective scan `y_t = C_t . h_t + D (.) x_t` with
/// `h_t = A_bar_t (.) h_{t-1} + B_bar_t x_t`. Linear time and memory in `T`,
/// differentiable end to end.
pub fn selective_scan<E: Element>(x: &Tensor<E>, p: &SsmParams<E>) -> Result<Tensor<E>> {
    let (b_t, c_t, delta) = selective_params(x, p)?;
    scan_core(x, &delta, &p.a_neg(), &b_t, &c_t, &p.d_skip)
}

/// The recurrence itself, as one fused differentiable op.
///
/// x: [B,T,L], delta: [B,T,L] (positive), a: [L,N] (negative),
/// b_t: [B,T,N], c_t: [B,T,N], d: [L]. Output [B,T,L].
pub fn scan_core<E: Element>(
    x: &Tensor<E>,
    delta: &Tensor<E>,
    a: &Tensor<E>,
    b_t: &Tensor<E>,
    c_t: &Tensor<E>,
    d: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (b, t, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];
    if a.shape()[0] != l
        || delta.shape() != [b, t, l]
        || b_t.shape() != [b, t, n]
        || c_t.shape() != [b, t, n]
        || d.numel() != l
    {
        return Err(Error::InvalidShape("scan_core input shapes inconsistent".into()));
    }
    if t == 0 {
        return Err(Error::InvalidShape("scan over empty sequence".into()));
    }

    let xd = x.data();
    let dd = delta.data();
    let ad = a.data();
    let bd = b_t.data();
    let cd = c_t.data();
    let sd = d.data();

    // States stored as [B, L, T, N] so each (b, l) pair owns a contiguous run.
    let mut h_all = vec![E::zero(); b * l * t * n];
    let mut y_blt = vec![E::zero(); b * l * t];
    h_all
        .par_chunks_mut(t * n)
        .zip(y_blt.par_chunks_mut(t))
        .enumerate()
        .for_each(|(bl, (h_run, y_run))| {
            let bi = bl / l;
            let li = bl % l;
            let arow = &ad[li * n..(li + 1) * n];
            let mut h = vec![E::zero(); n];
            for ti in 0..t {
                let xv = xd[(bi * t + ti) * l + li];
                let dv = dd[(bi * t + ti) * l + li];
                let brow = &bd[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                let crow = &cd[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                let mut y = sd[li] * xv;
                for ni in 0..n {
                    let abar = zoh_a_bar(arow[ni], dv);
                    let u = zoh_b_bar(arow[ni], dv, brow[ni]) * xv;
                    h[ni] = abar * h[ni] + u;
                    y += crow[ni] * h[ni];
                }
                h_run[ti * n..(ti + 1) * n].copy_from_slice(&h);
                y_run[ti] = y;
            }
        });

    if let Some(i) = y_blt.iter().position(|v| !v.is_finite()) {
        let token = i % t;
        return Err(Error::NonFinite(format!(
            "selective scan produced a non-finite value at token {token}"
        )));
    }

    // [B,L,T] -> [B,T,L]
    let mut data = vec![E::zero(); b * t * l];
    for bi in 0..b {
        for li in 0..l {
            for ti in 0..t {
                data[(bi * t + ti) * l + li] = y_blt[(bi * l + li) * t + ti];
            }
        }
    }

    let x_t = x.clone();
    let delta_t = delta.clone();
    let a_t = a.clone();
    let bt_t = b_t.clone();
    let ct_t = c_t.clone();
    let d_t = d.clone();
    let h_saved = std::sync::Arc::new(h_all);

    let back = Box::new(move |up: &[E]| {
        let xd = x_t.data();
        let dd = delta_t.data();
        let ad = a_t.data();
        let bd = bt_t.data();
        let cd = ct_t.data();
        let sd = d_t.data();
        let h_all = &h_saved;

        struct PerBatch<E> {
            dx: Vec<E>,
            ddelta: Vec<E>,
            db: Vec<E>,
            dc: Vec<E>,
            da: Vec<E>,
            dd_skip: Vec<E>,
        }

        let per_batch: Vec<PerBatch<E>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let mut dx = vec![E::zero(); t * l];
                let mut ddelta = vec![E::zero(); t * l];
                let mut db = vec![E::zero(); t * n];
                let mut dc = vec![E::zero(); t * n];
                let mut da = vec![E::zero(); l * n];
                let mut dd_skip = vec![E::zero(); l];
                let two = E::of_f64(2.0);
                let three = E::of_f64(3.0);
                for li in 0..l {
                    let arow = &ad[li * n..(li + 1) * n];
                    let h_run = &h_all[(bi * l + li) * t * n..(bi * l + li + 1) * t * n];
                    let mut dh = vec![E::zero(); n];
                    for ti in (0..t).rev() {
                        let xv = xd[(bi * t + ti) * l + li];
                        let dv = dd[(bi * t + ti) * l + li];
                        let uy = up[(bi * t + ti) * l + li];
                        let brow = &bd[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                        let crow = &cd[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                        let h_now = &h_run[ti * n..(ti + 1) * n];
                        dd_skip[li] += uy * xv;
                        let mut dxv = uy * sd[li];
                        let mut ddv = E::zero();
                        for ni in 0..n {
                            let av = arow[ni];
                            let z = dv * av;
                            let ez = z.exp();
                            let em1z = em1_over_z(z);
                            let h_prev = if ti == 0 {
                                E::zero()
                            } else {
                                h_run[(ti - 1) * n + ni]
                            };
                            // full dL/dh_t
                            let dht = dh[ni] + uy * crow[ni];
                            dc[ti * n + ni] += uy * h_now[ni];
                            let du = dht;
                            let dabar = dht * h_prev;
                            // A_bar = e^z ; u = delta * em1z * b * x
                            ddv += dabar * av * ez + du * ez * brow[ni] * xv;
                            // d u / d a, stable near z = 0
                            let duda = if z.abs() < E::of_f64(1e-6) {
                                brow[ni] * xv * dv * dv * (E::of_f64(0.5) + z / three)
                            } else {
                                brow[ni] * xv * (dv * ez - dv * em1z) / av
                            };
                            let _ = two;
                            da[li * n + ni] += dabar * dv * ez + du * duda;
                            db[ti * n + ni] += du * dv * em1z * xv;
                            dxv += du * dv * em1z * brow[ni];
                            dh[ni] = dht * zoh_a_bar(av, dv);
                        }
                        dx[ti * l + li] = dxv;
                        ddelta[ti * l + li] = ddv;
                    }
                }
                PerBatch { dx, ddelta, db, dc, da, dd_skip }
            })
            .collect();

        let mut dx = vec![E::zero(); b * t * l];
        let mut ddelta = vec![E::zero(); b * t * l];
        let mut db = vec![E::zero(); b * t * n];
        let mut dc = vec![E::zero(); b * t * n];
        let mut da = vec![E::zero(); l * n];
        let mut dds = vec![E::zero(); l];
        for (bi, pb) in per_batch.iter().enumerate() {
            dx[bi * t * l..(bi + 1) * t * l].copy_from_slice(&pb.dx);
            ddelta[bi * t * l..(bi + 1) * t * l].copy_from_slice(&pb.ddelta);
            db[bi * t * n..(bi + 1) * t * n].copy_from_slice(&pb.db);
            dc[bi * t * n..(bi + 1) * t * n].copy_from_slice(&pb.dc);
            for i in 0..l * n {
                da[i] += pb.da[i];
            }
            for i in 0..l {
                dds[i] += pb.dd_skip[i];
            }
        }
        vec![
            Some(dx),
            Some(ddelta),
            Some(da),
            Some(db),
            Some(dc),
            Some(dds),
        ]
    });

    Ok(Tensor::from_op(
        data,
        vec![b, t, l],
        vec![
            x.clone(),
            delta.clone(),
            a.clone(),
            b_t.clone(),
            c_t.clone(),
            d.clone(),
        ],
        back,
    ))
}

/// Exact unrolled-recurrence attention matrix for one channel:
/// `alpha[i][j] = C_i . (prod_{k=j+1..i} A_bar_k) (.) B_bar_j` for `j <= i`,
/// zero above the diagonal. `alpha . x + D (.) x` reproduces the scan output
/// exactly. Analysis tool; materializes T x T.
pub fn hidden_attention_matrix<E: Element>(
    x: &Tensor<E>,
    p: &SsmParams<E>,
    channel: usize,
) -> Result<Tensor<E>> {
    let (t, l) = (x.shape()[0], x.shape()[1]);
    assert!(channel < l);
    let xb = x.reshape(&[1, t, l])?;
    let (b_t, c_t, delta) = selective_params(&xb, p)?;
    let n = p.d_state;
    let a = p.a_neg();
    let ad = a.data();
    let bd = b_t.data();
    let cd = c_t.data();
    let dd = delta.data();
    let arow = &ad[channel * n..(channel + 1) * n];
    let mut alpha = vec![E::zero(); t * t];
    let mut prod = vec![E::zero(); n];
    for j in 0..t {
        let dv_j = dd[j * l + channel];
        for ni in 0..n {
            prod[ni] = zoh_b_bar(arow[ni], dv_j, bd[j * n + ni]);
        }
        for i in j..t {
            if i > j {
                let dv_i = dd[i * l + channel];
                for ni in 0..n {
                    prod[ni] *= zoh_a_bar(arow[ni], dv_i);
                }
            }
            let mut acc = E::zero();
            for ni in 0..n {
                acc += cd[i * n + ni] * prod[ni];
            }
            alpha[i * t + j] = acc;
        }
    }
    Ok(Tensor::new(alpha, &[t, t]))
}

/// The approximate attention weights `alpha[i][j] ~= Q_i K_j H_{i,j}`
/// with `Q_i = S_C x_i`, `K_j = relu(S_delta x_j) S_B x_j` and
/// `H_{i,j} = exp(sum of positive timescale logits strictly between j and i)
/// * A`, evaluated per (channel, state) and summed over states. Diagonal
/// entries use the empty-product convention. For side-by-side inspection
/// with the exact matrix only.
pub fn hidden_attention_paper_approx<E: Element>(
    x: &Tensor<E>,
    p: &SsmParams<E>,
    channel: usize,
) -> Result<Tensor<E>> {
    let (t, l) = (x.shape()[0], x.shape()[1]);
    assert!(channel < l);
    let xb = x.reshape(&[1, t, l])?;
    let b_t = xb.matmul(&p.s_b)?;
    let c_t = xb.matmul(&p.s_c)?;
    // raw timescale logits before softplus
    let logits = xb
        .matmul(&p.s_delta_down)?
        .matmul(&p.s_delta_up)?
        .add(&p.delta_bias)?;
    let n = p.d_state;
    let a = p.a_neg();
    let ad = a.data();
    let arow = &ad[channel * n..(channel + 1) * n];
    let bd = b_t.data();
    let cd = c_t.data();
    let ld = logits.data();
    let mut alpha = vec![E::zero(); t * t];
    for j in 0..t {
        let kj = {
            let g = ld[j * l + channel];
            if g > E::zero() {
                g
            } else {
                E::zero()
            }
        };
        let mut between = E::zero();
        for i in j..t {
            if i > j {
                // token i-1 became "strictly between" when moving i forward
                let g = ld[(i - 1) * l + channel];
                if i - 1 > j && g > E::zero() {
                    between += g;
                }
            }
            let hfac = between.exp();
            let mut acc = E::zero();
            for ni in 0..n {
                let q = cd[i * n + ni];
                let k = kj * bd[j * n + ni];
                acc += q * k * hfac * arow[ni];
            }
            alpha[i * t + j] = acc;
        }
    }
    Ok(Tensor::new(alpha, &[t, t]))
}

/// Apply an attention matrix plus the skip: `alpha . x_col + D * x_col` for
/// one channel.
pub fn apply_attention<E: Element>(
    alpha: &Tensor<E>,
    x: &Tensor<E>,
    p: &SsmParams<E>,
    channel: usize,
) -> Vec<E> {
    let (t, l) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let al = alpha.data();
    let dv = p.d_skip.data()[channel];
    let mut out = vec![E::zero(); t];
    for i in 0..t {
        let mut acc = dv * xd[i * l + channel];
        for j in 0..=i {
            acc += al[i * t + j] * xd[j * l + channel];
        }
        out[i] = acc;
    }
    out
}
