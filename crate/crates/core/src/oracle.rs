//! Independent reference implementations used to cross-check the fast
//! paths: a step-by-step recurrence, a finite-difference gradient checker,
//! and pixel-loop image metrics. Everything here is deliberately written
//! with plain loops, separate from the code it verifies. Used by the test
//! suites and by the `selftest` CLI subcommand.

use crate::tensor::Tensor;

/// Step-by-step selective-SSM recurrence over raw arrays.
///
/// x, delta: [B,T,L]; a: [L,N]; b_t, c_t: [B,T,N]; d: [L]. Returns [B,T,L].
#[allow(clippy::too_many_arguments)]
pub fn naive_selective_scan(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b_t: &[f64],
    c_t: &[f64],
    d: &[f64],
    dims: (usize, usize, usize, usize),
) -> Vec<f64> {
    let (b, t, l, n) = dims;
    let mut y = vec![0.0; b * t * l];
    for bi in 0..b {
        for li in 0..l {
            let mut h = vec![0.0; n];
            for ti in 0..t {
                let xv = x[(bi * t + ti) * l + li];
                let dv = delta[(bi * t + ti) * l + li];
                let mut acc = d[li] * xv;
                for ni in 0..n {
                    let av = a[li * n + ni];
                    let bv = b_t[(bi * t + ti) * n + ni];
                    let cv = c_t[(bi * t + ti) * n + ni];
                    let z = dv * av;
                    let a_bar = z.exp();
                    let b_bar = if z.abs() < 1e-12 {
                        dv * bv
                    } else {
                        (z.exp() - 1.0) / av * bv
                    };
                    h[ni] = a_bar * h[ni] + b_bar * xv;
                    acc += cv * h[ni];
                }
                y[(bi * t + ti) * l + li] = acc;
            }
        }
    }
    y
}

/// Relative error with a small floor so finite-difference noise at
/// near-zero gradients does not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// for every listed leaf. Checks at most `max_per_leaf` elements per leaf
/// (strided to cover the tensor). Returns the max relative error seen.
pub fn gradcheck(
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
    leaves: &[Tensor<f64>],
    step: f64,
    max_per_leaf: usize,
) -> f64 {
    let out = f(leaves);
    assert_eq!(out.numel(), 1, "gradcheck needs a scalar output");
    let grads = out.backward();
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let g = grads.get(leaf);
        let n = leaf.numel();
        let stride = (n / max_per_leaf).max(1);
        for ei in (0..n).step_by(stride) {
            let eval = |delta: f64| -> f64 {
                let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
                let mut data = leaf.data().to_vec();
                data[ei] += delta;
                probe[li] = Tensor::leaf_with_id(data, leaf.shape(), leaf.leaf_id().unwrap());
                f(&probe).item()
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let an = g.map(|g| g[ei]).unwrap_or(0.0);
            let e = rel_err(an, fd);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

/// Pixel-loop PSNR in dB with the zero-MSE value capped at 99.
pub fn psnr_reference(pred: &[f64], gt: &[f64], max_val: f64) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut mse = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        mse += (p - g) * (p - g);
    }
    mse /= pred.len() as f64;
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(99.0)
}

/// Pixel-loop single-channel SSIM: 11x11 Gaussian window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, valid-region mean.
pub fn ssim_reference_plane(pred: &[f64], gt: &[f64], h: usize, w: usize, max_val: f64) -> f64 {
    assert!(h >= 11 && w >= 11);
    let win = gaussian_window_11();
    let c1 = (0.01 * max_val) * (0.01 * max_val);
    let c2 = (0.03 * max_val) * (0.03 * max_val);
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in 5..h - 5 {
        for cx in 5..w - 5 {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            for dy in 0..11 {
                for dx in 0..11 {
                    let wgt = win[dy * 11 + dx];
                    let idx = (cy + dy - 5) * w + (cx + dx - 5);
                    mu_x += wgt * pred[idx];
                    mu_y += wgt * gt[idx];
                }
            }
            let mut var_x = 0.0;
            let mut var_y = 0.0;
            let mut cov = 0.0;
            for dy in 0..11 {
                for dx in 0..11 {
                    let wgt = win[dy * 11 + dx];
                    let idx = (cy + dy - 5) * w + (cx + dx - 5);
                    let ex = pred[idx] - mu_x;
                    let ey = gt[idx] - mu_y;
                    var_x += wgt * ex * ex;
                    var_y += wgt * ey * ey;
                    cov += wgt * ex * ey;
                }
            }
            let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Normalized 11x11 Gaussian window with sigma 1.5.
pub fn gaussian_window_11() -> Vec<f64> {
    let sigma = 1.5;
    let mut win = vec![0.0; 121];
    let mut sum = 0.0;
    for y in 0..11 {
        for x in 0..11 {
            let dy = y as f64 - 5.0;
            let dx = x as f64 - 5.0;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            win[y * 11 + x] = v;
            sum += v;
        }
    }
    for v in &mut win {
        *v /= sum;
    }
    win
}

/// Plain-loop weighted Laplacian-pyramid L1 distance between two planes,
/// mirroring the training loss conventions: 5x5 binomial blur with zero
/// padding, decimation by even indices, align-corners bilinear expansion.
/// `pred`/`gt` are [C,H,W] planes flattened; returns the scalar loss.
pub fn laplacian_reference(
    pred: &[f64],
    gt: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    levels: usize,
) -> f64 {
    let blur = |img: &[f64], h: usize, w: usize| -> Vec<f64> {
        let k = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ky, wy) in k.iter().enumerate() {
                    for (kx, wx) in k.iter().enumerate() {
                        let yy = y as isize + ky as isize - 2;
                        let xx = x as isize + kx as isize - 2;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            acc += wy * wx * img[yy as usize * w + xx as usize];
                        }
                    }
                }
                out[y * w + x] = acc / 256.0;
            }
        }
        out
    };
    let down = |img: &[f64], h: usize, w: usize| -> (Vec<f64>, usize, usize) {
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                out[y * wo + x] = img[(2 * y) * w + 2 * x];
            }
        }
        (out, ho, wo)
    };
    let up = |img: &[f64], h: usize, w: usize, ho: usize, wo: usize| -> Vec<f64> {
        let sy = if ho > 1 { (h - 1) as f64 / (ho - 1) as f64 } else { 0.0 };
        let sx = if wo > 1 { (w - 1) as f64 / (wo - 1) as f64 } else { 0.0 };
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let fy = y as f64 * sy;
                let fx = x as f64 * sx;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                out[y * wo + x] = img[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                    + img[y0 * w + x1] * (1.0 - dy) * dx
                    + img[y1 * w + x0] * dy * (1.0 - dx)
                    + img[y1 * w + x1] * dy * dx;
            }
        }
        out
    };
    let pyramid = |plane: &[f64]| -> Vec<Vec<f64>> {
        let mut gs = vec![(plane.to_vec(), h, w)];
        for _ in 1..levels {
            let (g, gh, gw) = gs.last().unwrap().clone();
            let (d, dh, dw) = down(&blur(&g, gh, gw), gh, gw);
            gs.push((d, dh, dw));
        }
        let mut laps = Vec::new();
        for l in 0..levels - 1 {
            let (g, gh, gw) = &gs[l];
            let (n, nh, nw) = &gs[l + 1];
            let u = up(n, *nh, *nw, *gh, *gw);
            laps.push(g.iter().zip(&u).map(|(a, b)| a - b).collect());
        }
        laps.push(gs[levels - 1].0.clone());
        laps
    };
    let mut loss = 0.0;
    for l in 0..levels {
        let mut acc = 0.0;
        let mut count = 0usize;
        for c in 0..channels {
            let plane_p = pyramid(&pred[c * h * w..(c + 1) * h * w]);
            let plane_g = pyramid(&gt[c * h * w..(c + 1) * h * w]);
            for (a, b) in plane_p[l].iter().zip(&plane_g[l]) {
                acc += (a - b).abs();
                count += 1;
            }
        }
        loss += f64::powi(2.0, l as i32) * acc / count as f64;
    }
    loss
}
