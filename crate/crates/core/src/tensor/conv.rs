//! 2D convolution (grouped, strided, zero-padded) with backward rules.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, pad: 1, groups: 1 }
    }
}

pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::InvalidShape(format!(
            "conv extent {n} with kernel {k}, stride {stride}, pad {pad} yields an empty output"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl<E: Element> Tensor<E> {
    /// x: [B,C,H,W], w: [O,C/groups,kh,kw], bias: [O] (optional).
    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        spec: Conv2dSpec,
    ) -> Result<Tensor<E>> {
        if self.ndim() != 4 || w.ndim() != 4 {
            return Err(Error::InvalidShape("conv2d expects rank-4 input and weight".into()));
        }
        let (b, c, h, wd) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let g = spec.groups;
        if c % g != 0 || o % g != 0 || cg != c / g {
            return Err(Error::InvalidShape(format!(
                "conv2d groups {g} incompatible with C={c}, O={o}, w C/g={cg}"
            )));
        }
        if let Some(bt) = bias {
            if bt.numel() != o {
                return Err(Error::InvalidShape("conv2d bias length mismatch".into()));
            }
        }
        let ho = conv_out_extent(h, kh, spec.stride, spec.pad)?;
        let wo = conv_out_extent(wd, kw, spec.stride, spec.pad)?;
        let o_per_g = o / g;

        let xd = self.data();
        let wdt = w.data();
        let bd: Option<Vec<E>> = bias.map(|t| t.data().to_vec());
        let mut data = vec![E::zero(); b * o * ho * wo];
        data.par_chunks_mut(ho * wo).enumerate().for_each(|(bo_idx, out)| {
            let bi = bo_idx / o;
            let oi = bo_idx % o;
            let gi = oi / o_per_g;
            let bias_v = bd.as_ref().map(|v| v[oi]).unwrap_or_else(E::zero);
            for v in out.iter_mut() {
                *v = bias_v;
            }
            for cj in 0..cg {
                let ci = gi * cg + cj;
                let xplane = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                let wplane = &wdt[(oi * cg + cj) * kh * kw..(oi * cg + cj + 1) * kh * kw];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = wplane[i * kw + j];
                        if wv == E::zero() {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut out[oy * wo..(oy + 1) * wo];
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    orow[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });

        let x_t = self.clone();
        let w_t = w.clone();
        let has_bias = bias.is_some();
        let back = Box::new(move |up: &[E]| {
            let xd = x_t.data();
            let wdt = w_t.data();
            // dx
            let mut dx = vec![E::zero(); b * c * h * wd];
            dx.par_chunks_mut(h * wd).enumerate().for_each(|(bc_idx, dxp)| {
                let bi = bc_idx / c;
                let ci = bc_idx % c;
                let gi = ci / cg;
                let cj = ci % cg;
                for op in 0..o_per_g {
                    let oi = gi * o_per_g + op;
                    let uplane = &up[(bi * o + oi) * ho * wo..(bi * o + oi + 1) * ho * wo];
                    let wplane = &wdt[(oi * cg + cj) * kh * kw..(oi * cg + cj + 1) * kh * kw];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wv = wplane[i * kw + j];
                            if wv == E::zero() {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let urow = &uplane[oy * wo..(oy + 1) * wo];
                                let drow = &mut dxp[iy as usize * wd..(iy as usize + 1) * wd];
                                for ox in 0..wo {
                                    let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        drow[ix as usize] += wv * urow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            // dw (per output channel, batches accumulated sequentially)
            let mut dw = vec![E::zero(); o * cg * kh * kw];
            dw.par_chunks_mut(cg * kh * kw).enumerate().for_each(|(oi, dwp)| {
                let gi = oi / o_per_g;
                for bi in 0..b {
                    let uplane = &up[(bi * o + oi) * ho * wo..(bi * o + oi + 1) * ho * wo];
                    for cj in 0..cg {
                        let ci = gi * cg + cj;
                        let xplane = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                        for i in 0..kh {
                            for j in 0..kw {
                                let mut acc = E::zero();
                                for oy in 0..ho {
                                    let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                                    let urow = &uplane[oy * wo..(oy + 1) * wo];
                                    for ox in 0..wo {
                                        let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                                        if ix >= 0 && ix < wd as isize {
                                            acc += urow[ox] * xrow[ix as usize];
                                        }
                                    }
                                }
                                dwp[cj * kh * kw + i * kw + j] += acc;
                            }
                        }
                    }
                }
            });
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![E::zero(); o];
                for bi in 0..b {
                    for oi in 0..o {
                        let uplane = &up[(bi * o + oi) * ho * wo..(bi * o + oi + 1) * ho * wo];
                        let mut acc = E::zero();
                        for &v in uplane {
                            acc += v;
                        }
                        db[oi] += acc;
                    }
                }
                grads.push(Some(db));
            }
            grads
        });
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        Ok(Tensor::from_op(data, vec![b, o, ho, wo], parents, back))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_kernel() {
        let x = Tensor::<f64>::new((0..18).map(|v| v as f64).collect(), &[1, 2, 3, 3]);
        // 2-in 2-out identity 1x1 kernel
        let w = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]);
        let y = x
            .conv2d(&w, None, Conv2dSpec { stride: 1, pad: 0, groups: 1 })
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_3x3_center_counts_nine() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x
            .conv2d(&w, None, Conv2dSpec { stride: 1, pad: 1, groups: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0); // corner sees 2x2
    }

    #[test]
    fn empty_output_extent_rejected() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        assert!(x
            .conv2d(&w, None, Conv2dSpec { stride: 1, pad: 0, groups: 1 })
            .is_err());
    }

    #[test]
    fn depthwise_groups() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]);
        // each channel scaled by its own 1x1 weight
        let w = Tensor::<f64>::new(vec![2.0, 10.0], &[2, 1, 1, 1]);
        let y = x
            .conv2d(&w, None, Conv2dSpec { stride: 1, pad: 0, groups: 2 })
            .unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::<f64>::ones(&[1, 1, 8, 8]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x
            .conv2d(&w, None, Conv2dSpec { stride: 2, pad: 1, groups: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }
}
