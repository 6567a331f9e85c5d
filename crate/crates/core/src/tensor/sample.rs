//! Bilinear sampling, resizing and padding. Sampling convention: pixel
//! centers sit at integer coordinates, out-of-bounds reads clamp to the
//! border.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// img: [B,C,H,W], coords: [B,Ho,Wo,2] in pixel units with
    /// `coords[...,0] = x` (width axis) and `coords[...,1] = y`.
    /// Differentiable w.r.t. both inputs.
    pub fn grid_sample_bilinear(&self, coords: &Tensor<E>) -> Result<Tensor<E>> {
        if self.ndim() != 4 || coords.ndim() != 4 || coords.shape()[3] != 2 {
            return Err(Error::InvalidShape(
                "grid_sample expects img [B,C,H,W] and coords [B,Ho,Wo,2]".into(),
            ));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if coords.shape()[0] != b {
            return Err(Error::InvalidShape("grid_sample batch mismatch".into()));
        }
        let (ho, wo) = (coords.shape()[1], coords.shape()[2]);
        let xd = self.data();
        let cd = coords.data();

        let sample = |bi: usize, ci: usize, x: E, y: E| -> E {
            let (x0, x1, fx) = clamp_lerp::<E>(x, w);
            let (y0, y1, fy) = clamp_lerp::<E>(y, h);
            let plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let v00 = plane[y0 * w + x0];
            let v01 = plane[y0 * w + x1];
            let v10 = plane[y1 * w + x0];
            let v11 = plane[y1 * w + x1];
            let one = E::one();
            (v00 * (one - fx) + v01 * fx) * (one - fy) + (v10 * (one - fx) + v11 * fx) * fy
        };

        let mut data = vec![E::zero(); b * c * ho * wo];
        data.par_chunks_mut(ho * wo).enumerate().for_each(|(bc, out)| {
            let bi = bc / c;
            let ci = bc % c;
            for oy in 0..ho {
                for ox in 0..wo {
                    let ci_off = (bi * ho * wo + oy * wo + ox) * 2;
                    out[oy * wo + ox] = sample(bi, ci, cd[ci_off], cd[ci_off + 1]);
                }
            }
        });

        let img_t = self.clone();
        let coords_t = coords.clone();
        let back = Box::new(move |up: &[E]| {
            let xd = img_t.data();
            let cd = coords_t.data();
            let one = E::one();
            let mut dimg = vec![E::zero(); b * c * h * w];
            dimg.par_chunks_mut(h * w).enumerate().for_each(|(bc, dplane)| {
                let bi = bc / c;
                let ci = bc % c;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let coff = (bi * ho * wo + oy * wo + ox) * 2;
                        let (x0, x1, fx) = clamp_lerp::<E>(cd[coff], w);
                        let (y0, y1, fy) = clamp_lerp::<E>(cd[coff + 1], h);
                        let u = up[(bi * c + ci) * ho * wo + oy * wo + ox];
                        dplane[y0 * w + x0] += u * (one - fx) * (one - fy);
                        dplane[y0 * w + x1] += u * fx * (one - fy);
                        dplane[y1 * w + x0] += u * (one - fx) * fy;
                        dplane[y1 * w + x1] += u * fx * fy;
                    }
                }
            });
            let mut dcoords = vec![E::zero(); b * ho * wo * 2];
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let coff = (bi * ho * wo + oy * wo + ox) * 2;
                        let x = cd[coff];
                        let y = cd[coff + 1];
                        let (x0, x1, fx) = clamp_lerp::<E>(x, w);
                        let (y0, y1, fy) = clamp_lerp::<E>(y, h);
                        let in_x = x > E::zero() && x < E::of_f64((w - 1) as f64);
                        let in_y = y > E::zero() && y < E::of_f64((h - 1) as f64);
                        let mut gx = E::zero();
                        let mut gy = E::zero();
                        for ci in 0..c {
                            let plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                            let v00 = plane[y0 * w + x0];
                            let v01 = plane[y0 * w + x1];
                            let v10 = plane[y1 * w + x0];
                            let v11 = plane[y1 * w + x1];
                            let u = up[(bi * c + ci) * ho * wo + oy * wo + ox];
                            if in_x {
                                gx += u * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                            }
                            if in_y {
                                gy += u * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                            }
                        }
                        dcoords[coff] = gx;
                        dcoords[coff + 1] = gy;
                    }
                }
            }
            vec![Some(dimg), Some(dcoords)]
        });
        Ok(Tensor::from_op(
            data,
            vec![b, c, ho, wo],
            vec![self.clone(), coords.clone()],
            back,
        ))
    }

    /// Bilinear resize to (ho, wo), align-corners mapping.
    pub fn resize_bilinear(&self, ho: usize, wo: usize) -> Result<Tensor<E>> {
        let (b, h, w) = (self.shape()[0], self.shape()[2], self.shape()[3]);
        if h == ho && w == wo {
            return self.reshape(self.shape().to_vec().as_slice());
        }
        let grid = resize_grid::<E>(b, h, w, ho, wo);
        self.grid_sample_bilinear(&grid)
    }

    /// Backward warp: sample `self` at positions displaced by `flow`
    /// ([B,2,H,W], channel 0 = x displacement, channel 1 = y, pixel units).
    pub fn flow_warp(&self, flow: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, h, w) = (self.shape()[0], self.shape()[2], self.shape()[3]);
        if flow.shape() != [b, 2, h, w] {
            return Err(Error::InvalidShape(format!(
                "flow_warp: flow shape {:?}, expected [{b},2,{h},{w}]",
                flow.shape()
            )));
        }
        let grid = identity_grid::<E>(b, h, w);
        let coords = grid.add(&flow.permute(&[0, 2, 3, 1]))?;
        self.grid_sample_bilinear(&coords)
    }

    pub fn reflection_pad2d(&self, pad: usize) -> Tensor<E> {
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        assert!(h > pad && w > pad, "reflection pad {pad} too large for {h}x{w}");
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut v = i;
            if v < 0 {
                v = -v;
            }
            if v >= n {
                v = 2 * n - 2 - v;
            }
            v as usize
        };
        let xd = self.data();
        let mut data = vec![E::zero(); b * c * ho * wo];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * ho * wo..(bc + 1) * ho * wo];
            for oy in 0..ho {
                let sy = reflect(oy as isize - pad as isize, h);
                for ox in 0..wo {
                    let sx = reflect(ox as isize - pad as isize, w);
                    dst[oy * wo + ox] = src[sy * w + sx];
                }
            }
        }
        let numel = self.numel();
        let back = Box::new(move |up: &[E]| {
            let mut g = vec![E::zero(); numel];
            for bc in 0..b * c {
                let dst = &mut g[bc * h * w..(bc + 1) * h * w];
                let u = &up[bc * ho * wo..(bc + 1) * ho * wo];
                for oy in 0..ho {
                    let sy = reflect(oy as isize - pad as isize, h);
                    for ox in 0..wo {
                        let sx = reflect(ox as isize - pad as isize, w);
                        dst[sy * w + sx] += u[oy * wo + ox];
                    }
                }
            }
            vec![Some(g)]
        });
        Tensor::from_op(data, vec![b, c, ho, wo], vec![self.clone()], back)
    }
}

fn clamp_lerp<E: Element>(v: E, n: usize) -> (usize, usize, E) {
    let max = (n - 1) as f64;
    let vc = v.as_f64().clamp(0.0, max);
    if n == 1 {
        return (0, 0, E::zero());
    }
    let mut i0 = vc.floor() as usize;
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    let f = vc - i0 as f64;
    (i0, i0 + 1, E::of_f64(f))
}

/// Constant identity sampling grid [B,H,W,2].
pub fn identity_grid<E: Element>(b: usize, h: usize, w: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(b * h * w * 2);
    for _ in 0..b {
        for y in 0..h {
            for x in 0..w {
                data.push(E::of_f64(x as f64));
                data.push(E::of_f64(y as f64));
            }
        }
    }
    Tensor::new(data, &[b, h, w, 2])
}

fn resize_grid<E: Element>(b: usize, h: usize, w: usize, ho: usize, wo: usize) -> Tensor<E> {
    let sy = if ho > 1 { (h - 1) as f64 / (ho - 1) as f64 } else { 0.0 };
    let sx = if wo > 1 { (w - 1) as f64 / (wo - 1) as f64 } else { 0.0 };
    let cy = if ho > 1 { 0.0 } else { (h - 1) as f64 / 2.0 };
    let cx = if wo > 1 { 0.0 } else { (w - 1) as f64 / 2.0 };
    let mut data = Vec::with_capacity(b * ho * wo * 2);
    for _ in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                data.push(E::of_f64(x as f64 * sx + cx));
                data.push(E::of_f64(y as f64 * sy + cy));
            }
        }
    }
    Tensor::new(data, &[b, ho, wo, 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_reproduces_image() {
        let img = Tensor::<f64>::new((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let grid = identity_grid::<f64>(1, 4, 4);
        let out = img.grid_sample_bilinear(&grid).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn shift_by_one_on_ramp() {
        // ramp in x: value == x coordinate
        let img = Tensor::<f64>::new(
            (0..4).flat_map(|_| (0..4).map(|x| x as f64)).collect(),
            &[1, 1, 4, 4],
        );
        let flow = Tensor::<f64>::new(
            (0..32).map(|i| if i < 16 { 1.0 } else { 0.0 }).collect(),
            &[1, 2, 4, 4],
        );
        let out = img.flow_warp(&flow).unwrap();
        // interior columns shift exactly; the last column clamps
        for y in 0..4 {
            for x in 0..3 {
                assert_eq!(out.data()[y * 4 + x], (x + 1) as f64);
            }
        }
    }

    #[test]
    fn midpoint_between_zero_and_one() {
        let img = Tensor::<f64>::new(vec![0.0, 1.0], &[1, 1, 1, 2]);
        let coords = Tensor::<f64>::new(vec![0.5, 0.0], &[1, 1, 1, 2]);
        let out = img.grid_sample_bilinear(&coords).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let img = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let coords = Tensor::<f64>::new(vec![-5.0, -5.0], &[1, 1, 1, 2]);
        let out = img.grid_sample_bilinear(&coords).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = Tensor::<f64>::new((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let out = img.resize_bilinear(4, 4).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn reflection_pad_mirrors() {
        let img = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let out = img.reflection_pad2d(1);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        // row 0 is a reflection of row 1 of the padded interior
        assert_eq!(out.data()[5], 1.0); // interior top-left
        assert_eq!(out.data()[0], 4.0); // corner reflects both axes
    }
}
