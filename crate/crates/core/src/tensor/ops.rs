//! Elementwise, matmul, reduction and shape-manipulation ops with their
//! backward rules. Broadcasting follows trailing-dimension alignment.

use rayon::prelude::*;

use super::{contiguous_strides, Element, Tensor};
use crate::error::{Error, Result};

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::InvalidShape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out_shape`, with zero stride on broadcast dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = contiguous_strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = strides[i - offset];
        }
    }
    out
}

/// Walk every output index of `out_shape`, yielding offsets into two
/// broadcast inputs.
fn for_each_bcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let ndim = out_shape.len();
    let mut idx = vec![0usize; ndim];
    let mut ao = 0usize;
    let mut bo = 0usize;
    for o in 0..numel {
        f(o, ao, bo);
        for d in (0..ndim).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * out_shape[d];
            bo -= sb[d] * out_shape[d];
        }
    }
}

/// Sum `data` (of `from_shape`) down to `to_shape` (trailing-aligned).
pub(crate) fn reduce_to_shape<E: Element>(
    data: &[E],
    from_shape: &[usize],
    to_shape: &[usize],
) -> Vec<E> {
    let to_numel: usize = to_shape.iter().product();
    let mut out = vec![E::zero(); to_numel];
    let st = broadcast_strides(to_shape, from_shape);
    let sf = contiguous_strides(from_shape);
    for_each_bcast2(from_shape, &sf, &st, |_, fo, to| {
        out[to] += data[fo];
    });
    out
}

impl<E: Element> Tensor<E> {
    fn binary(
        &self,
        other: &Tensor<E>,
        f: impl Fn(E, E) -> E,
        // (a, b, upstream) -> (da, db)
        df: impl Fn(E, E, E) -> (E, E) + Send + Sync + 'static,
    ) -> Result<Tensor<E>> {
        let out_shape = broadcast_shapes(self.shape(), other.shape())?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![E::zero(); numel];
        {
            let ad = self.data();
            let bd = other.data();
            if self.shape() == other.shape() {
                for i in 0..numel {
                    data[i] = f(ad[i], bd[i]);
                }
            } else {
                for_each_bcast2(&out_shape, &sa, &sb, |o, ao, bo| {
                    data[o] = f(ad[ao], bd[bo]);
                });
            }
        }
        let a = self.clone();
        let b = other.clone();
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let os = out_shape.clone();
        let back = Box::new(move |up: &[E]| {
            let ad = a.data();
            let bd = b.data();
            let mut ga = vec![E::zero(); up.len()];
            let mut gb = vec![E::zero(); up.len()];
            let sa = broadcast_strides(&a_shape, &os);
            let sb = broadcast_strides(&b_shape, &os);
            for_each_bcast2(&os, &sa, &sb, |o, ao, bo| {
                let (da, db) = df(ad[ao], bd[bo], up[o]);
                ga[o] = da;
                gb[o] = db;
            });
            let ga = reduce_to_shape(&ga, &os, &a_shape);
            let gb = reduce_to_shape(&gb, &os, &b_shape);
            vec![Some(ga), Some(gb)]
        });
        Ok(Tensor::from_op(data, out_shape, vec![self.clone(), other.clone()], back))
    }

    fn unary(
        &self,
        f: impl Fn(E) -> E,
        // (x, y, upstream) -> dx
        df: impl Fn(E, E, E) -> E + Send + Sync + 'static,
    ) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y_data = data.clone();
        let back = Box::new(move |up: &[E]| {
            let xd = x.data();
            let g: Vec<E> = (0..up.len()).map(|i| df(xd[i], y_data[i], up[i])).collect();
            vec![Some(g)]
        });
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], back)
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| a + b, |_, _, u| (u, u))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| a - b, |_, _, u| (u, -u))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| a * b, |a, b, u| (u * b, u * a))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, |a, b| a / b, |a, b, u| (u / b, -u * a / (b * b)))
    }

    pub fn add_scalar(&self, v: E) -> Tensor<E> {
        self.unary(move |x| x + v, |_, _, u| u)
    }

    pub fn mul_scalar(&self, v: E) -> Tensor<E> {
        self.unary(move |x| x * v, move |_, _, u| u * v)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.mul_scalar(-E::one())
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary(|x| x.exp(), |_, y, u| u * y)
    }

    pub fn ln(&self) -> Tensor<E> {
        self.unary(|x| x.ln(), |x, _, u| u / x)
    }

    pub fn sqrt_t(&self) -> Tensor<E> {
        self.unary(
            |x| x.sqrt(),
            |_, y, u| u / (y * E::of_f64(2.0)),
        )
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(
            |x| if x > E::zero() { x } else { E::zero() },
            |x, _, u| if x > E::zero() { u } else { E::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(sigmoid_scalar, |_, y, u| u * y * (E::one() - y))
    }

    pub fn silu(&self) -> Tensor<E> {
        self.unary(
            |x| x * sigmoid_scalar(x),
            |x, _, u| {
                let s = sigmoid_scalar(x);
                u * (s + x * s * (E::one() - s))
            },
        )
    }

    pub fn softplus(&self) -> Tensor<E> {
        self.unary(softplus_scalar, |x, _, u| u * sigmoid_scalar(x))
    }

    pub fn tanh_t(&self) -> Tensor<E> {
        self.unary(|x| x.tanh(), |_, y, u| u * (E::one() - y * y))
    }

    pub fn abs_t(&self) -> Tensor<E> {
        self.unary(
            |x| x.abs(),
            |x, _, u| {
                if x > E::zero() {
                    u
                } else if x < E::zero() {
                    -u
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn clamp_t(&self, lo: E, hi: E) -> Tensor<E> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _, u| if x >= lo && x <= hi { u } else { E::zero() },
        )
    }

    /// Parametric ReLU; `alpha` broadcasts against `self` (per-channel in
    /// practice).
    pub fn prelu(&self, alpha: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(
            alpha,
            |x, a| if x > E::zero() { x } else { a * x },
            |x, a, u| {
                if x > E::zero() {
                    (u, E::zero())
                } else {
                    (u * a, u * x)
                }
            },
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in self.data() {
            acc += v;
        }
        let n = self.numel();
        let x = self.clone();
        let back = Box::new(move |up: &[E]| {
            let _ = &x;
            vec![Some(vec![up[0]; n])]
        });
        Tensor::from_op(vec![acc], vec![1], vec![self.clone()], back)
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::of_f64(self.numel() as f64);
        self.sum_all().mul_scalar(E::one() / n)
    }

    /// Mean over the two trailing spatial dims: [B,C,H,W] -> [B,C,1,1].
    pub fn mean_hw(&self) -> Tensor<E> {
        assert_eq!(self.ndim(), 4);
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let inv = E::one() / E::of_f64(hw as f64);
        let mut data = vec![E::zero(); b * c];
        for bc in 0..b * c {
            let base = bc * hw;
            let mut acc = E::zero();
            for i in 0..hw {
                acc += self.data()[base + i];
            }
            data[bc] = acc * inv;
        }
        let back = Box::new(move |up: &[E]| {
            let mut g = vec![E::zero(); up.len() * hw];
            for bc in 0..up.len() {
                let v = up[bc] * inv;
                for i in 0..hw {
                    g[bc * hw + i] = v;
                }
            }
            vec![Some(g)]
        });
        Tensor::from_op(data, vec![b, c, 1, 1], vec![self.clone()], back)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        let back = Box::new(move |up: &[E]| vec![Some(up.to_vec())]);
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            back,
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<E> {
        assert_eq!(axes.len(), self.ndim());
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let data = permute_data(self.data(), &in_shape, axes);
        let axes_v = axes.to_vec();
        let back = Box::new(move |up: &[E]| {
            // invert the permutation
            let mut inv = vec![0usize; axes_v.len()];
            for (i, &a) in axes_v.iter().enumerate() {
                inv[a] = i;
            }
            let out_shape: Vec<usize> = axes_v.iter().map(|&a| in_shape[a]).collect();
            vec![Some(permute_data(up, &out_shape, &inv))]
        });
        Tensor::from_op(data, out_shape, vec![self.clone()], back)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis]);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let full = shape[axis];
        let numel = self.numel();
        let back = Box::new(move |up: &[E]| {
            let mut g = vec![E::zero(); numel];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * full * inner + start * inner;
                g[dst..dst + len * inner].copy_from_slice(&up[src..src + len * inner]);
            }
            vec![Some(g)]
        });
        Tensor::from_op(data, out_shape, vec![self.clone()], back)
    }

    /// Gather along `axis` by explicit indices. Backward scatters with
    /// accumulation.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        for &i in indices {
            assert!(i < n, "index {i} out of range {n}");
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = o * n * inner + i * inner;
                data.extend_from_slice(&self.data()[base..base + inner]);
            }
        }
        let idx = indices.to_vec();
        let numel = self.numel();
        let back = Box::new(move |up: &[E]| {
            let mut g = vec![E::zero(); numel];
            let k = idx.len();
            for o in 0..outer {
                for (j, &i) in idx.iter().enumerate() {
                    let src = (o * k + j) * inner;
                    let dst = o * n * inner + i * inner;
                    for t in 0..inner {
                        g[dst + t] += up[src + t];
                    }
                }
            }
            vec![Some(g)]
        });
        Tensor::from_op(data, out_shape, vec![self.clone()], back)
    }

    /// Materialized broadcast of `self` to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let out_shape = broadcast_shapes(self.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::InvalidShape(format!(
                "cannot expand {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let sa = broadcast_strides(self.shape(), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![E::zero(); numel];
        {
            let src = self.data();
            let zeros = vec![0usize; out_shape.len()];
            for_each_bcast2(&out_shape, &sa, &zeros, |o, ao, _| {
                data[o] = src[ao];
            });
        }
        let in_shape = self.shape().to_vec();
        let os = out_shape.clone();
        let back = Box::new(move |up: &[E]| vec![Some(reduce_to_shape(up, &os, &in_shape))]);
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], back))
    }

    pub fn cat(tensors: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        assert!(!tensors.is_empty());
        let first = tensors[0].shape().to_vec();
        let mut axis_total = 0;
        for t in tensors {
            if t.ndim() != first.len() {
                return Err(Error::InvalidShape("cat rank mismatch".into()));
            }
            for (d, (&a, &b)) in first.iter().zip(t.shape().iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::InvalidShape(format!(
                        "cat shape mismatch at dim {d}: {first:?} vs {:?}",
                        t.shape()
                    )));
                }
            }
            axis_total += t.shape()[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![E::zero(); numel];
        let mut offset = 0;
        let mut spans = Vec::new();
        for t in tensors {
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * axis_total * inner + offset * inner;
                data[dst..dst + len * inner].copy_from_slice(&t.data()[src..src + len * inner]);
            }
            spans.push((offset, len));
            offset += len;
        }
        let back = Box::new(move |up: &[E]| {
            spans
                .iter()
                .map(|&(off, len)| {
                    let mut g = vec![E::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src = o * axis_total * inner + off * inner;
                        let dst = o * len * inner;
                        g[dst..dst + len * inner].copy_from_slice(&up[src..src + len * inner]);
                    }
                    Some(g)
                })
                .collect()
        });
        Ok(Tensor::from_op(data, out_shape, tensors.to_vec(), back))
    }

    /// Batched matrix product: [..,m,k] x [..,k,n] -> [..,m,n] with batch
    /// broadcasting.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(Error::InvalidShape("matmul needs rank >= 2".into()));
        }
        let (m, k) = (self.shape()[self.ndim() - 2], self.shape()[self.ndim() - 1]);
        let (k2, n) = (other.shape()[other.ndim() - 2], other.shape()[other.ndim() - 1]);
        if k != k2 {
            return Err(Error::InvalidShape(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let a_batch = &self.shape()[..self.ndim() - 2];
        let b_batch = &other.shape()[..other.ndim() - 2];
        let batch_shape = broadcast_shapes(a_batch, b_batch)?;
        let batch: usize = batch_shape.iter().product();
        let sa = batch_strides(a_batch, &batch_shape, m * k);
        let sb = batch_strides(b_batch, &batch_shape, k * n);

        let ad = self.data();
        let bd = other.data();
        let mut data = vec![E::zero(); batch * m * n];
        data.par_chunks_mut(m * n).enumerate().for_each(|(bi, out)| {
            let ao = batch_offset(bi, &batch_shape, &sa);
            let bo = batch_offset(bi, &batch_shape, &sb);
            matmul_kernel(&ad[ao..ao + m * k], &bd[bo..bo + k * n], out, m, k, n);
        });

        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let a = self.clone();
        let b = other.clone();
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let back = Box::new(move |up: &[E]| {
            let ad = a.data();
            let bd = b.data();
            // da_full[bi] = up[bi] * b[bi]^T ; db_full[bi] = a[bi]^T * up[bi]
            let mut da_full = vec![E::zero(); batch * m * k];
            let mut db_full = vec![E::zero(); batch * k * n];
            da_full
                .par_chunks_mut(m * k)
                .zip(db_full.par_chunks_mut(k * n))
                .enumerate()
                .for_each(|(bi, (da, db))| {
                    let ao = batch_offset(bi, &batch_shape, &sa);
                    let bo = batch_offset(bi, &batch_shape, &sb);
                    let u = &up[bi * m * n..(bi + 1) * m * n];
                    // da = u (m x n) * b^T (n x k)
                    for i in 0..m {
                        for j in 0..n {
                            let uv = u[i * n + j];
                            if uv != E::zero() {
                                let brow = &bd[bo + j..];
                                for p in 0..k {
                                    da[i * k + p] += uv * brow[p * n];
                                }
                            }
                        }
                    }
                    // db = a^T (k x m) * u (m x n)
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[ao + i * k + p];
                            if av != E::zero() {
                                for j in 0..n {
                                    db[p * n + j] += av * u[i * n + j];
                                }
                            }
                        }
                    }
                });
            let mut full_a_shape = batch_shape.clone();
            full_a_shape.push(m);
            full_a_shape.push(k);
            let mut full_b_shape = batch_shape.clone();
            full_b_shape.push(k);
            full_b_shape.push(n);
            let ga = reduce_to_shape(&da_full, &full_a_shape, &a_shape);
            let gb = reduce_to_shape(&db_full, &full_b_shape, &b_shape);
            vec![Some(ga), Some(gb)]
        });
        Ok(Tensor::from_op(data, out_shape, vec![self.clone(), other.clone()], back))
    }

    /// Layer normalization over the trailing dimension, then affine.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        assert!(eps > E::zero());
        let c = *self.shape().last().expect("layer_norm on rank >= 1");
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::InvalidShape(format!(
                "layer_norm affine params must have {c} elements"
            )));
        }
        let rows = self.numel() / c;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![E::zero(); self.numel()];
        let mut xhat = vec![E::zero(); self.numel()];
        let mut inv_std = vec![E::zero(); rows];
        let inv_c = E::one() / E::of_f64(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mean = E::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let istd = E::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let h = (row[i] - mean) * istd;
                xhat[r * c + i] = h;
                data[r * c + i] = h * gd[i] + bd[i];
            }
        }
        let gamma_t = gamma.clone();
        let back = Box::new(move |up: &[E]| {
            let gd = gamma_t.data();
            let mut gx = vec![E::zero(); rows * c];
            let mut gg = vec![E::zero(); c];
            let mut gb = vec![E::zero(); c];
            for r in 0..rows {
                let urow = &up[r * c..(r + 1) * c];
                let hrow = &xhat[r * c..(r + 1) * c];
                let istd = inv_std[r];
                let mut sum_u = E::zero();
                let mut sum_uh = E::zero();
                for i in 0..c {
                    let ug = urow[i] * gd[i];
                    sum_u += ug;
                    sum_uh += ug * hrow[i];
                    gg[i] += urow[i] * hrow[i];
                    gb[i] += urow[i];
                }
                for i in 0..c {
                    let ug = urow[i] * gd[i];
                    gx[r * c + i] = istd * (ug - inv_c * sum_u - hrow[i] * inv_c * sum_uh);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        });
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            back,
        ))
    }
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn softplus_scalar<E: Element>(x: E) -> E {
    // log(1 + e^x), stable for large |x|
    let threshold = E::of_f64(20.0);
    if x > threshold {
        x
    } else if x < -threshold {
        x.exp()
    } else {
        (E::one() + x.exp()).ln()
    }
}

pub fn softplus_val<E: Element>(x: E) -> E {
    softplus_scalar(x)
}

pub fn sigmoid_val<E: Element>(x: E) -> E {
    sigmoid_scalar(x)
}

/// Inverse of softplus: returns `x` with `softplus(x) == y` for `y > 0`.
pub fn softplus_inverse<E: Element>(y: E) -> E {
    // x = log(e^y - 1)
    let y64 = y.as_f64();
    E::of_f64((y64.exp() - 1.0).max(1e-300).ln())
}

fn permute_data<E: Element>(data: &[E], in_shape: &[usize], axes: &[usize]) -> Vec<E> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = contiguous_strides(in_shape);
    let numel: usize = in_shape.iter().product();
    let mut out = vec![E::zero(); numel];
    let ndim = in_shape.len();
    let mut idx = vec![0usize; ndim];
    let mut in_off = 0usize;
    // iterate output in order, mapping to input offsets via permuted strides
    let strides_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    for o in 0..numel {
        out[o] = data[in_off];
        for d in (0..ndim).rev() {
            idx[d] += 1;
            in_off += strides_out[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            in_off -= strides_out[d] * out_shape[d];
        }
    }
    out
}

fn batch_strides(shape: &[usize], batch_shape: &[usize], _mat: usize) -> Vec<usize> {
    broadcast_strides(shape, batch_shape)
        .iter()
        .map(|&s| s * _mat)
        .collect()
}

fn batch_offset(mut bi: usize, batch_shape: &[usize], strides: &[usize]) -> usize {
    let mut off = 0;
    for d in (0..batch_shape.len()).rev() {
        let i = bi % batch_shape[d];
        bi /= batch_shape[d];
        off += i * strides[d];
    }
    off
}

fn matmul_kernel<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != E::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let x = Tensor::<f64>::scalar(0.0);
        assert!((x.softplus().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let x = Tensor::<f64>::scalar(0.0);
        assert_eq!(x.silu().item(), 0.0);
    }

    #[test]
    fn add_broadcasts_trailing() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]);
        let b = Tensor::<f64>::new(vec![3.0], &[1]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0]);
    }

    #[test]
    fn broadcast_mismatch_is_invalid_shape() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]);
        let b = Tensor::<f64>::new(vec![1.0, 2.0, 3.0], &[3]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let p = i2.matmul(&m).unwrap();
        assert_eq!(p.data(), m.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::<f64>::new(vec![3.0, 4.0], &[2, 1]);
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn layer_norm_constant_vector_zeroes_out() {
        let x = Tensor::<f64>::full(&[1, 4], 5.0);
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Tensor::<f64>::new(vec![1.0, -1.0], &[1, 2]);
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
        assert!((y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::new((0..24).map(|v| v as f64).collect(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]);
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn cat_narrow_roundtrip() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::new(vec![5.0, 6.0], &[2, 1]);
        let c = Tensor::cat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let a2 = c.narrow(1, 0, 2);
        assert_eq!(a2.data(), a.data());
    }

    #[test]
    fn index_select_gathers_rows() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let y = x.index_select(0, &[2, 0]);
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn elementwise_matches_materialized_broadcast() {
        let a = Tensor::<f64>::new((0..12).map(|v| v as f64 * 0.5).collect(), &[3, 4]);
        let b = Tensor::<f64>::new(vec![1.0, -2.0, 3.0, 0.25], &[4]);
        let direct = a.mul(&b).unwrap();
        let mat = a.mul(&b.expand(&[3, 4]).unwrap()).unwrap();
        assert_eq!(direct.data(), mat.data());
    }
}
