//! Slice-level kernels behind the differentiable ops. All layouts are
//! row-major; batch-parallel loops reduce per-sample partials in a fixed
//! order so results do not depend on thread scheduling.

use rayon::prelude::*;

use super::Float;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output positions `o` with `0 <= o*stride + k - pad < len`.
    #[inline]
    fn range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi_incl = (len as isize - 1 + p - k).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

pub(crate) fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.co * g.oh * g.ow;
    let mut out = vec![T::zero(); g.b * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(ob, xb)| {
            for co in 0..g.co {
                let oc = &mut ob[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
                if let Some(bias) = bias {
                    oc.iter_mut().for_each(|v| *v = bias[co]);
                }
                for ci in 0..g.c {
                    let xc = &xb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ki in 0..g.kh {
                        let (oy0, oy1) = g.range(ki, g.h, g.oh);
                        for kj in 0..g.kw {
                            let wv = w[((co * g.c + ci) * g.kh + ki) * g.kw + kj];
                            let (ox0, ox1) = g.range(kj, g.w, g.ow);
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ki - g.pad;
                                let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                                let orow = &mut oc[oy * g.ow..(oy + 1) * g.ow];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn conv2d_backward_input<T: Float>(g: &ConvGeom, w: &[T], dy: &[T]) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.co * g.oh * g.ow;
    let mut dx = vec![T::zero(); g.b * in_sz];
    dx.par_chunks_mut(in_sz)
        .zip(dy.par_chunks(out_sz))
        .for_each(|(dxb, dyb)| {
            for co in 0..g.co {
                let dyc = &dyb[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
                for ci in 0..g.c {
                    let dxc = &mut dxb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ki in 0..g.kh {
                        let (oy0, oy1) = g.range(ki, g.h, g.oh);
                        for kj in 0..g.kw {
                            let wv = w[((co * g.c + ci) * g.kh + ki) * g.kw + kj];
                            let (ox0, ox1) = g.range(kj, g.w, g.ow);
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ki - g.pad;
                                let dyrow = &dyc[oy * g.ow..(oy + 1) * g.ow];
                                let dxrow = &mut dxc[iy * g.w..(iy + 1) * g.w];
                                for ox in ox0..ox1 {
                                    dxrow[ox * g.stride + kj - g.pad] += wv * dyrow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub(crate) fn conv2d_backward_weight<T: Float>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.co * g.oh * g.ow;
    let wsz = g.co * g.c * g.kh * g.kw;
    let partials: Vec<Vec<T>> = x
        .par_chunks(in_sz)
        .zip(dy.par_chunks(out_sz))
        .map(|(xb, dyb)| {
            let mut dw = vec![T::zero(); wsz];
            for co in 0..g.co {
                let dyc = &dyb[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
                for ci in 0..g.c {
                    let xc = &xb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ki in 0..g.kh {
                        let (oy0, oy1) = g.range(ki, g.h, g.oh);
                        for kj in 0..g.kw {
                            let (ox0, ox1) = g.range(kj, g.w, g.ow);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ki - g.pad;
                                let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                                let dyrow = &dyc[oy * g.ow..(oy + 1) * g.ow];
                                for ox in ox0..ox1 {
                                    acc += dyrow[ox] * xrow[ox * g.stride + kj - g.pad];
                                }
                            }
                            dw[((co * g.c + ci) * g.kh + ki) * g.kw + kj] += acc;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    sum_partials(partials, wsz)
}

pub(crate) fn sum_partials<T: Float>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    total
}

/// Sum over batch and spatial positions per channel of a `[b, c, inner]` layout.
pub(crate) fn channel_sums<T: Float>(v: &[T], b: usize, c: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let base = (bi * c + ci) * inner;
            *o += v[base..base + inner].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn avg_pool_forward<T: Float>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
) -> (Vec<T>, usize, usize) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let norm = T::one() / T::lit((k * k) as f64);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..k {
                    let row = (oy * s + i) * w + ox * s;
                    acc += xp[row..row + k].iter().copied().sum::<T>();
                }
                op[oy * ow + ox] = acc * norm;
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn avg_pool_backward<T: Float>(
    dy: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
) -> Vec<T> {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let norm = T::one() / T::lit((k * k) as f64);
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let dyp = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyp[oy * ow + ox] * norm;
                for i in 0..k {
                    let row = (oy * s + i) * w + ox * s;
                    dxp[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// Index in the `[b, 4c, h/2, w/2]` output for input element `(bi, ci, y, x)`.
/// Channel blocks: (even h, even w), (even h, odd w), (odd h, even w), (odd h, odd w).
#[inline]
fn s2d_index(bi: usize, ci: usize, y: usize, x: usize, c: usize, h2: usize, w2: usize) -> usize {
    let block = (y % 2) * 2 + (x % 2);
    let oc = block * c + ci;
    ((bi * 4 * c + oc) * h2 + y / 2) * w2 + x / 2
}

pub(crate) fn space_to_depth<T: Float>(x: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[s2d_index(bi, ci, y, xx, c, h2, w2)] = x[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `dims` are those of the original input.
pub(crate) fn depth_to_space<T: Float>(y: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); y.len()];
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    out[((bi * c + ci) * h + yy) * w + xx] = y[s2d_index(bi, ci, yy, xx, c, h2, w2)];
                }
            }
        }
    }
    out
}

/// `y[i, j] = sum_k x[i, k] * w[j, k]` for `x: [n, k]`, `w: [m, k]`.
pub(crate) fn matmul_nt<T: Float>(x: &[T], w: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * m];
    y.par_chunks_mut(m).enumerate().for_each(|(i, yr)| {
        let xr = &x[i * k..(i + 1) * k];
        for (j, out) in yr.iter_mut().enumerate() {
            let wr = &w[j * k..(j + 1) * k];
            *out = dot(xr, wr);
        }
    });
    y
}

/// `dx[i, k] = sum_j dy[i, j] * w[j, k]`.
pub(crate) fn matmul_nn<T: Float>(dy: &[T], w: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * k];
    dx.par_chunks_mut(k).enumerate().for_each(|(i, dxr)| {
        for j in 0..m {
            let g = dy[i * m + j];
            if g == T::zero() {
                continue;
            }
            let wr = &w[j * k..(j + 1) * k];
            dxr.iter_mut().zip(wr).for_each(|(a, &b)| *a += g * b);
        }
    });
    dx
}

/// `dw[j, k] = sum_i dy[i, j] * x[i, k]`.
pub(crate) fn matmul_tn<T: Float>(dy: &[T], x: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); m * k];
    dw.par_chunks_mut(k).enumerate().for_each(|(j, dwr)| {
        for i in 0..n {
            let g = dy[i * m + j];
            if g == T::zero() {
                continue;
            }
            let xr = &x[i * k..(i + 1) * k];
            dwr.iter_mut().zip(xr).for_each(|(a, &b)| *a += g * b);
        }
    });
    dw
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
