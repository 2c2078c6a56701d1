//! Tape-free numeric kernels: convolution via im2col + GEMM, pooling and
//! bilinear resampling, each with its backward pass.
//!
//! Batched kernels parallelize over samples (or planes); every output
//! element is produced by exactly one task and cross-sample reductions are
//! summed in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::real::Real;

/// Geometry of a 2-D cross-correlation on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        h: usize,
        w: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1, "stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        Self {
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    /// Rows of the unfolded patch matrix (`in_ch * kh * kw`).
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[in_ch, h, w]` into `[in_ch*kh*kw, oh*ow]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if x < 0 || x >= g.w as isize {
                            T::ZERO
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[in_ch, h, w]`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::ZERO; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

fn bias_grad<T: Real>(dy: &[T], n: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::ZERO; ch];
    for i in 0..n {
        for (c, d) in db.iter_mut().enumerate() {
            let s = (i * ch + c) * plane;
            *d += dy[s..s + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Cross-correlation of `n` samples with weights `[out_ch, in_ch, kh, kw]`.
pub fn conv2d_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let mut out = vec![T::ZERO; n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xi)| {
            if g.is_pointwise() {
                T::gemm(g.out_ch, g.in_ch, ohw, T::ONE, weight, false, xi, false, T::ZERO, o);
            } else {
                let mut cols = vec![T::ZERO; g.patch_len() * ohw];
                im2col(xi, g, &mut cols);
                T::gemm(
                    g.out_ch,
                    g.patch_len(),
                    ohw,
                    T::ONE,
                    weight,
                    false,
                    &cols,
                    false,
                    T::ZERO,
                    o,
                );
            }
            if let Some(b) = bias {
                for (c, &bv) in b.iter().enumerate() {
                    o[c * ohw..(c + 1) * ohw].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let ohw = g.oh * g.ow;
    let plen = g.patch_len();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * g.in_len()..(i + 1) * g.in_len()];
            let dyi = &dy[i * g.out_len()..(i + 1) * g.out_len()];
            let mut dw = vec![T::ZERO; g.out_ch * plen];
            let dx = if g.is_pointwise() {
                T::gemm(g.out_ch, ohw, plen, T::ONE, dyi, false, xi, true, T::ZERO, &mut dw);
                need_dx.then(|| {
                    let mut dx = vec![T::ZERO; g.in_len()];
                    T::gemm(plen, g.out_ch, ohw, T::ONE, weight, true, dyi, false, T::ZERO, &mut dx);
                    dx
                })
            } else {
                let mut cols = vec![T::ZERO; plen * ohw];
                im2col(xi, g, &mut cols);
                T::gemm(g.out_ch, ohw, plen, T::ONE, dyi, false, &cols, true, T::ZERO, &mut dw);
                need_dx.then(|| {
                    T::gemm(
                        plen,
                        g.out_ch,
                        ohw,
                        T::ONE,
                        weight,
                        true,
                        dyi,
                        false,
                        T::ZERO,
                        &mut cols,
                    );
                    let mut dx = vec![T::ZERO; g.in_len()];
                    col2im(&cols, g, &mut dx);
                    dx
                })
            };
            (dw, dx)
        })
        .collect();
    let mut dws = Vec::with_capacity(n);
    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * g.in_len()));
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    ConvGrads {
        dx: dx_all,
        dw: sum_in_order(dws, g.out_ch * plen),
        db: bias_grad(dy, n, g.out_ch, ohw),
    }
}

/// Geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of: `g.in_*` describe the transposed
/// conv's *output* and `g.o*` its *input*.
pub fn conv_transpose_geom(
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> ConvGeom {
    let oh = (h - 1) * stride + k + output_pad - 2 * pad;
    let ow = (w - 1) * stride + k + output_pad - 2 * pad;
    let g = ConvGeom::new(out_ch, oh, ow, in_ch, k, k, stride, pad);
    assert_eq!((g.oh, g.ow), (h, w), "inconsistent transposed-conv geometry");
    g
}

/// Transposed convolution with weights `[in_ch, out_ch, k, k]`.
/// `g` comes from [`conv_transpose_geom`].
pub fn conv_transpose2d_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.oh * g.ow;
    let plen = g.patch_len();
    let out_plane = g.h * g.w;
    let mut out = vec![T::ZERO; n * g.in_len()];
    out.par_chunks_mut(g.in_len())
        .zip(x.par_chunks(g.out_len()))
        .for_each(|(o, xi)| {
            let mut cols = vec![T::ZERO; plen * hw];
            T::gemm(plen, g.out_ch, hw, T::ONE, weight, true, xi, false, T::ZERO, &mut cols);
            col2im(&cols, g, o);
            if let Some(b) = bias {
                for (c, &bv) in b.iter().enumerate() {
                    o[c * out_plane..(c + 1) * out_plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let hw = g.oh * g.ow;
    let plen = g.patch_len();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * g.out_len()..(i + 1) * g.out_len()];
            let dyi = &dy[i * g.in_len()..(i + 1) * g.in_len()];
            let mut cols = vec![T::ZERO; plen * hw];
            im2col(dyi, g, &mut cols);
            let mut dw = vec![T::ZERO; g.out_ch * plen];
            T::gemm(g.out_ch, hw, plen, T::ONE, xi, false, &cols, true, T::ZERO, &mut dw);
            let dx = need_dx.then(|| {
                let mut dx = vec![T::ZERO; g.out_len()];
                T::gemm(
                    g.out_ch,
                    plen,
                    hw,
                    T::ONE,
                    weight,
                    false,
                    &cols,
                    false,
                    T::ZERO,
                    &mut dx,
                );
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut dws = Vec::with_capacity(n);
    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * g.out_len()));
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    ConvGrads {
        dx: dx_all,
        dw: sum_in_order(dws, g.out_ch * plen),
        db: bias_grad(dy, n, g.in_ch, g.h * g.w),
    }
}

/// Pooling window geometry over one plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(pad < k, "pool padding must be smaller than the window");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k);
        Self {
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }
}

/// Max pooling over `planes` independent `h x w` planes. Returns the output
/// and, per output cell, the in-plane index of the winning input.
pub fn max_pool_forward<T: Real>(x: &[T], planes: usize, g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let olen = g.oh * g.ow;
    let mut out = vec![T::ZERO; planes * olen];
    let mut arg = vec![0u32; planes * olen];
    out.par_chunks_mut(olen)
        .zip(arg.par_chunks_mut(olen))
        .zip(x.par_chunks(g.h * g.w))
        .for_each(|((o, a), p)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for ki in 0..g.k {
                        let y = (oy * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.k {
                            let xx = (ox * g.stride + kj) as isize - g.pad as isize;
                            if xx < 0 || xx >= g.w as isize {
                                continue;
                            }
                            let idx = y as usize * g.w + xx as usize;
                            if p[idx] > best {
                                best = p[idx];
                                best_i = idx;
                            }
                        }
                    }
                    o[oy * g.ow + ox] = best;
                    a[oy * g.ow + ox] = best_i as u32;
                }
            }
        });
    (out, arg)
}

pub fn max_pool_backward<T: Real>(dy: &[T], arg: &[u32], planes: usize, g: &PoolGeom) -> Vec<T> {
    let olen = g.oh * g.ow;
    let mut dx = vec![T::ZERO; planes * g.h * g.w];
    dx.par_chunks_mut(g.h * g.w)
        .zip(dy.par_chunks(olen).zip(arg.par_chunks(olen)))
        .for_each(|(d, (gy, a))| {
            for (v, &i) in gy.iter().zip(a) {
                d[i as usize] += *v;
            }
        });
    dx
}

/// Non-overlapping `k x k` average pooling; `h` and `w` must be multiples of `k`.
pub fn avg_pool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    assert!(h % k == 0 && w % k == 0, "avg pool needs {h}x{w} divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::ZERO; planes * oh * ow];
    out.par_chunks_mut(oh * ow).zip(x.par_chunks(h * w)).for_each(|(o, p)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::ZERO;
                for i in 0..k {
                    for j in 0..k {
                        s += p[(oy * k + i) * w + ox * k + j];
                    }
                }
                o[oy * ow + ox] = s * inv;
            }
        }
    });
    out
}

pub fn avg_pool_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut dx = vec![T::ZERO; planes * h * w];
    dx.par_chunks_mut(h * w)
        .zip(dy.par_chunks(oh * ow))
        .for_each(|(d, gy)| {
            for y in 0..h {
                for x in 0..w {
                    d[y * w + x] = gy[(y / k) * ow + x / k] * inv;
                }
            }
        });
    dx
}

/// Source taps for one output coordinate of a half-pixel-centred
/// (align-corners = false) linear resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    assert!(src >= 1 && dst >= 1, "resize dimensions must be positive");
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear resize of `planes` planes from `h x w` to `oh x ow`.
pub fn bilinear_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![T::ZERO; planes * oh * ow];
    out.par_chunks_mut(oh * ow).zip(x.par_chunks(h * w)).for_each(|(o, p)| {
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64(b.frac);
                let top = lerp(p[a.i0 * w + b.i0], p[a.i0 * w + b.i1], fx);
                let bottom = lerp(p[a.i1 * w + b.i0], p[a.i1 * w + b.i1], fx);
                o[oy * ow + ox] = lerp(top, bottom, fy);
            }
        }
    });
    out
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

pub fn bilinear_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = vec![T::ZERO; planes * h * w];
    dx.par_chunks_mut(h * w)
        .zip(dy.par_chunks(oh * ow))
        .for_each(|(d, gy)| {
            for (oy, a) in ty.iter().enumerate() {
                let fy = T::from_f64(a.frac);
                for (ox, b) in tx.iter().enumerate() {
                    let fx = T::from_f64(b.frac);
                    let g = gy[oy * ow + ox];
                    let top = g * (T::ONE - fy);
                    let bottom = g * fy;
                    d[a.i0 * w + b.i0] += top * (T::ONE - fx);
                    d[a.i0 * w + b.i1] += top * fx;
                    d[a.i1 * w + b.i0] += bottom * (T::ONE - fx);
                    d[a.i1 * w + b.i1] += bottom * fx;
                }
            }
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], g: &ConvGeom, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_ch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = 0.0;
                    for c in 0..g.in_ch {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let y = (oy * g.stride + i) as isize - g.pad as isize;
                                let xx = (ox * g.stride + j) as isize - g.pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < g.h && (xx as usize) < g.w {
                                    s += x[(c * g.h + y as usize) * g.w + xx as usize]
                                        * w[((o * g.in_ch + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn strided_padded_conv_matches_direct_loops() {
        let g = ConvGeom::new(3, 7, 6, 4, 3, 3, 2, 1);
        let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let w: Vec<f64> = (0..g.out_ch * g.patch_len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let got = conv2d_forward(&x, 1, &g, &w, None);
        let want = direct_conv(&x, &g, &w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 5, 1, 3, 3, 2, 1);
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64).cos()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.oh * g.ow)
            .map(|i| (i as f64 * 1.7).sin())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let g = conv_transpose_geom(2, 4, 4, 3, 3, 2, 1, 1);
        assert_eq!((g.h, g.w), (8, 8));
    }

    #[test]
    fn taps_for_identity_resize_are_exact() {
        for t in linear_taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.i0, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let g = PoolGeom::new(4, 4, 3, 2, 1);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (out, _) = max_pool_forward(&x, 1, &g);
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);
    }
}
