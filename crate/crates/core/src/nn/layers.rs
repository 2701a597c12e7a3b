use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, Act, ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Fills a tensor with `N(0, std²)` draws.
pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>())
            .map(|_| T::of(normal.sample(rng)))
            .collect(),
    }
}

/// Output positions `o < n_out` whose tap `o·stride + offset − pad` lands inside `0..n_in`.
fn valid_outputs(n_out: usize, stride: usize, offset: usize, pad: usize, n_in: usize) -> std::ops::Range<usize> {
    if n_in + pad <= offset {
        return 0..0;
    }
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = ((n_in + pad - offset - 1) / stride + 1).min(n_out);
    lo..hi.max(lo)
}

/// 2D convolution (cross-correlation) with bias, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Saved im2col matrix of a convolution's input.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Registers weights drawn from `N(0, gain²·2/fan_in)` and a zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let weight = params.push(
            format!("{name}.weight"),
            normal_tensor(&[cout, cin, k, k], gain * (2.0 / fan_in).sqrt(), rng),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col<T: Scalar>(&self, x: &Act<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        if k == 1 && s == 1 && p == 0 {
            return x.data.clone();
        }
        // rows are written in order, so padding is the only thing filled with zeros
        let mut cols = Vec::with_capacity(self.cin * k * k * x.n * ho * wo);
        let hw = x.plane();
        for ci in 0..self.cin {
            for ky in 0..k {
                let ys = valid_outputs(ho, s, ky, p, x.h);
                for kx in 0..k {
                    let xs = valid_outputs(wo, s, kx, p, x.w);
                    for smp in 0..x.n {
                        let src = &x.data[(ci * x.n + smp) * hw..(ci * x.n + smp + 1) * hw];
                        for oy in 0..ho {
                            if !ys.contains(&oy) || xs.is_empty() {
                                cols.resize(cols.len() + wo, T::zero());
                                continue;
                            }
                            let iy = oy * s + ky - p;
                            let ix0 = xs.start * s + kx - p;
                            let srow = &src[iy * x.w + ix0..(iy + 1) * x.w];
                            cols.resize(cols.len() + xs.start, T::zero());
                            if s == 1 {
                                cols.extend_from_slice(&srow[..xs.len()]);
                            } else {
                                cols.extend(srow.iter().step_by(s).take(xs.len()));
                            }
                            cols.resize(cols.len() + wo - xs.end, T::zero());
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> Act<T> {
        let (c, n, h, w) = shape;
        let (k, s, p) = (self.k, self.stride, self.pad);
        if k == 1 && s == 1 && p == 0 {
            return Act {
                c,
                n,
                h,
                w,
                data: cols.to_vec(),
            };
        }
        let mut dx = Act::zeros(c, n, h, w);
        let l = n * ho * wo;
        let hw = h * w;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for smp in 0..n {
                        let dst = &mut dx.data[(ci * n + smp) * hw..(ci * n + smp + 1) * hw];
                        for oy in valid_outputs(ho, s, ky, p, h) {
                            let iy = oy * s + ky - p;
                            let srow = &src[(smp * ho + oy) * wo..(smp * ho + oy + 1) * wo];
                            let drow = &mut dst[iy * w..(iy + 1) * w];
                            let xs = valid_outputs(wo, s, kx, p, w);
                            if xs.is_empty() {
                                continue;
                            }
                            let ix0 = xs.start * s + kx - p;
                            for (d, &v) in drow[ix0..].iter_mut().step_by(s).zip(&srow[xs]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Act<T>, keep: bool) -> (Act<T>, Option<ConvCache<T>>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let cols = self.im2col(x, ho, wo);
        let kk = self.cin * self.k * self.k;
        let l = x.n * ho * wo;
        let mut out = Act {
            c: self.cout,
            n: x.n,
            h: ho,
            w: wo,
            data: params.get(self.bias).data.iter().flat_map(|&b| std::iter::repeat_n(b, l)).collect(),
        };
        gemm(self.cout, kk, l, &params.get(self.weight).data, false, &cols, false, T::one(), &mut out.data);
        let cache = keep.then(|| ConvCache {
            cols,
            in_shape: x.shape(),
        });
        (out, cache)
    }

    /// Accumulates weight/bias gradients into `grads`; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        cache: &ConvCache<T>,
        dy: &Act<T>,
        need_dx: bool,
    ) -> Option<Act<T>> {
        let kk = self.cin * self.k * self.k;
        let l = dy.n * dy.h * dy.w;
        gemm(self.cout, l, kk, &dy.data, false, &cache.cols, true, T::one(), &mut grads.get_mut(self.weight).data);
        let gb = &mut grads.get_mut(self.bias).data;
        for (co, row) in dy.data.chunks(l).enumerate() {
            gb[co] += row.iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * l];
        gemm(kk, self.cout, l, &params.get(self.weight).data, true, &dy.data, false, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, cache.in_shape, dy.h, dy.w))
    }
}

pub fn relu<T: Scalar>(x: &Act<T>) -> Act<T> {
    Act {
        data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
        ..*x
    }
}

/// Gradient through a rectifier given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Act<T>, dy: &Act<T>) -> Act<T> {
    Act {
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
        ..*dy
    }
}

/// Max pooling with a square window; padding cells never win.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, x: &Act<T>, keep: bool) -> (Act<T>, Option<MaxPoolCache>) {
        let (ho, wo) = self.out_size(x.h, x.w);
        let mut out = Act::zeros(x.c, x.n, ho, wo);
        let mut argmax = if keep { vec![0; out.data.len()] } else { Vec::new() };
        let hw = x.plane();
        if (self.k, self.stride, self.pad) == (2, 2, 0) {
            for plane in 0..x.c * x.n {
                let base = plane * hw;
                for oy in 0..ho {
                    let r0 = base + 2 * oy * x.w;
                    let r1 = r0 + x.w;
                    for ox in 0..wo {
                        let mut best_i = r0 + 2 * ox;
                        for i in [r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1] {
                            if x.data[i] > x.data[best_i] {
                                best_i = i;
                            }
                        }
                        let o = (plane * ho + oy) * wo + ox;
                        out.data[o] = x.data[best_i];
                        if keep {
                            argmax[o] = best_i;
                        }
                    }
                }
            }
            return (
                out,
                keep.then(|| MaxPoolCache {
                    argmax,
                    in_shape: x.shape(),
                }),
            );
        }
        for plane in 0..x.c * x.n {
            let base = plane * hw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    let y0 = (oy * self.stride).saturating_sub(self.pad);
                    let y1 = (oy * self.stride + self.k).saturating_sub(self.pad).min(x.h);
                    let x0 = (ox * self.stride).saturating_sub(self.pad);
                    let x1 = (ox * self.stride + self.k).saturating_sub(self.pad).min(x.w);
                    for iy in y0..y1 {
                        let row = base + iy * x.w;
                        for (i, &v) in x.data[row + x0..row + x1].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_i = row + x0 + i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data[o] = best;
                    if keep {
                        argmax[o] = best_i;
                    }
                }
            }
        }
        (
            out,
            keep.then(|| MaxPoolCache {
                argmax,
                in_shape: x.shape(),
            }),
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &MaxPoolCache, dy: &Act<T>) -> Act<T> {
        let (c, n, h, w) = cache.in_shape;
        let mut dx = Act::zeros(c, n, h, w);
        for (&i, &g) in cache.argmax.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Spatial mean per channel, returned sample-major (`N×C`).
pub fn global_avg_pool<T: Scalar>(x: &Act<T>) -> Vec<T> {
    let hw = x.plane();
    let inv = T::of(1.0 / hw as f64);
    let mut out = vec![T::zero(); x.n * x.c];
    for ch in 0..x.c {
        for s in 0..x.n {
            let sum: T = x.data[(ch * x.n + s) * hw..(ch * x.n + s + 1) * hw].iter().copied().sum();
            out[s * x.c + ch] = sum * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dfeat: &[T], shape: (usize, usize, usize, usize)) -> Act<T> {
    let (c, n, h, w) = shape;
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let mut dx = Act::zeros(c, n, h, w);
    for ch in 0..c {
        for s in 0..n {
            let g = dfeat[s * c + ch] * inv;
            dx.data[(ch * n + s) * hw..(ch * n + s + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = g);
        }
    }
    dx
}

/// `y = x·Wᵀ + b` for `x: N×in`, `W: out×in`.
pub fn linear<T: Scalar>(x: &[T], n: usize, weight: &Tensor<T>, bias: &Tensor<T>) -> Vec<T> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    let mut y = vec![T::zero(); n * out_dim];
    for row in y.chunks_mut(out_dim) {
        row.copy_from_slice(&bias.data);
    }
    gemm(n, in_dim, out_dim, x, false, &weight.data, true, T::one(), &mut y);
    y
}

/// Accumulates `dW`, `db` and returns `dx`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &Tensor<T>,
    dy: &[T],
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Vec<T> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    gemm(out_dim, n, in_dim, dy, true, x, false, T::one(), &mut dweight.data);
    for row in dy.chunks(out_dim) {
        for (b, &g) in dbias.data.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); n * in_dim];
    gemm(n, out_dim, in_dim, dy, false, &weight.data, false, T::zero(), &mut dx);
    dx
}

/// Source taps `(i0, i1, w1)` per output index for half-pixel bilinear resampling.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane to `ho×wo` (half-pixel centers, no corner alignment).
pub fn bilinear_resize<T: Scalar>(x: &Act<T>, ho: usize, wo: usize) -> Act<T> {
    if (ho, wo) == (x.h, x.w) {
        return x.clone();
    }
    let ty = bilinear_taps(x.h, ho);
    let tx = bilinear_taps(x.w, wo);
    let mut out = Act::zeros(x.c, x.n, ho, wo);
    let (hw, ohw) = (x.plane(), ho * wo);
    for p in 0..x.c * x.n {
        let src = &x.data[p * hw..(p + 1) * hw];
        let dst = &mut out.data[p * ohw..(p + 1) * ohw];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let (wy, wx) = (T::of(wy), T::of(wx));
                let one = T::one();
                let top = src[y0 * x.w + x0] * (one - wx) + src[y0 * x.w + x1] * wx;
                let bot = src[y1 * x.w + x0] * (one - wx) + src[y1 * x.w + x1] * wx;
                dst[oy * wo + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`] back to `h×w`.
pub fn bilinear_resize_backward<T: Scalar>(dy: &Act<T>, h: usize, w: usize) -> Act<T> {
    if (h, w) == (dy.h, dy.w) {
        return dy.clone();
    }
    let ty = bilinear_taps(h, dy.h);
    let tx = bilinear_taps(w, dy.w);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    let (hw, ohw) = (h * w, dy.plane());
    for p in 0..dy.c * dy.n {
        let src = &dy.data[p * ohw..(p + 1) * ohw];
        let dst = &mut dx.data[p * hw..(p + 1) * hw];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = src[oy * dy.w + ox];
                let (wy, wx) = (T::of(wy), T::of(wx));
                let one = T::one();
                dst[y0 * w + x0] += g * (one - wy) * (one - wx);
                dst[y0 * w + x1] += g * (one - wy) * wx;
                dst[y1 * w + x0] += g * wy * (one - wx);
                dst[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    dx
}

/// Smallest row norm that can be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Normalizes each `dim`-long row to unit L2 norm. Returns rows and norms.
pub fn l2_normalize_rows<T: Scalar>(x: &[T], dim: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut y = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / dim);
    for (row, chunk) in x.chunks(dim).enumerate() {
        let norm = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm.f64() >= MIN_ROW_NORM) {
            return Err(Error::DegenerateEmbedding { row, norm: norm.f64() });
        }
        y.extend(chunk.iter().map(|&v| v / norm));
        norms.push(norm);
    }
    Ok((y, norms))
}

pub fn l2_normalize_rows_backward<T: Scalar>(y: &[T], norms: &[T], dy: &[T], dim: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for ((yr, gr), &norm) in y.chunks(dim).zip(dy.chunks(dim)).zip(norms) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &g)| (g - a * dot) / norm));
    }
    dx
}
