//! Minimal CPU network engine with hand-written reverse passes.
//!
//! Activations are stored channel-major across the batch (`C×N×H×W`), so a
//! convolution is one im2col followed by one matrix product for the whole
//! batch and channel concatenation is a buffer append. Parameters live in a
//! [`ParamSet`] arena addressed by [`ParamId`]; gradients are a second arena of
//! the same layout.

mod layers;
mod params;

pub use layers::{
    bilinear_resize, bilinear_resize_backward, global_avg_pool, global_avg_pool_backward, l2_normalize_rows,
    l2_normalize_rows_backward, linear, linear_backward, relu, relu_backward, Conv2d, ConvCache, MaxPool,
    MaxPoolCache,
};
pub(crate) use layers::normal_tensor;
pub use params::{ParamId, ParamSet, Tensor};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the engine (`f32` for training, `f64` for
/// gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// `C = alpha·A·B + beta·C` over raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m×n) = op(A)·op(B) + beta·C`, where `op(A)` is `m×k` and
/// `op(B)` is `k×n`. A transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A `C×N×H×W` activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.c, self.n, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Builds a batch from `N×C×H×W` (sample-major) values.
    pub fn from_nchw(n: usize, c: usize, h: usize, w: usize, values: &[T]) -> Self {
        assert_eq!(values.len(), n * c * h * w);
        let hw = h * w;
        let mut out = Self::zeros(c, n, h, w);
        for s in 0..n {
            for ch in 0..c {
                let src = &values[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                out.data[(ch * n + s) * hw..(ch * n + s + 1) * hw].copy_from_slice(src);
            }
        }
        out
    }

    /// Sample-major copy (`N×C×H×W`).
    pub fn to_nchw(&self) -> Vec<T> {
        let hw = self.plane();
        let mut out = vec![T::zero(); self.data.len()];
        for s in 0..self.n {
            for ch in 0..self.c {
                out[(s * self.c + ch) * hw..(s * self.c + ch + 1) * hw]
                    .copy_from_slice(&self.data[(ch * self.n + s) * hw..(ch * self.n + s + 1) * hw]);
            }
        }
        out
    }

    /// Samples `start..start+len` of the batch.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        let hw = self.plane();
        let mut out = Self::zeros(self.c, len, self.h, self.w);
        for ch in 0..self.c {
            let src = (ch * self.n + start) * hw;
            out.data[ch * len * hw..(ch + 1) * len * hw].copy_from_slice(&self.data[src..src + len * hw]);
        }
        out
    }

    /// Batch concatenation of two activations with equal `C×H×W`.
    pub fn concat_batch(&self, other: &Self) -> Self {
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        let hw = self.plane();
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for ch in 0..self.c {
            data.extend_from_slice(&self.data[ch * self.n * hw..(ch + 1) * self.n * hw]);
            data.extend_from_slice(&other.data[ch * other.n * hw..(ch + 1) * other.n * hw]);
        }
        Self {
            c: self.c,
            n: self.n + other.n,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Channel concatenation of two activations with equal `N×H×W`.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self {
            c: self.c + other.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Splits channels at `c0`; inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, c0: usize) -> (Self, Self) {
        let cut = c0 * self.n * self.plane();
        (
            Self {
                c: c0,
                n: self.n,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Self {
                c: self.c - c0,
                n: self.n,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0f64; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut c2);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn layout_round_trip() {
        let vals: Vec<f32> = (0..2 * 3 * 2 * 2).map(|v| v as f32).collect();
        let a = Act::from_nchw(2, 3, 2, 2, &vals);
        assert_eq!(a.to_nchw(), vals);
        let s = a.slice_batch(1, 1);
        assert_eq!(s.to_nchw(), vals[12..].to_vec());
        let both = s.concat_batch(&a.slice_batch(0, 1));
        assert_eq!(both.to_nchw(), [&vals[12..], &vals[..12]].concat());
        let (x, y) = a.concat_channels(&a).split_channels(3);
        assert_eq!((x, y), (a.clone(), a));
    }
}
