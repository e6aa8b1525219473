//! Dense numerical building blocks with hand-written backward passes.
//!
//! Every layer is generic over [`Real`] so the same code trains in `f32` and
//! is gradient-checked in `f64`. Layers hold [`ParamId`]s into a
//! [`ParamStore`]; gradients accumulate into a parallel [`Grads`] buffer.

mod layers;
mod params;

pub use layers::{
    gelu, gelu_grad, l2_normalize, l2_normalize_backward, sigmoid, softmax_in_place, Attention,
    AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear, Mlp,
    MlpCache, INIT_STD,
};
pub use params::{Grads, Init, Param, ParamGroup, ParamId, ParamStore};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar used by all layers.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn vstack(parts: &[&Mat<T>]) -> Self {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self { rows, cols, data }
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x · W` where `w` is an `in × out` row-major weight.
pub fn matmul<T: Real>(x: &Mat<T>, w: &[T], out: usize) -> Mat<T> {
    let inp = x.cols;
    debug_assert_eq!(w.len(), inp * out);
    let mut y = Mat::zeros(x.rows, out);
    for i in 0..x.rows {
        let xr = &x.data[i * inp..(i + 1) * inp];
        let yr = &mut y.data[i * out..(i + 1) * out];
        for (p, &a) in xr.iter().enumerate() {
            if a != T::zero() {
                axpy(a, &w[p * out..(p + 1) * out], yr);
            }
        }
    }
    y
}

/// `dy · Wᵀ` for an `in × out` weight, giving the gradient w.r.t. the input.
pub fn matmul_wt<T: Real>(dy: &Mat<T>, w: &[T], inp: usize) -> Mat<T> {
    let out = dy.cols;
    debug_assert_eq!(w.len(), inp * out);
    let mut dx = Mat::zeros(dy.rows, inp);
    for i in 0..dy.rows {
        let dr = &dy.data[i * out..(i + 1) * out];
        for p in 0..inp {
            dx.data[i * inp + p] = dot(dr, &w[p * out..(p + 1) * out]);
        }
    }
    dx
}

/// `dW += xᵀ · dy`.
pub fn accum_xt_dy<T: Real>(x: &Mat<T>, dy: &Mat<T>, dw: &mut [T]) {
    let inp = x.cols;
    let out = dy.cols;
    debug_assert_eq!(x.rows, dy.rows);
    for i in 0..x.rows {
        let xr = &x.data[i * inp..(i + 1) * inp];
        let dr = &dy.data[i * out..(i + 1) * out];
        for (p, &a) in xr.iter().enumerate() {
            if a != T::zero() {
                axpy(a, dr, &mut dw[p * out..(p + 1) * out]);
            }
        }
    }
}
